"""Run configuration: a YAML document validated against a per-command schema.

Example::

    command: inflation
    seed: 7
    particles: 16384
    resampler: {scheme: systematic, threshold: 1.0}
    params: {variant: ucsv-o, gamma: 0.2, outlier_prob: 0.05}
"""
import copy
from dataclasses import dataclass, field

import yaml

from ssmkit.errors import ConfigError

COMMANDS = ("track", "inflation", "lorenz", "pmmh", "bench")
REQUIRED = object()

# command -> (allowed engines, default engine, default particle count, default resampler)
ENGINES = {
    "track": (("kalman",), "kalman", None, None),
    "inflation": (("bootstrap",), "bootstrap", 2**14, {"scheme": "systematic", "threshold": 1.0}),
    "lorenz": (("bootstrap",), "bootstrap", 1024, {"scheme": "systematic", "threshold": 0.5}),
    "pmmh": (("kalman", "bootstrap", "rbpf"), "kalman", 512, {"scheme": "systematic", "threshold": 0.5}),
    "bench": (("rbpf",), "rbpf", None, {"scheme": "systematic", "threshold": 0.5}),
}

PARAMS = {
    "track": {
        "detections": None, "tau": 1.0, "p_detect": REQUIRED, "clutter_rate": REQUIRED,
        "bounds": REQUIRED, "initial_positions": None, "n_targets": 7, "n_steps": 50,
        "q": 1.0, "r": 0.3,
    },
    "inflation": {"input": None, "variant": "ucsv", "gamma": 0.2, "outlier_prob": 0.05},
    "lorenz": {
        "n_steps": 100, "dt": 0.025, "dynamics_std": 0.3, "observation_std": 0.5,
        "sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0,
    },
    "pmmh": {
        "n_iters": 2000, "n_obs": 100, "true_theta": [1.0, 0.5], "theta_init": [1.0, 1.0],
        "scales": [0.2, 0.2], "data": None,
    },
    "bench": {
        "n_grid": [2**k for k in range(4, 18)], "steps": 20, "repetitions": 5,
        "evidence_seeds": 30, "evidence_T": 20,
    },
}

TOP_LEVEL = ("command", "seed", "engine", "particles", "resampler", "partitions", "workers", "out", "params")


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    engine: str = None
    particles: int = None
    resampler: dict = None
    partitions: int = 1
    workers: int = 1
    out: str = "out"
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {k: copy.deepcopy(getattr(self, k)) for k in TOP_LEVEL}

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _int(name, v, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{name} must be >= {lo}")
    return v


def from_dict(d):
    """Validate and fill defaults; unknown keys and missing required values raise :class:`ConfigError`."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(d) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    cmd = d.get("command")
    if cmd not in COMMANDS:
        raise ConfigError(f"command must be one of {list(COMMANDS)}, got {cmd!r}")
    engines, engine0, n0, res0 = ENGINES[cmd]
    engine = d.get("engine") or engine0
    if engine not in engines:
        raise ConfigError(f"engine {engine!r} not available for {cmd}; choose from {list(engines)}")
    seed = _int("seed", d.get("seed", 0), 0)
    if seed >= 2**64:
        raise ConfigError("seed must fit in 64 bits")
    particles = d.get("particles", n0)
    if particles is not None:
        particles = _int("particles", particles, 1)
    resampler = d.get("resampler", res0)
    if resampler is not None:
        resampler = dict(res0 or {}, **resampler)
        extra = set(resampler) - {"scheme", "threshold"}
        if extra:
            raise ConfigError(f"unknown resampler key(s): {sorted(extra)}")
        if resampler["scheme"] not in ("systematic", "multinomial"):
            raise ConfigError(f"unknown resampling scheme {resampler['scheme']!r}")
        th = resampler["threshold"]
        if not isinstance(th, (int, float)) or not 0.0 < th <= 1.0:
            raise ConfigError("resampler threshold must lie in (0, 1]")
        resampler["threshold"] = float(th)
    schema = PARAMS[cmd]
    given = d.get("params") or {}
    if not isinstance(given, dict):
        raise ConfigError("params must be a mapping")
    unknown = set(given) - set(schema)
    if unknown:
        raise ConfigError(f"unknown {cmd} parameter(s): {sorted(unknown)}")
    params = {}
    for k, default in schema.items():
        if k in given:
            params[k] = given[k]
        elif default is REQUIRED:
            raise ConfigError(f"{cmd} requires parameter {k!r}")
        else:
            params[k] = copy.deepcopy(default)
    return RunConfig(
        command=cmd, seed=seed, engine=engine, particles=particles, resampler=resampler,
        partitions=_int("partitions", d.get("partitions", 1), 1),
        workers=_int("workers", d.get("workers", 1), 1),
        out=str(d.get("out", "out")), params=params,
    )


def loads(text):
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return from_dict(d if d is not None else {})


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)
