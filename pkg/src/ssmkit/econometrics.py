"""Trend inflation with stochastic volatility (UCSV) and its outlier-robust variant.

State layout is ``(x, log_sigma_eps, log_sigma_eta, s)``: the trend, the
log-volatility of trend innovations, the log-volatility of the transitory
component and the outlier scale (always 1 for plain UCSV).
"""
import csv
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ssmkit.genealogy import filter_with_genealogy
from ssmkit.models import EMPTY_CONTEXT, LatentDynamics, ObservationProcess, StateSpaceModel
from ssmkit.particle import BootstrapFilter, Resampler

_LOG_2PI = math.log(2.0 * math.pi)
X, LOG_EPS, LOG_ETA, SCALE = range(4)


def _normal_logpdf(x, mean, std):
    z = (x - mean) / std
    return -0.5 * z * z - np.log(std) - 0.5 * _LOG_2PI


class UCSVDynamics(LatentDynamics):
    """Random-walk trend with random-walk log-volatilities; ``s`` stays at 1."""

    dim = 4

    def __init__(self, gamma=0.2, x0_mean=0.0, x0_std=5.0):
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        self.gamma = float(gamma)
        self.x0_mean = float(x0_mean)
        self.x0_std = float(x0_std)

    def sample_initial(self, rng, n=None, context=EMPTY_CONTEXT):
        m = 1 if n is None else n
        out = np.empty((m, 4))
        out[:, X] = self.x0_mean + self.x0_std * rng.standard_normal(m)
        out[:, LOG_EPS:SCALE] = rng.standard_normal((m, 2))
        out[:, SCALE] = 1.0
        return out[0] if n is None else out

    def logdensity_initial(self, state, context=EMPTY_CONTEXT):
        s = np.asarray(state)
        lp = (_normal_logpdf(s[..., X], self.x0_mean, self.x0_std)
              + _normal_logpdf(s[..., LOG_EPS], 0.0, 1.0) + _normal_logpdf(s[..., LOG_ETA], 0.0, 1.0))
        return np.where(s[..., SCALE] == 1.0, lp, -np.inf)

    def _next_scale(self, rng, n):
        return np.ones(n)

    def _scale_logdensity(self, s):
        return np.where(s == 1.0, 0.0, -np.inf)

    def sample_transition(self, rng, step, states, context=EMPTY_CONTEXT):
        states = np.asarray(states)
        flat = states.reshape(-1, 4)
        n = flat.shape[0]
        eps = rng.standard_normal((n, 3))
        out = np.empty_like(flat)
        out[:, X] = flat[:, X] + np.exp(flat[:, LOG_EPS]) * eps[:, 0]
        out[:, LOG_EPS] = flat[:, LOG_EPS] + self.gamma * eps[:, 1]
        out[:, LOG_ETA] = flat[:, LOG_ETA] + self.gamma * eps[:, 2]
        out[:, SCALE] = self._next_scale(rng, n)
        return out.reshape(states.shape)

    def logdensity_transition(self, step, prev_states, new_states, context=EMPTY_CONTEXT):
        a, b = np.asarray(prev_states), np.asarray(new_states)
        with np.errstate(divide="ignore"):
            lp = (_normal_logpdf(b[..., X], a[..., X], np.exp(a[..., LOG_EPS]))
                  + _normal_logpdf(b[..., LOG_EPS], a[..., LOG_EPS], self.gamma)
                  + _normal_logpdf(b[..., LOG_ETA], a[..., LOG_ETA], self.gamma))
            return lp + self._scale_logdensity(b[..., SCALE])


class UCSVODynamics(UCSVDynamics):
    """UCSV plus a one-period outlier scale: ``s ~ U(0, 2)`` with probability ``p``, else 1."""

    def __init__(self, gamma=0.2, outlier_prob=0.05, x0_mean=0.0, x0_std=5.0):
        super().__init__(gamma, x0_mean, x0_std)
        if not 0.0 <= outlier_prob < 1.0:
            raise ValueError("outlier probability must lie in [0, 1)")
        self.outlier_prob = float(outlier_prob)

    def _next_scale(self, rng, n):
        # no draws at p = 0, so the random stream matches plain UCSV exactly
        if self.outlier_prob == 0.0:
            return np.ones(n)
        flag = rng.random(n) < self.outlier_prob
        u = rng.uniform(0.0, 2.0, n)
        return np.where(flag, u, 1.0)

    def _scale_logdensity(self, s):
        p = self.outlier_prob
        with np.errstate(divide="ignore"):
            # atom at 1 plus a continuous part on (0, 2]
            atom = np.where(s == 1.0, math.log1p(-p), -np.inf)
            cont = np.where((s > 0.0) & (s <= 2.0) & (s != 1.0), math.log(p / 2.0) if p > 0 else -np.inf, -np.inf)
        return np.maximum(atom, cont)


class UCSVObservation(ObservationProcess):
    """``y ~ N(x, s * exp(2 * log_sigma_eta))``."""

    dim = 1
    state_dim = 4

    def logdensity_observation(self, step, states, observation, context=EMPTY_CONTEXT):
        s = np.asarray(states)
        y = float(np.asarray(observation).reshape(-1)[0])
        std = np.sqrt(s[..., SCALE]) * np.exp(s[..., LOG_ETA])
        return _normal_logpdf(y, s[..., X], std)

    def sample_observation(self, rng, step, states, context=EMPTY_CONTEXT):
        s = np.asarray(states)
        std = np.sqrt(s[..., SCALE]) * np.exp(s[..., LOG_ETA])
        return (s[..., X] + std * rng.standard_normal(np.shape(std)))[..., None]


def ucsv_model(variant="ucsv", gamma=0.2, outlier_prob=0.05, x0_mean=0.0, x0_std=5.0):
    if variant == "ucsv":
        dyn = UCSVDynamics(gamma, x0_mean, x0_std)
    elif variant == "ucsv-o":
        dyn = UCSVODynamics(gamma, outlier_prob, x0_mean, x0_std)
    else:
        raise ValueError(f"unknown variant {variant!r}; expected 'ucsv' or 'ucsv-o'")
    return StateSpaceModel(dyn, UCSVObservation())


def pce_transform(index):
    """Year-over-year percentage change of a quarterly index: ``100 * (x_t / x_{t-4} - 1)``."""
    x = np.asarray(index, dtype=float)
    if x.ndim != 1 or x.size <= 4:
        raise ValueError("need a 1-D series longer than 4")
    if np.any(~(x > 0)):
        raise ValueError("index values must be positive")
    return 100.0 * (x[4:] / x[:-4] - 1.0)


def read_index_csv(path):
    """Two-column CSV ``(date, value)`` with a header row."""
    dates, values = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if not row or not row[0].strip():
                continue
            dates.append(row[0].strip())
            values.append(float(row[1]))
    return dates, np.asarray(values)


def bundled_index_path():
    return resources.files("ssmkit") / "data" / "synthetic_pce.csv"


def make_synthetic_index(rng, T=200, gamma=0.2, outlier_prob=0.05, start_year=1960):
    """Quarterly index whose year-over-year inflation follows a simulated UCSV-O path.

    Returns ``(dates, index, inflation, states)`` where ``inflation`` has
    length ``T`` and equals ``pce_transform(index)``.
    """
    dyn = UCSVODynamics(gamma, outlier_prob, x0_mean=3.0, x0_std=1.0)
    x = dyn.sample_initial(rng, 1)
    # start volatilities low so the series looks like quarterly inflation
    x[:, LOG_EPS] = math.log(0.3)
    x[:, LOG_ETA] = math.log(0.5)
    obs = UCSVObservation()
    states, infl = [x[0]], []
    for t in range(1, T + 1):
        x = dyn.sample_transition(rng, t, x)
        states.append(x[0])
        infl.append(float(obs.sample_observation(rng, t, x)[0, 0]))
    infl = np.asarray(infl)
    index = np.empty(T + 4)
    index[:4] = 100.0
    for t in range(T):
        index[t + 4] = index[t] * (1.0 + infl[t] / 100.0)
    dates = [f"{start_year + q // 4}-{3 * (q % 4) + 1:02d}-01" for q in range(T + 4)]
    return dates, index, infl, np.asarray(states)


def weighted_quantiles(values, weights, qs):
    """Quantiles of ``values`` ``(N, ...)`` under normalised ``weights`` along axis 0."""
    order = np.argsort(values, axis=0, kind="stable")
    v = np.take_along_axis(values, order, axis=0)
    w = np.asarray(weights)[order]
    cw = np.cumsum(w, axis=0)
    cw /= cw[-1]
    out = []
    for q in qs:
        k = np.argmax(cw >= q, axis=0)
        out.append(np.take_along_axis(v, np.expand_dims(k, 0), axis=0)[0])
    return np.asarray(out)


@dataclass
class UCSVResult:
    paths: np.ndarray        # (N, T + 1, 4) surviving lineages
    weights: np.ndarray      # final normalised weights
    trend: np.ndarray        # (T + 1, 3) quantiles 10/50/90
    vol_eta: np.ndarray
    vol_eps: np.ndarray
    log_evidence: float


QUANTILES = (0.1, 0.5, 0.9)


def run_ucsv(rng, data, variant="ucsv", gamma=0.2, outlier_prob=0.05, N=2**14, resampler=None,
             partitions=1, workers=1):
    """Bootstrap filter with genealogy; quantile bands of the surviving paths.

    Row 0 of each band belongs to the initial state; rows ``1..T`` to the data.
    """
    y = np.asarray(data, dtype=float).reshape(-1)
    model = ucsv_model(variant, gamma, outlier_prob, x0_mean=float(y[0]), x0_std=5.0)
    resampler = resampler or Resampler("systematic", 1.0)
    alg = BootstrapFilter(N, resampler, partitions, workers)
    state, ll, tree = filter_with_genealogy(rng, model, alg, [np.array([v]) for v in y])
    paths = tree.extract_paths()
    w = state.filtered.weights
    qs = lambda a: weighted_quantiles(a, w, QUANTILES).T  # noqa: E731
    return UCSVResult(
        paths, w,
        qs(paths[:, :, X]),
        qs(np.exp(paths[:, :, LOG_ETA])),
        qs(np.exp(paths[:, :, LOG_EPS])),
        float(ll),
    )


def write_quantiles_csv(path, dates, result):
    """One row per observation (the initial-state row is dropped)."""
    header = ["date"] + [f"{name}_q{int(q * 100)}" for name in ("trend", "vol_eta", "vol_eps") for q in QUANTILES]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, d in enumerate(dates, start=1):
            row = [*result.trend[t], *result.vol_eta[t], *result.vol_eps[t]]
            w.writerow([d, *(repr(float(v)) for v in row)])
