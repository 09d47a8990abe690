"""Bootstrap particle filter, resampling and effective sample size.

Particle propagation and weighting are split over ``partitions`` contiguous
index ranges.  Each partition draws from its own random stream spawned from
the step generator, so a run is reproducible for a fixed (seed, partition
count) no matter how many ``workers`` threads execute the partitions.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import logsumexp

from ssmkit import kernels
from ssmkit.errors import DegenerateEnsembleError, ModelEvaluationError, SSMError
from ssmkit.models import EMPTY_CONTEXT, as_state_space


@dataclass
class ParticleEnsemble:
    particles: Any
    log_weights: np.ndarray

    def __len__(self):
        return self.log_weights.shape[0]

    @property
    def weights(self):
        return normalised_weights(self.log_weights)

    def mean(self):
        """Weighted mean of array-valued particles."""
        w = self.weights
        return np.tensordot(w, self.particles, axes=(0, 0))


@dataclass
class ParticleContainer:
    """Proposed and filtered ensembles of one time step plus the ancestor indices linking them."""

    proposed: ParticleEnsemble
    filtered: ParticleEnsemble
    ancestors: np.ndarray
    # two preallocated particle buffers used alternately by predict
    buffers: tuple = ()
    resampled: bool = False


def normalised_weights(log_weights):
    lw = np.asarray(log_weights, dtype=np.float64)
    m = np.max(lw)
    if not np.isfinite(m):
        raise DegenerateEnsembleError()
    w = np.exp(lw - m)
    return w / w.sum()


def ess(log_weights):
    """Effective sample size ``(sum w)^2 / sum w^2``, in ``[1, N]``."""
    lw = np.asarray(log_weights, dtype=np.float64)
    m = np.max(lw)
    if not np.isfinite(m):
        raise DegenerateEnsembleError()
    w = np.exp(lw - m)
    return float(w.sum() ** 2 / np.dot(w, w))


def _cumulative(log_weights):
    lw = np.asarray(log_weights, dtype=np.float64)
    m = np.max(lw)
    if not np.isfinite(m):
        raise DegenerateEnsembleError()
    return np.cumsum(np.exp(lw - m))


def resample_multinomial(log_weights, n_out, rng):
    """i.i.d. draws from the categorical distribution of the normalised weights."""
    cum = _cumulative(log_weights)
    u = rng.random(n_out) * cum[-1]
    return kernels.inverse_cdf(cum, u)


def resample_systematic(log_weights, n_out, rng):
    """One uniform offset, ``n_out`` evenly spaced positions; output sorted ascending."""
    cum = _cumulative(log_weights)
    cum = cum / cum[-1]
    u = rng.random()
    positions = (u + np.arange(n_out)) / n_out
    return kernels.inverse_cdf(cum, positions, sorted_positions=True)


_SCHEMES = {"multinomial": resample_multinomial, "systematic": resample_systematic}


@dataclass(frozen=True)
class Resampler:
    """Resampling scheme plus ESS trigger: resample when ``ESS < threshold * N``; ``threshold=1`` resamples every step."""

    scheme: str = "systematic"
    threshold: float = 0.5

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown resampling scheme {self.scheme!r}; choose from {sorted(_SCHEMES)}")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("ESS threshold must lie in (0, 1]")

    def should_resample(self, log_weights):
        if self.threshold >= 1.0:
            return True
        return ess(log_weights) < self.threshold * len(log_weights)

    def resample(self, rng, log_weights, n_out=None):
        n_out = len(log_weights) if n_out is None else n_out
        return _SCHEMES[self.scheme](log_weights, n_out, rng)


def partition_slices(n, parts):
    bounds = np.linspace(0, n, min(parts, n) + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def spawn_streams(rng, parts):
    return [rng] if parts == 1 else rng.spawn(parts)


def run_partitioned(fn, n_tasks, workers):
    """Call ``fn(k)`` for ``k < n_tasks``, on a thread pool when ``workers > 1``."""
    if workers <= 1 or n_tasks == 1:
        for k in range(n_tasks):
            fn(k)
        return
    with ThreadPoolExecutor(max_workers=min(workers, n_tasks)) as pool:
        for f in [pool.submit(fn, k) for k in range(n_tasks)]:
            f.result()


def resample_step(rng, resampler, log_weights):
    """Ancestors and post-resampling log-weights for the predict step."""
    n = len(log_weights)
    if resampler.should_resample(log_weights):
        return resampler.resample(rng, log_weights, n), np.full(n, -math.log(n)), True
    return np.arange(n), np.array(log_weights, dtype=np.float64, copy=True), False


def log_marginal_increment(proposed_lw, filtered_lw, step):
    """``logsumexp(filtered) - logsumexp(proposed)``; raises when every filtered weight is zero."""
    top = logsumexp(filtered_lw)
    if not np.isfinite(top):
        raise DegenerateEnsembleError(step)
    return float(top - logsumexp(proposed_lw))


def _wrap(step, exc):
    if isinstance(exc, SSMError):
        return exc
    err = ModelEvaluationError(step)
    err.__cause__ = exc
    return err


class BootstrapFilter:
    """Particle filter with the transition density as proposal."""

    def __init__(self, N, resampler=None, partitions=1, workers=1):
        if N < 1:
            raise ValueError("N must be at least 1")
        self.N = int(N)
        self.resampler = resampler if resampler is not None else Resampler()
        self.partitions = max(1, int(partitions))
        self.workers = max(1, int(workers))

    def __repr__(self):
        return f"BootstrapFilter(N={self.N}, resampler={self.resampler}, partitions={self.partitions})"

    def _propagate(self, rng, fill, step):
        slices = partition_slices(self.N, self.partitions)
        streams = spawn_streams(rng, len(slices))

        def task(k):
            fill(streams[k], slices[k])

        try:
            run_partitioned(task, len(slices), self.workers)
        except Exception as exc:
            raise _wrap(step, exc) from exc

    def initialise(self, rng, model, context=EMPTY_CONTEXT):
        dyn = as_state_space(model).dynamics
        probe = np.asarray(dyn.sample_initial(np.random.default_rng(0), 1, context))
        buf_a = np.empty((self.N,) + probe.shape[1:], dtype=probe.dtype)
        buf_b = np.empty_like(buf_a)

        def fill(r, sl):
            buf_a[sl] = dyn.sample_initial(r, sl.stop - sl.start, context)

        self._propagate(rng, fill, 0)
        lw = np.full(self.N, -math.log(self.N))
        ens = ParticleEnsemble(buf_a, lw)
        return ParticleContainer(ParticleEnsemble(buf_a, lw.copy()), ens, np.arange(self.N), (buf_a, buf_b))

    def predict(self, rng, model, step, state, context=EMPTY_CONTEXT):
        dyn = as_state_space(model).dynamics
        anc, lw, did = resample_step(rng, self.resampler, state.filtered.log_weights)
        src = state.filtered.particles
        if state.buffers:
            target = state.buffers[1] if src is state.buffers[0] else state.buffers[0]
            np.take(src, anc, axis=0, out=target)
        else:
            target = src[anc]

        def fill(r, sl):
            target[sl] = dyn.sample_transition(r, step, target[sl], context)

        self._propagate(rng, fill, step)
        state.proposed = ParticleEnsemble(target, lw)
        state.ancestors = anc
        state.resampled = did
        return state

    def update(self, model, step, state, observation, context=EMPTY_CONTEXT):
        obs = as_state_space(model).observation
        parts = state.proposed.particles
        loglik = np.empty(self.N)

        def task(k):
            sl = slices[k]
            loglik[sl] = obs.logdensity_observation(step, parts[sl], observation, context)

        slices = partition_slices(self.N, self.partitions)
        try:
            run_partitioned(task, len(slices), self.workers)
        except Exception as exc:
            raise _wrap(step, exc) from exc
        lw = state.proposed.log_weights + loglik
        lw[np.isnan(lw)] = -np.inf
        ll = log_marginal_increment(state.proposed.log_weights, lw, step)
        state.filtered = ParticleEnsemble(parts, lw)
        return state, ll
