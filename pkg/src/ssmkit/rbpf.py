"""Rao-Blackwellised particle filter over a :class:`~ssmkit.models.HierarchicalModel`.

Outer states are propagated by sampling; every particle carries a belief
over the inner state that is advanced by an arbitrary nested engine.  The
inner engine is called on the whole particle batch at once, so it must
accept beliefs with a leading particle axis (both :class:`KalmanFilter` and
:class:`ForwardAlgorithm` do).
"""
import dataclasses
import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Any

import numpy as np

from ssmkit.errors import ModelEvaluationError, SSMError
from ssmkit.models import EMPTY_CONTEXT
from ssmkit.particle import (
    ParticleContainer,
    ParticleEnsemble,
    Resampler,
    log_marginal_increment,
    partition_slices,
    resample_step,
    run_partitioned,
    spawn_streams,
)


@dataclass
class RBParticles:
    """Outer states ``(N, D_u)`` and the batched inner beliefs of ``N`` particles."""

    outer: np.ndarray
    inner: Any

    def take(self, idx):
        return RBParticles(self.outer[idx], self.inner.take(idx))

    def __len__(self):
        return self.outer.shape[0]


def _ctx(context, **extra):
    return MappingProxyType({**context, **extra})


def _empty_like_belief(belief):
    return type(belief)(**{f.name: np.empty_like(getattr(belief, f.name)) for f in dataclasses.fields(belief)})


def _assign_belief(dest, sl, src):
    for f in dataclasses.fields(dest):
        getattr(dest, f.name)[sl] = getattr(src, f.name)


class RBPF:
    """Particle filter on the outer chain with an analytic inner filter per particle."""

    def __init__(self, inner_algorithm, N, resampler=None, partitions=1, workers=1):
        if N < 1:
            raise ValueError("N must be at least 1")
        self.inner_algorithm = inner_algorithm
        self.N = int(N)
        self.resampler = resampler if resampler is not None else Resampler()
        self.partitions = max(1, int(partitions))
        self.workers = max(1, int(workers))

    def __repr__(self):
        return f"RBPF({self.inner_algorithm!r}, N={self.N}, resampler={self.resampler})"

    def _locate(self, step, exc, call, n):
        # rerun particle by particle to name the one that failed
        for i in range(n):
            try:
                call(slice(i, i + 1))
            except Exception:
                err = ModelEvaluationError(step, particle=i)
                err.__cause__ = exc
                return err
        err = ModelEvaluationError(step)
        err.__cause__ = exc
        return err

    def _run(self, step, work):
        slices = partition_slices(self.N, self.partitions)
        try:
            run_partitioned(lambda k: work(k, slices[k]), len(slices), self.workers)
        except SSMError as exc:
            raise self._locate(step, exc, lambda sl: work(0, sl), self.N) from exc
        except Exception as exc:
            err = ModelEvaluationError(step)
            raise err from exc

    def initialise(self, rng, model, context=EMPTY_CONTEXT):
        outer = np.empty((self.N, model.outer_dim), dtype=model.dtype)
        slices = partition_slices(self.N, self.partitions)
        streams = spawn_streams(rng, len(slices))

        def draw(k):
            sl = slices[k]
            outer[sl] = model.outer_dynamics.sample_initial(streams[k], sl.stop - sl.start, context)

        run_partitioned(draw, len(slices), self.workers)
        inner = self.inner_algorithm.initialise(rng, model.inner_model, _ctx(context, new_outer=outer))
        if inner.batch_shape != (self.N,):
            inner = inner.expand(self.N)
        lw = np.full(self.N, -math.log(self.N))
        parts = RBParticles(outer, inner)
        return ParticleContainer(ParticleEnsemble(parts, lw.copy()), ParticleEnsemble(parts, lw), np.arange(self.N))

    def predict(self, rng, model, step, state, context=EMPTY_CONTEXT):
        anc, lw, did = resample_step(rng, self.resampler, state.filtered.log_weights)
        parents = state.filtered.particles.take(anc)
        slices = partition_slices(self.N, self.partitions)
        streams = spawn_streams(rng, len(slices))
        new_outer = np.empty_like(parents.outer)
        inner = _empty_like_belief(parents.inner)

        def work(k, sl):
            u_prev = parents.outer[sl]
            u_new = model.outer_dynamics.sample_transition(streams[k], step, u_prev, context)
            ctx = _ctx(context, prev_outer=u_prev, new_outer=u_new)
            pred = self.inner_algorithm.predict(streams[k], model.inner_model, step, parents.inner.take(sl), ctx)
            new_outer[sl] = u_new
            _assign_belief(inner, sl, pred)

        self._run(step, work)
        state.proposed = ParticleEnsemble(RBParticles(new_outer, inner), lw)
        state.ancestors = anc
        state.resampled = did
        return state

    def update(self, model, step, state, observation, context=EMPTY_CONTEXT):
        prop = state.proposed.particles
        inner = _empty_like_belief(prop.inner)
        log_inc = np.empty(self.N)

        def work(k, sl):
            ctx = _ctx(context, new_outer=prop.outer[sl])
            b, ll = self.inner_algorithm.update(model.inner_model, step, prop.inner.take(sl), observation, ctx)
            _assign_belief(inner, sl, b)
            log_inc[sl] = ll

        self._run(step, work)
        lw = state.proposed.log_weights + log_inc
        lw[np.isnan(lw)] = -np.inf
        ll = log_marginal_increment(state.proposed.log_weights, lw, step)
        state.filtered = ParticleEnsemble(RBParticles(prop.outer, inner), lw)
        return state, ll
