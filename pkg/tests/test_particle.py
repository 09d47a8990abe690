import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from conftest import scalar_lg
from ssmkit.errors import DegenerateEnsembleError, ModelEvaluationError
from ssmkit.inference import filter as run_filter
from ssmkit.inference import step as run_step
from ssmkit.kalman import ForwardAlgorithm, GaussianBelief, KalmanFilter, kalman_predict, kalman_update
from ssmkit.models import (
    LatentDynamics,
    LinearGaussianDynamics,
    LinearGaussianObservation,
    ObservationProcess,
    StateSpaceModel,
    sample_trajectory,
)
from ssmkit.particle import (
    BootstrapFilter,
    ParticleContainer,
    ParticleEnsemble,
    Resampler,
    ess,
    resample_multinomial,
    resample_systematic,
)


class FixedOffset:
    """Stands in for a generator whose next uniform draw is known."""

    def __init__(self, u):
        self.u = u

    def random(self, size=None):
        return self.u if size is None else np.full(size, self.u)


def test_ess_hand_values():
    assert ess(np.zeros(4)) == pytest.approx(4.0)
    assert ess(np.array([0.0, -np.inf, -np.inf])) == pytest.approx(1.0)
    assert ess(np.log([0.5, 0.25, 0.25])) == pytest.approx(1 / (0.25 + 0.0625 + 0.0625))


def test_ess_degenerate():
    with pytest.raises(DegenerateEnsembleError):
        ess(np.full(3, -np.inf))


@pytest.mark.parametrize("fn", [resample_multinomial, resample_systematic])
def test_one_hot_weights_pick_single_ancestor(fn, rng):
    lw = np.full(6, -np.inf)
    lw[3] = 0.0
    assert np.all(fn(lw, 6, rng) == 3)


@pytest.mark.parametrize("fn", [resample_multinomial, resample_systematic])
def test_resampling_degenerate_weights(fn, rng):
    with pytest.raises(DegenerateEnsembleError):
        fn(np.full(4, -np.inf), 4, rng)


def test_systematic_uniform_weights_take_each_index_once(rng):
    for _ in range(20):
        np.testing.assert_array_equal(resample_systematic(np.zeros(17), 17, rng), np.arange(17))


def test_systematic_counts_constant_over_offset_grid():
    lw = np.log([0.7, 0.3])
    for u in np.arange(0.0, 1.0, 1e-4):
        counts = np.bincount(resample_systematic(lw, 10, FixedOffset(u)), minlength=2)
        assert tuple(counts) == (7, 3), u


@settings(max_examples=60, deadline=None)
@given(w=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30).filter(lambda w: sum(w) > 1e-6),
       n_out=st.integers(1, 60), u=st.floats(0.0, 1.0, exclude_max=True))
def test_systematic_counts_are_floor_or_ceil(w, n_out, u):
    w = np.asarray(w)
    with np.errstate(divide="ignore"):
        lw = np.log(w)
    anc = resample_systematic(lw, n_out, FixedOffset(u))
    assert np.all(np.diff(anc) >= 0)
    counts = np.bincount(anc, minlength=len(w))
    expected = n_out * w / w.sum()
    # a tolerance absorbs rounding at exact integer boundaries
    assert np.all(counts >= np.floor(expected - 1e-9)) and np.all(counts <= np.ceil(expected + 1e-9))


@pytest.mark.parametrize("fn", [resample_multinomial, resample_systematic])
def test_resampling_is_unbiased(fn):
    rng = np.random.default_rng(99)
    w = np.array([0.05, 0.5, 0.2, 0.15, 0.1])
    n, reps = 8, 100_000
    counts = np.empty((reps, len(w)))
    lw = np.log(w)
    for r in range(reps):
        counts[r] = np.bincount(fn(lw, n, rng), minlength=len(w))
    se = counts.std(0, ddof=1) / math.sqrt(reps)
    assert np.all(np.abs(counts.mean(0) - n * w) < 3 * se + 1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.floats(-500, 500))
def test_weight_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    lw = rng.standard_normal(20)
    assert ess(lw + shift) == pytest.approx(ess(lw), rel=1e-9)
    for fn in (resample_multinomial, resample_systematic):
        a = fn(lw, 20, np.random.default_rng(seed))
        b = fn(lw + shift, 20, np.random.default_rng(seed))
        np.testing.assert_array_equal(a, b)
    m = scalar_lg()
    alg = BootstrapFilter(20)
    y = np.array([0.3])
    c1 = _container(rng.standard_normal((20, 1)), lw)
    c2 = _container(c1.filtered.particles.copy(), lw + shift)
    _, l1 = alg.update(m, 1, _as_proposed(c1), y)
    _, l2 = alg.update(m, 1, _as_proposed(c2), y)
    assert l1 == pytest.approx(l2, abs=1e-9)


def _container(particles, lw):
    ens = ParticleEnsemble(particles, np.asarray(lw, dtype=float))
    return ParticleContainer(ens, ens, np.arange(len(lw)))


def _as_proposed(c):
    c.proposed = ParticleEnsemble(c.filtered.particles, c.filtered.log_weights.copy())
    return c


def test_resampler_validation():
    with pytest.raises(ValueError):
        Resampler("stratified")
    with pytest.raises(ValueError):
        Resampler(threshold=0.0)
    assert Resampler(threshold=1.0).should_resample(np.zeros(5))
    assert not Resampler(threshold=0.5).should_resample(np.zeros(5))


def test_deterministic_dynamics_without_resampling(rng):
    m = StateSpaceModel(
        LinearGaussianDynamics(A=[[2.0]], Q=[[0.0]], mu0=[0.0], Sigma0=[[1.0]], b=[1.0]),
        LinearGaussianObservation([[1.0]], [[1.0]]),
    )
    alg = BootstrapFilter(50, Resampler("systematic", 0.5))
    c = alg.initialise(rng, m)
    x0 = c.filtered.particles.copy()
    c = alg.predict(rng, m, 1, c)
    assert not c.resampled
    np.testing.assert_array_equal(c.ancestors, np.arange(50))
    np.testing.assert_allclose(c.proposed.particles, 2 * x0 + 1)


def test_one_hot_weights_resample_to_single_ancestor(rng):
    m = scalar_lg()
    alg = BootstrapFilter(30)
    c = alg.initialise(rng, m)
    lw = np.full(30, -np.inf)
    lw[7] = 0.0
    c.filtered = ParticleEnsemble(c.filtered.particles, lw)
    c = alg.predict(rng, m, 1, c)
    assert c.resampled and np.all(c.ancestors == 7)
    np.testing.assert_allclose(c.proposed.log_weights, -math.log(30))


def test_predicted_cloud_matches_kalman_predict():
    rng = np.random.default_rng(4)
    m = scalar_lg(a=0.7, q=0.6, m0=1.0, s0=2.0)
    n = 100_000
    alg = BootstrapFilter(n)
    c = alg.predict(rng, m, 1, alg.initialise(rng, m))
    ref = kalman_predict(GaussianBelief(np.array([1.0]), np.array([[2.0]])), 1, m.dynamics)
    se = math.sqrt(ref.covariance[0, 0] / n)
    assert abs(c.proposed.particles.mean() - ref.mean[0]) < 3 * se


class _ConstantObservation(ObservationProcess):
    dim = 1

    def __init__(self, logc):
        self.logc = logc

    def sample_observation(self, rng, step, states, context=None):
        return np.zeros(np.shape(states)[:-1] + (1,))

    def logdensity_observation(self, step, states, observation, context=None):
        return np.full(np.shape(states)[:-1], self.logc)


def test_constant_likelihood_gives_log_c_and_keeps_ranking(rng):
    m = StateSpaceModel(scalar_lg().dynamics, _ConstantObservation(math.log(0.3)))
    alg = BootstrapFilter(10)
    lw = rng.standard_normal(10)
    c = _as_proposed(_container(rng.standard_normal((10, 1)), lw))
    c, ll = alg.update(m, 1, c, np.zeros(1))
    assert ll == pytest.approx(math.log(0.3), abs=1e-12)
    np.testing.assert_array_equal(np.argsort(c.filtered.log_weights), np.argsort(lw))


class _HalfImpossible(ObservationProcess):
    dim = 1

    def sample_observation(self, rng, step, states, context=None):
        raise NotImplementedError

    def logdensity_observation(self, step, states, observation, context=None):
        return np.where(np.asarray(states)[..., 0] > 0, 0.0, -np.inf)


def test_two_particles_one_impossible():
    m = StateSpaceModel(scalar_lg().dynamics, _HalfImpossible())
    c = _as_proposed(_container(np.array([[1.0], [-1.0]]), np.full(2, -math.log(2))))
    c, ll = BootstrapFilter(2).update(m, 1, c, np.zeros(1))
    assert ll == pytest.approx(math.log(0.5), abs=1e-15)
    np.testing.assert_allclose(c.filtered.weights, [1.0, 0.0])


def test_all_impossible_names_the_step():
    m = StateSpaceModel(scalar_lg().dynamics, _HalfImpossible())
    c = _as_proposed(_container(np.array([[-1.0], [-2.0]]), np.zeros(2)))
    with pytest.raises(DegenerateEnsembleError, match="step 6"):
        BootstrapFilter(2).update(m, 6, c, np.zeros(1))


class _Broken(LatentDynamics):
    dim = 1

    def sample_initial(self, rng, n=None, context=None):
        return np.zeros((n, 1))

    def logdensity_initial(self, state, context=None):
        return 0.0

    def sample_transition(self, rng, step, states, context=None):
        raise RuntimeError("boom")

    def logdensity_transition(self, step, prev, new, context=None):
        return 0.0


def test_model_failure_carries_step(rng):
    m = StateSpaceModel(_Broken(), LinearGaussianObservation([[1.0]], [[1.0]]))
    with pytest.raises(ModelEvaluationError, match="step 1") as ei:
        run_filter(rng, m, BootstrapFilter(4), [np.zeros(1)])
    assert isinstance(ei.value.__cause__, RuntimeError)


def test_single_particle_evidence_is_path_observation_density():
    m = scalar_lg()
    _, ys = sample_trajectory(m, 10, np.random.default_rng(0))
    path = []
    c, total = run_filter(np.random.default_rng(3), m, BootstrapFilter(1), ys,
                          callback=lambda t, s, ll: path.append(s.filtered.particles[0].copy()))
    ref = sum(float(m.observation.logdensity_observation(t, path[t - 1], ys[t - 1])) for t in range(1, 11))
    assert total == pytest.approx(ref, abs=1e-12)


def test_kalman_step_is_predict_then_update():
    m = scalar_lg()
    kf = KalmanFilter()
    b0 = kf.initialise(None, m)
    y = np.array([0.7])
    b1, l1 = run_step(None, m, kf, 1, b0, y)
    b2, l2 = kalman_update(kalman_predict(b0, 1, m.dynamics), 1, m.observation, y)
    np.testing.assert_array_equal(b1.mean, b2.mean)
    assert l1 == l2


def test_step_fold_equals_filter_and_is_deterministic():
    m = scalar_lg()
    _, ys = sample_trajectory(m, 25, np.random.default_rng(1))
    alg = BootstrapFilter(256)
    incs = []
    _, total = run_filter(np.random.default_rng(5), m, alg, ys, callback=lambda t, s, ll: incs.append(ll))
    rng = np.random.default_rng(5)
    state = alg.initialise(rng, m)
    manual = []
    for t, y in enumerate(ys, 1):
        state, ll = run_step(rng, m, alg, t, state, y)
        manual.append(ll)
    assert incs == manual
    assert total == pytest.approx(sum(manual), abs=1e-12)
    _, again = run_filter(np.random.default_rng(5), m, alg, ys)
    assert again == total


def test_filter_requires_observations():
    with pytest.raises(ValueError):
        run_filter(None, scalar_lg(), KalmanFilter(), [])


def test_partitioned_run_is_bitwise_identical_across_worker_counts():
    m = scalar_lg()
    _, ys = sample_trajectory(m, 30, np.random.default_rng(2))
    out = {w: run_filter(np.random.default_rng(8), m, BootstrapFilter(1000, partitions=4, workers=w), ys)
           for w in (1, 2, 4)}
    ref_state, ref_ll = out[1]
    for state, ll in out.values():
        assert ll == ref_ll
        np.testing.assert_array_equal(state.filtered.particles, ref_state.filtered.particles)


def test_particle_buffers_are_reused(rng):
    m = scalar_lg()
    alg = BootstrapFilter(64)
    c = alg.initialise(rng, m)
    a, b = c.buffers
    seen = set()
    for t in range(1, 5):
        c, _ = run_step(rng, m, alg, t, c, np.zeros(1))
        assert c.filtered.particles is a or c.filtered.particles is b
        seen.add(id(c.filtered.particles))
    assert len(seen) == 2


def test_generic_driver_runs_all_four_engines():
    from ssmkit.benchmark import build_block_model
    from ssmkit.rbpf import RBPF
    from test_kalman import random_hmm

    rng = np.random.default_rng(0)
    bm = build_block_model(rng)
    _, ys = sample_trajectory(bm.full(), 5, rng)
    hmm = random_hmm(rng)
    _, hys = sample_trajectory(hmm, 5, rng)
    runs = [
        (bm.full(), KalmanFilter(), ys),
        (hmm, ForwardAlgorithm(), hys),
        (bm.full(), BootstrapFilter(64), ys),
        (bm.hierarchical(), RBPF(KalmanFilter(), 64), ys),
    ]
    for model, alg, data in runs:
        _, ll = run_filter(np.random.default_rng(1), model, alg, data)
        assert np.isfinite(ll)


@pytest.mark.slow
def test_evidence_variance_shrinks_with_particles():
    m = scalar_lg()
    _, ys = sample_trajectory(m, 50, np.random.default_rng(6))
    var = []
    for n in (2**7, 2**9, 2**11):
        est = [run_filter(np.random.default_rng(s), m, BootstrapFilter(n), ys)[1] for s in range(100)]
        var.append(np.var(est, ddof=1))
    assert var[0] > var[1] > var[2]
