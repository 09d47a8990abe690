import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmkit.benchmark import build_block_model
from ssmkit.errors import SingularInnovationError
from ssmkit.kalman import KalmanFilter
from ssmkit.models import sample_trajectory
from ssmkit.particle import BootstrapFilter
from ssmkit.pmmh import (
    ParameterSpace,
    batch_means_se,
    inverse_gamma_logpdf,
    noise_variance_model,
    observation_variance_family,
    pmmh,
)
from ssmkit.rbpf import RBPF


@pytest.fixture(scope="module")
def data():
    _, ys = sample_trajectory(noise_variance_model([1.0, 0.5]), 40, np.random.default_rng(0))
    return ys


def _run(data, seed=0, n=200, scales=0.3, **kw):
    return pmmh(np.random.default_rng(seed), noise_variance_model, inverse_gamma_logpdf, scales,
                KalmanFilter(), data, n, [1.0, 1.0], **kw)


def test_zero_step_accepts_everything(data):
    chain = _run(data, scales=0.0, n=50)
    assert chain.acceptance_rate == 1.0
    assert np.all(chain.thetas == 1.0)


def test_constant_offset_in_evidence_does_not_change_decisions(data):
    from ssmkit.inference import filter as run_filter

    def shifted(seed, th):
        return run_filter(None, noise_variance_model(th), KalmanFilter(), data)[1] + 123.0

    a = _run(data)
    b = _run(data, log_evidence=shifted)
    np.testing.assert_array_equal(a.accepted, b.accepted)
    np.testing.assert_array_equal(a.thetas, b.thetas)
    np.testing.assert_allclose(b.log_evidence - a.log_evidence, 123.0)


def test_current_evidence_is_reused_not_recomputed(data):
    calls = []

    def counting(seed, th):
        calls.append(th.copy())
        return -0.5 * float(np.sum(np.log(th) ** 2))

    chain = _run(data, n=100, log_evidence=counting)
    # one evaluation for the start point and one per proposal
    assert len(calls) == 101
    assert 0 < chain.acceptance_rate < 1


def test_filter_failures_are_recorded_as_rejections(data):
    def fragile(seed, th):
        if th[1] > 1.2:
            raise SingularInnovationError(1)
        return 0.0

    chain = _run(data, n=300, scales=0.5, log_evidence=fragile)
    assert chain.failures
    for i in chain.failures:
        assert not chain.accepted[i]
    assert np.all(chain.thetas[:, 1] <= 1.2)


def test_chain_is_deterministic(data):
    a, b = _run(data, seed=4), _run(data, seed=4)
    np.testing.assert_array_equal(a.thetas, b.thetas)
    assert _run(data, seed=5).thetas.tolist() != a.thetas.tolist()


def test_bad_start_rejected(data):
    with pytest.raises(ValueError):
        pmmh(np.random.default_rng(0), noise_variance_model, inverse_gamma_logpdf, 0.1, KalmanFilter(), data,
             5, [-1.0, 1.0])


def test_engines_are_interchangeable():
    bm = build_block_model(np.random.default_rng(0))
    family = observation_variance_family(bm)
    _, ys = sample_trajectory(bm.full(), 10, np.random.default_rng(1))
    for engine in (KalmanFilter(), BootstrapFilter(64), RBPF(KalmanFilter(), 32)):
        chain = pmmh(np.random.default_rng(2), family, inverse_gamma_logpdf, 0.2, engine, ys, 20, [1.0])
        assert chain.thetas.shape == (21, 1)
        assert np.all(np.isfinite(chain.log_evidence))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=4), st.data())
def test_parameter_space_round_trip(theta, data):
    supports = tuple(data.draw(st.sampled_from(["positive", "real"])) for _ in theta)
    space = ParameterSpace(tuple(f"p{i}" for i in range(len(theta))), supports)
    back = space.from_unconstrained(space.to_unconstrained(theta))
    np.testing.assert_allclose(back, theta, rtol=1e-12)
    expect = sum(math.log(t) for t, s in zip(theta, supports) if s == "positive")
    assert space.log_jacobian(theta) == pytest.approx(expect)


def test_parameter_space_validation():
    with pytest.raises(ValueError):
        ParameterSpace(("a",), ("bounded",))
    assert not ParameterSpace(("a",), ("positive",)).contains([0.0])


def test_batch_means_on_iid_series():
    x = np.random.default_rng(0).standard_normal(100_000)
    assert batch_means_se(x) == pytest.approx(1 / math.sqrt(100_000), rel=0.3)


def test_chain_csv(tmp_path, data):
    chain = _run(data, n=3)
    p = tmp_path / "chain.csv"
    chain.to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["iteration", "theta0", "theta1", "log_prior", "log_evidence", "accepted"]
    assert len(rows) == 5 and rows[1][-1] == "1"
