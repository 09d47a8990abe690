import csv
import math

import numpy as np
import pytest

from ssmkit.assimilation import (
    AssimilationNoise,
    Lorenz63Params,
    lorenz_deriv,
    lorenz_flow,
    lorenz_ssm,
    rk4_step,
    run_assimilation,
    write_paths_csv,
    write_states_csv,
)
from ssmkit.models import joint_logdensity, sample_trajectory

P = Lorenz63Params()


def fixed_points(p=P):
    c = math.sqrt(p.beta * (p.rho - 1))
    return [np.zeros(3), np.array([c, c, p.rho - 1]), np.array([-c, -c, p.rho - 1])]


def test_derivative_vanishes_at_fixed_points():
    for fp in fixed_points():
        np.testing.assert_allclose(lorenz_deriv(fp, P), 0.0, atol=1e-12)
        np.testing.assert_allclose(lorenz_flow(fp, P), fp, atol=1e-12)


def test_derivative_hand_value():
    np.testing.assert_allclose(lorenz_deriv(np.array([1.0, 0.0, 0.0]), P), [-10.0, 28.0, 0.0])


def test_rk4_on_trivial_and_linear_fields():
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(rk4_step(lambda s: np.zeros_like(s), x, 0.3), x)
    # one step of x' = x reproduces the quartic Taylor polynomial of e^0.1
    assert rk4_step(lambda s: s, np.array([1.0]), 0.1)[0] == pytest.approx(1.1051708333333333, abs=1e-15)


def _integrate(x, h, t_end):
    for _ in range(int(round(t_end / h))):
        x = rk4_step(lambda s: lorenz_deriv(s, P), x, h)
    return x


def test_rk4_is_fourth_order():
    x0 = np.array([1.0, 1.0, 1.0])
    hs = [0.01, 0.005, 0.0025]
    sols = [_integrate(x0, h, 0.5) for h in hs]
    ratio = np.linalg.norm(sols[0] - sols[1]) / np.linalg.norm(sols[1] - sols[2])
    assert 3.7 <= math.log2(ratio) <= 4.3


def test_batched_kernel_matches_reference_step():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 3)) * 10
    ref = rk4_step(lambda s: lorenz_deriv(s, P), x, P.dt)
    np.testing.assert_allclose(lorenz_flow(x, P), ref, rtol=1e-13, atol=1e-12)
    np.testing.assert_allclose(lorenz_flow(x[0], P), ref[0], rtol=1e-13, atol=1e-12)


def test_orbit_stays_bounded():
    x = np.array([[1.0, 1.0, 1.0]])
    worst = 0.0
    for _ in range(10_000):
        x = lorenz_flow(x, P)
        worst = max(worst, float(np.linalg.norm(x)))
    assert worst < 100.0


def test_model_dimensions_and_densities():
    m = lorenz_ssm()
    assert m.dynamics.dim == 3 and m.observation.dim == 1
    xs, ys = sample_trajectory(m, 40, np.random.default_rng(1))
    assert xs.shape == (41, 3) and ys.shape == (40, 1)
    assert np.isfinite(joint_logdensity(m, xs, ys))


def test_noiseless_model_follows_the_flow():
    m = lorenz_ssm(noise=AssimilationNoise(0.0, 0.0), x0_std=0.0)
    xs, ys = sample_trajectory(m, 60, np.random.default_rng(2))
    x = np.array([1.0, 1.0, 1.0])
    for t in range(61):
        np.testing.assert_allclose(xs[t], x, atol=1e-10)
        x = lorenz_flow(x, P)
    np.testing.assert_array_equal(ys[:, 0], xs[1:, 0])


def test_parameter_validation():
    with pytest.raises(ValueError):
        Lorenz63Params(dt=0.0)
    with pytest.raises(ValueError):
        AssimilationNoise(-0.1, 0.5)


def test_assimilation_tracks_observed_component(tmp_path):
    res = run_assimilation(np.random.default_rng(3), n_steps=60, N=512)
    assert res.filtered_means.shape == (60, 3) and res.paths.shape == (512, 61, 3)
    assert res.rmse[0] < 0.5
    assert np.isfinite(res.log_evidence)
    p = tmp_path / "s.csv"
    write_states_csv(p, res.reference)
    assert len(list(csv.reader(open(p)))) == 62
    q = tmp_path / "p.csv"
    write_paths_csv(q, res.paths[:2])
    rows = list(csv.reader(open(q)))
    assert rows[0] == ["particle", "t", "x", "y", "z"] and len(rows) == 1 + 2 * 61


def test_assimilation_is_deterministic():
    a = run_assimilation(np.random.default_rng(4), n_steps=20, N=128)
    b = run_assimilation(np.random.default_rng(4), n_steps=20, N=128)
    np.testing.assert_array_equal(a.filtered_means, b.filtered_means)
