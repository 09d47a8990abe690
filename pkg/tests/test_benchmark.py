import numpy as np
import pytest

from ssmkit.benchmark import (
    BenchConfig,
    bench_rbpf,
    build_block_model,
    dense_log_evidence,
    simulate,
    time_steps,
)
from ssmkit.inference import filter as run_filter
from ssmkit.kalman import KalmanFilter
from ssmkit.particle import Resampler
from ssmkit.rbpf import RBPF


def test_block_structure():
    bm = build_block_model(np.random.default_rng(0))
    assert bm.dims == (2, 3, 2)
    assert np.all(bm.A[:2, 2:] == 0.0)
    assert np.all(bm.H[:, :2] == 0.0)
    assert np.all(bm.Q[:2, 2:] == 0.0) and np.all(bm.Q[2:, :2] == 0.0)
    assert np.max(np.abs(np.linalg.eigvals(bm.A))) < 1.0
    with pytest.raises(ValueError):
        build_block_model(np.random.default_rng(0), 0, 3, 2)


@pytest.mark.parametrize("dims", [(2, 3, 2), (1, 1, 1), (3, 2, 4)])
def test_dense_oracle_matches_kalman(dims):
    bm = build_block_model(np.random.default_rng(1), *dims)
    _, ys = simulate(bm, 12, np.random.default_rng(2))
    kf = run_filter(None, bm.full(), KalmanFilter(), ys)[1]
    assert kf == pytest.approx(dense_log_evidence(bm, ys), abs=1e-9)


def test_step_time_grows_with_particles():
    bm = build_block_model(np.random.default_rng(0))
    _, ys = simulate(bm, 8, np.random.default_rng(1))
    model = bm.hierarchical()
    small = time_steps(model, RBPF(KalmanFilter(), 2**8), ys, 0, 5, 2)
    big = time_steps(model, RBPF(KalmanFilter(), 2**16), ys, 0, 5, 2)
    assert small.size == big.size == 10
    assert big.mean() > small.mean()


def test_bench_spread_shrinks_and_modes_agree():
    cfg = BenchConfig(n_grid=(2**7, 2**13), steps=2, repetitions=2, evidence_seeds=30, evidence_T=20,
                      partitions=4, workers=4)
    rows = bench_rbpf(cfg)
    assert [r["N"] for r in rows] == [2**7, 2**13]
    assert rows[1]["evidence_std"] < rows[0]["evidence_std"]
    assert all(r["modes_agree"] == 1 for r in rows)
    assert all(r["cpu_serial_mean_ms"] > 0 for r in rows)


def test_serial_and_parallel_estimates_identical():
    bm = build_block_model(np.random.default_rng(3))
    _, ys = simulate(bm, 10, np.random.default_rng(4))
    out = [run_filter(np.random.default_rng(5), bm.hierarchical(),
                      RBPF(KalmanFilter(), 300, Resampler(), partitions=8, workers=w), ys)[1] for w in (1, 8)]
    assert out[0] == out[1]
