"""Time every hot kernel on its numba path and its numpy path.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both paths are called directly, so the environment flag is not needed here.
The numba timings exclude compilation (one untimed warm-up call).
"""
import argparse
import time

import numpy as np

from ssmkit import kernels


def _time(fn, repeat):
    fn()
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return 1e3 * np.median(ts)


def _genealogy_case(nb, n=4096, gens=50, d=3):
    rng = np.random.default_rng(0)
    anc = [np.sort(rng.integers(0, n, n)) for _ in range(gens)]
    parts = rng.standard_normal((n, d))
    rec = kernels._record_nb if nb else kernels._record_np

    def run():
        cap = 8 * n
        parent = np.full(cap, -2, dtype=np.int64)
        nchild = np.zeros(cap, dtype=np.int64)
        states = np.zeros((cap, d))
        free = np.arange(cap - 1, -1, -1, dtype=np.int64)
        leaves, n_free = rec(parent, nchild, states, free, cap, np.zeros(0, dtype=np.int64),
                             np.zeros(n, dtype=np.int64), parts, True)
        for a in anc:
            leaves, n_free = rec(parent, nchild, states, free, n_free, leaves, a, parts, False)

    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(1)

    n = 2**16
    cumw = np.cumsum(rng.random(n))
    cumw /= cumw[-1]
    pos_sorted = (rng.random() + np.arange(n)) / n
    pos_random = rng.random(n)
    states = rng.standard_normal((n, 3)) * 10
    cost = rng.random((60, 80))

    cases = [
        ("inverse_cdf sorted N=2^16",
         lambda: kernels._search_sorted_nb(cumw, pos_sorted), lambda: kernels._search_np(cumw, pos_sorted)),
        ("inverse_cdf unsorted N=2^16",
         lambda: kernels._search_unsorted_nb(cumw, pos_random), lambda: kernels._search_np(cumw, pos_random)),
        ("lorenz_rk4 N=2^16",
         lambda: kernels._lorenz_rk4_nb(states, 0.025, 10.0, 28.0, 8 / 3),
         lambda: kernels._lorenz_rk4_np(states, 0.025, 10.0, 28.0, 8 / 3)),
        ("linear_assignment 60x80",
         lambda: kernels._hungarian_nb(cost), lambda: kernels._hungarian_py(cost)),
        ("record_generation N=4096 x 50", _genealogy_case(True), _genealogy_case(False)),
    ]
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speed-up':>9s}")
    for name, nb, np_ in cases:
        a = _time(nb, args.repeat)
        b = _time(np_, max(1, args.repeat // 4) if "assignment" in name else args.repeat)
        print(f"{name:32s} {a:10.3f} {b:10.3f} {b / a:9.1f}")


if __name__ == "__main__":
    main()
