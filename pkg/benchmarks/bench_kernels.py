"""Time the numba and numpy paths of each hot kernel on collector-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import os
import time

import numpy as np

from pageopt import kernels
from pageopt._accel import DISABLE_ENV, numba_enabled


def cases(rng):
    order = np.stack([rng.permutation(40) for _ in range(20_000)])
    fam = np.repeat(np.arange(8), 5)
    scores = rng.random((20_000, 40))
    n = 200_000
    user = np.sort(rng.integers(0, 2000, size=n))
    ts = np.zeros(n)
    for u in np.unique(user):
        m = user == u
        ts[m] = np.sort(rng.uniform(0, 86_400, size=m.sum()))
    is_buy = rng.random(n) < 0.2
    return {
        "swap_rows (20k x 40)": lambda: kernels.swap_rows(order, fam, 6),
        "demote_rows (20k x 40)": lambda: kernels.demote_rows(scores, fam, 0.5, 6),
        "attribution_sweep (200k events)": lambda: kernels.attribution_sweep(user, ts, ~is_buy, is_buy,
                                                                             1800.0, 0.5, 1.0),
    }


def best_of(fn, repeat):
    fn()  # warm-up, includes numba compilation
    out = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return min(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    fns = cases(np.random.default_rng(0))
    print(f"{'kernel':<34}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, fn in fns.items():
        os.environ[DISABLE_ENV] = "0"
        fast = best_of(fn, args.repeat) if numba_enabled() else float("nan")
        os.environ[DISABLE_ENV] = "1"
        slow = best_of(fn, args.repeat)
        print(f"{name:<34}{1e3 * fast:>12.2f}{1e3 * slow:>12.2f}{slow / fast:>10.1f}")


if __name__ == "__main__":
    main()
