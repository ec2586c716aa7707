"""Benchmark the greedy selection kernel: compiled extension vs numpy fallback.

Runs both backends on identical weighted factor matrices across a grid of
pool sizes and prints a timing table with the speedup.  Usage::

    python3 benchmarks/bench_dpp.py [--repeats 5] [--seed 0]
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from ctxforge import _greedy_py

try:
    from ctxforge import _greedy as _compiled
except ImportError:
    _compiled = None

GRID = [
    (50, 16, 4),
    (200, 16, 8),
    (1000, 32, 8),
    (5000, 32, 16),
    (20000, 64, 16),
]


def make_factor(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    phi = rng.standard_normal((n, d))
    phi /= np.linalg.norm(phi, axis=1, keepdims=True)
    quality = np.exp(8.0 * rng.uniform(-0.05, 0.05, size=n))
    return quality[:, None] * phi


def best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5, help="timed repeats, best kept")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    if _compiled is None:
        print("compiled extension not importable; timing the numpy fallback only", file=sys.stderr)

    header = f"{'N':>7} {'d':>4} {'k':>4} {'python(ms)':>12} {'cython(ms)':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for n, d, k in GRID:
        b = make_factor(rng, n, d)
        sel_py, gains_py = _greedy_py.greedy_select(b, k)
        t_py = best_of(lambda: _greedy_py.greedy_select(b, k), args.repeats)
        if _compiled is not None:
            sel_c, gains_c = _compiled.greedy_select(b, k)
            if sel_c != sel_py or not np.allclose(gains_c, gains_py, rtol=1e-12):
                print(f"MISMATCH at N={n} d={d} k={k}", file=sys.stderr)
                return 1
            t_c = best_of(lambda: _compiled.greedy_select(b, k), args.repeats)
            print(f"{n:>7} {d:>4} {k:>4} {t_py * 1e3:>12.3f} {t_c * 1e3:>12.3f} {t_py / t_c:>8.2f}")
        else:
            print(f"{n:>7} {d:>4} {k:>4} {t_py * 1e3:>12.3f} {'-':>12} {'-':>8}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
