"""Time the compiled distance-covariance kernel against the numpy fallback.

    python3 benchmarks/bench_dcor.py [--sizes 250 500 1000 2000] [--repeat 3]
"""
import argparse
import timeit

import numpy as np

from taipan import dcor


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", type=int, nargs="+", default=[250, 500, 1000, 2000])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if dcor.BACKEND != "cython":
        print("compiled kernel unavailable; only the numpy fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'n':>6} {'numpy [ms]':>12} {'cython [ms]':>12} {'speedup':>8} {'max |diff|':>11}")
    for n in args.sizes:
        x, y = rng.standard_normal((n, 16)), rng.standard_normal((n, 3))
        t_np = min(timeit.repeat(lambda: dcor.distance_correlation(x, y, backend="numpy"), number=1, repeat=args.repeat))
        if dcor.BACKEND == "cython":
            t_cy = min(timeit.repeat(lambda: dcor.distance_correlation(x, y, backend="cython"), number=1, repeat=args.repeat))
            diff = abs(dcor.distance_correlation(x, y, backend="numpy") - dcor.distance_correlation(x, y, backend="cython"))
            print(f"{n:>6} {1e3 * t_np:>12.2f} {1e3 * t_cy:>12.2f} {t_np / t_cy:>8.2f} {diff:>11.2e}")
        else:
            print(f"{n:>6} {1e3 * t_np:>12.2f} {'-':>12} {'-':>8} {'-':>11}")


if __name__ == "__main__":
    main()
