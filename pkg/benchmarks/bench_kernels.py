"""Timing comparison of the compiled and pure-numpy numerical kernels.

Run:  python benchmarks/bench_kernels.py [--sizes 200,500,1000,2000] [--repeats 5]

The package picks one backend at import time; set SPATIAL_R2D2_DISABLE_NUMBA=1
to force the numpy fallback everywhere. Both implementations stay importable,
so a single run of this script times the two side by side and checks that they
agree to floating-point noise.
"""

import argparse
import time

import numpy as np

from spatial_r2d2 import _kernels


def best_of(fn, args, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="200,500,1000,2000", help="comma-separated n values")
    parser.add_argument("--repeats", type=int, default=5, help="timings per cell, best kept")
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    backends = [("numpy", _kernels._trace_pair_numpy, _kernels._corr_fill_numpy)]
    if _kernels.USE_NUMBA:
        backends.append(("numba", _kernels._trace_pair_numba, _kernels._corr_fill_numba))
    else:
        print("numba unavailable (flag set or package missing); timing numpy only")
    print(f"active package backend: {_kernels.BACKEND}")

    rng = np.random.default_rng(0)
    names = [name for name, _, _ in backends]
    header = f"{'kernel':<11} {'n':>6}" + "".join(f" {name + ' (ms)':>12}" for name in names)
    if len(backends) == 2:
        header += f" {'speedup':>8} {'max rel diff':>13}"
    print(header)

    for n in sizes:
        coords = rng.uniform(size=(n, 2))
        sigma = _kernels._corr_fill_numpy(coords, 0.3, _kernels._FAMILY_EXPONENTIAL, 0.5)
        cases = [
            ("corr_fill", 2, (coords, 0.3, _kernels._FAMILY_EXPONENTIAL, 0.5)),
            ("trace_pair", 1, (sigma,)),
        ]
        for label, slot, call_args in cases:
            results = []
            timings = []
            for _, trace_fn, fill_fn in backends:
                fn = fill_fn if slot == 2 else trace_fn
                results.append(np.asarray(fn(*call_args)))  # warm-up, jit compiles here
                timings.append(best_of(fn, call_args, args.repeats))
            row = f"{label:<11} {n:>6}" + "".join(f" {t * 1e3:>12.3f}" for t in timings)
            if len(backends) == 2:
                scale = np.abs(results[0]).max()
                diff = np.abs(results[0] - results[1]).max() / scale
                row += f" {timings[0] / timings[1]:>7.1f}x {diff:>13.2e}"
            print(row)


if __name__ == "__main__":
    main()
