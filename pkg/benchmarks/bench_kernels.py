"""Compare the numba and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20]

The assignment solver is also timed against scipy's linear_sum_assignment
for reference. Each row reports the median wall time per call.
"""

import argparse
import time

import numpy as np
from scipy.optimize import linear_sum_assignment

from remax.kernels import numba_backend, numpy_backend


def median_ms(fn, *args, repeat=20):
    fn(*args)  # warm-up (includes JIT compilation for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    cases = []
    for n in (8, 32, 128):
        cost = rng.random((n, n))
        cases.append((f"assignment n={n}", "solve_square_assignment", (cost,),
                      lambda c=cost: linear_sum_assignment(c)))
    for hw in (1024, 65536):
        a = rng.integers(0, 20, hw)
        b = rng.integers(0, 30, hw)
        cases.append((f"pair_counts hw={hw}", "pair_counts", (a, b, 20, 30), None))
    for hw in (1024, 16384):
        scores = np.ascontiguousarray(rng.random((hw, 16)))
        keep = rng.random(16) < 0.6
        cases.append((f"masked_argmax hw={hw}", "masked_argmax", (scores, keep), None))

    print(f"{'case':<26}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'scipy ms':>12}")
    for label, name, fargs, ref in cases:
        t_np = median_ms(getattr(numpy_backend, name), *fargs, repeat=args.repeat)
        t_nb = median_ms(getattr(numba_backend, name), *fargs, repeat=args.repeat)
        t_ref = f"{median_ms(ref, repeat=args.repeat):12.4f}" if ref else f"{'-':>12}"
        print(f"{label:<26}{t_np:12.4f}{t_nb:12.4f}{t_np / t_nb:10.1f}{t_ref}")


if __name__ == "__main__":
    main()
