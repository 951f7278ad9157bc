"""Compare the compiled QQF kernels with their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--dim 3] [--orders 2..5] [--repetitions 7]

For each order and kernel (the triple-product contraction and the face-block
expansion) the script checks that both versions agree and prints the median
time per call and the speedup of the compiled version.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time

import numpy as np

from ridg import kernels
from ridg.predictor.tables import load_or_build


def _orders(text: str) -> list[int]:
    if ".." in text:
        lo, hi = (int(v) for v in text.split(".."))
        return list(range(lo, hi + 1))
    return [int(v) for v in text.split(",")]


def _median_time(fn, reps: int) -> float:
    fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dim", type=int, default=3, help="space dimension (the kernel works in dim + 1)")
    p.add_argument("--orders", type=_orders, default=[2, 3, 4, 5], help="Mdeg+1 values")
    p.add_argument("--repetitions", type=int, default=7)
    p.add_argument("--batch", type=int, default=4, help="coefficient sets per call")
    args = p.parse_args(argv)
    if not kernels.compiled_available():
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':>9} {'order':>5} {'numpy (us)':>12} {'cython (us)':>12} {'speedup':>8} {'max diff':>10}")
    for m in args.orders:
        tab = load_or_build(m - 1, args.dim)
        D = args.dim + 1
        factors = [tab.axis_factor(b, 0) for b in range(D)]
        coeffs = rng.standard_normal((args.batch, m**D))
        # face blocks for an interface normal to the middle axis
        pk, qk = m ** (D // 2), m ** (D - 1 - D // 2)
        H = rng.standard_normal((args.batch, (pk * qk) ** 2))
        ek, el = rng.standard_normal((args.batch, m)), rng.standard_normal((args.batch, m))
        cases = [
            ("contract", lambda: kernels.contract_numpy(coeffs, factors, m),
             lambda: kernels.contract_compiled(coeffs, factors, m)),
            ("expand", lambda: kernels.expand_face_blocks_numpy(H, ek, el, pk, qk),
             lambda: kernels.expand_face_blocks_compiled(H, ek, el, pk, qk)),
        ]
        for name, f_np, f_c in cases:
            diff = float(np.max(np.abs(f_np() - f_c())))
            t_np = _median_time(f_np, args.repetitions)
            t_c = _median_time(f_c, args.repetitions)
            print(f"{name:>9} {m:>5} {t_np * 1e6:>12.1f} {t_c * 1e6:>12.1f} {t_np / t_c:>7.2f}x {diff:>10.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
