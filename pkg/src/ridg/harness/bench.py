"""Timing of single-element Jacobian assembly across backends."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..law import LinearAdvection
from ..predictor import RegionOperator

__all__ = ["AssemblyTiming", "BenchResult", "bench_assembly", "fit_exponent", "jacobian_fingerprint"]


@dataclass
class AssemblyTiming:
    order: int          # Mdeg + 1
    backend: str
    median_s: float
    samples: int


@dataclass
class BenchResult:
    dim: int
    timings: list
    exponents: dict     # backend -> fitted slope of log(time) vs log(Mdeg + 1)

    def median(self, backend: str, order: int) -> float:
        for t in self.timings:
            if t.backend == backend and t.order == order:
                return t.median_s
        raise KeyError((backend, order))

    def ratios(self) -> dict:
        orders = sorted({t.order for t in self.timings})
        return {m: self.median("quadrature", m) / self.median("qqf", m) for m in orders}


def fit_exponent(orders: Sequence[int], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(order)."""
    x, y = np.log(np.asarray(orders, float)), np.log(np.asarray(times, float))
    if len(x) < 2:
        raise ValueError("at least two orders are needed for a fit")
    return float(np.polyfit(x, y, 1)[0])


def _state(op: RegionOperator, rng):
    dW = 0.1 * rng.standard_normal((op.nreg, op.theta_t))
    dQ = 0.1 * rng.standard_normal((op.nreg, op.theta))
    return dW, dQ, 1.0


def jacobian_fingerprint(J: np.ndarray, digits: int = 8) -> str:
    """Hash of the Jacobian rounded to ``digits`` significant digits relative to its scale."""
    scale = float(np.max(np.abs(J))) or 1.0
    r = np.round(J / scale, digits) + 0.0  # drop negative zeros
    return hashlib.sha256(np.ascontiguousarray(r).tobytes()).hexdigest()


def bench_assembly(dim: int = 3, orders: Sequence[int] = (2, 3, 4, 5), repetitions: int = 5,
                   backends: Sequence[str] = ("quadrature", "qqf"), seed: int = 0) -> BenchResult:
    """Median time to assemble the central element's block row of a region Jacobian.

    ``orders`` are values of Mdeg + 1.  The block row holds every derivative
    an element's own equations need, which is the unit of work each element
    contributes; the ``perturbation`` backend can only build the whole region
    Jacobian, so its time is divided by the number of region cells.
    """
    if repetitions < 5:
        raise ValueError("repetitions must be >= 5")
    if any(m < 2 for m in orders):
        raise ValueError("orders (Mdeg + 1) must be >= 2")
    rng = np.random.default_rng(seed)
    law = LinearAdvection((1.0,) * dim)
    timings = []
    for m in orders:
        op = RegionOperator(law, m - 1, 0.05, (0.1,) * dim)
        dW, dQ, c = _state(op, rng)
        lam = op.face_lambdas(dW, c)
        for backend in backends:
            if backend == "perturbation":
                run = lambda: op.jacobian(dW, dQ, c, lam, backend="perturbation")
                div = op.nreg
            else:
                run = lambda b=backend: op.block_row(dW, c, lam, op.center, backend=b)
                div = 1
            run()  # warm caches (tables, plans)
            samples = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                run()
                samples.append((time.perf_counter() - t0) / div)
            timings.append(AssemblyTiming(m, backend, float(np.median(samples)), repetitions))
    exps = {}
    for backend in backends:
        ts = [t for t in timings if t.backend == backend]
        if len(ts) >= 2:
            exps[backend] = fit_exponent([t.order for t in ts], [t.median_s for t in ts])
    return BenchResult(dim, timings, exps)
