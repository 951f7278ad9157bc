"""Error, convergence and efficiency metrics, and CSV records."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .basis import BasisSet, gauss_rule
from .mesh import CartesianMesh

__all__ = [
    "l2_relative_error",
    "convergence_order",
    "quality",
    "efom",
    "dof_count",
    "speedup_efficiency",
    "comms_estimate",
    "MetricsRecord",
    "CSV_COLUMNS",
    "write_csv",
    "records_to_csv",
]

CSV_COLUMNS = (
    "scheme", "Mdeg", "nu", "mesh", "dof", "efom", "error", "order", "runtime_s", "quality",
    "tasks", "cores", "dof_per_core", "speedup", "efficiency_pct", "comms",
)


def l2_relative_error(Q: np.ndarray, exact: Callable[[np.ndarray], np.ndarray], mdeg: int,
                      mesh: CartesianMesh) -> float:
    """Relative L2 error against the degree-(Mdeg+1) projection of the exact solution.

    Uses 2(Mdeg+2) Gauss points per axis for the reference projection.
    """
    d = mesh.dim
    hi = BasisSet(d, mdeg + 1)
    rule = gauss_rule(2 * (mdeg + 2), d)
    vals = exact(mesh.physical_points(rule.points))
    X = (vals * rule.weights) @ hi.values(rule.points) / 2.0**d
    mp = mdeg + 2
    Xt = X.reshape((-1,) + (mp,) * d)
    low = (slice(None),) + (slice(0, mdeg + 1),) * d
    mask = np.ones((mp,) * d, dtype=bool)
    mask[low[1:]] = False
    Xlow = Xt[low].reshape(Xt.shape[0], -1)
    Qf = np.asarray(Q, dtype=float).reshape(Xt.shape[0], -1)
    if Qf.shape != Xlow.shape:
        raise ValueError(f"coefficient shape {Qf.shape} does not match degree {mdeg}")
    denom = float(np.sum(X * X))
    if denom == 0.0:
        raise ValueError("exact solution has zero norm; relative error undefined")
    # truncation part summed directly to avoid cancellation
    num = float(np.sum((Xlow - Qf) ** 2)) + float(np.sum(Xt[:, mask] ** 2))
    return math.sqrt(num / denom)


def convergence_order(e1: float, h1: float, e2: float, h2: float) -> float:
    if min(e1, e2, h1, h2) <= 0:
        raise ValueError("errors and spacings must be positive")
    if h1 == h2:
        raise ValueError("spacings must differ")
    return math.log(e1 / e2) / math.log(h1 / h2)


def quality(error: float, runtime: float) -> float:
    if not (error > 0 and runtime > 0):
        raise ValueError("error and runtime must be positive")
    return -math.log10(error * runtime)


def efom(theta: int, total_elements: int, dim: int) -> int:
    """Per-axis size of the first-order mesh with the same number of unknowns."""
    if theta <= 0 or total_elements <= 0 or dim <= 0:
        raise ValueError("inputs must be positive")
    return int(round((theta * total_elements) ** (1.0 / dim)))


def dof_count(theta: int, total_elements: int) -> int:
    return int(theta * total_elements)


def speedup_efficiency(runtimes: Mapping[int, float]) -> dict[int, tuple[float, Optional[float]]]:
    """Speedup and efficiency (percent) per task count; efficiency is None for one task."""
    if 1 not in runtimes:
        raise ValueError("runtimes must include the single-task baseline")
    base = runtimes[1]
    out = {}
    for n, rt in sorted(runtimes.items()):
        if rt <= 0:
            raise ValueError("runtimes must be positive")
        sp = base / rt
        if n == 1:
            out[n] = (sp, None)
        else:
            out[n] = (sp, max(0.0, (sp - 1.0) / (n - 1.0) * 100.0))
    return out


def comms_estimate(tasks: int, timesteps: int, stages_per_step: int, comms_per_stage: int) -> int:
    for name, v in (("tasks", tasks), ("timesteps", timesteps), ("stages_per_step", stages_per_step),
                    ("comms_per_stage", comms_per_stage)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer")
    return int(tasks) * int(timesteps) * int(stages_per_step) * int(comms_per_stage)


@dataclass
class MetricsRecord:
    scheme: str
    Mdeg: int
    nu: float
    mesh: str
    dof: int
    efom: str
    error: Optional[float] = None
    order: Optional[float] = None
    runtime_s: Optional[float] = None
    quality: Optional[float] = None
    tasks: int = 1
    cores: int = 1
    dof_per_core: Optional[float] = None
    speedup: Optional[float] = None
    efficiency_pct: Optional[float] = None
    comms: Optional[int] = None

    def __post_init__(self):
        if self.quality is None and self.error and self.runtime_s:
            if self.error > 0 and self.runtime_s > 0 and math.isfinite(self.error * self.runtime_s):
                self.quality = quality(self.error, self.runtime_s)
        if self.dof_per_core is None and self.cores:
            self.dof_per_core = self.dof / self.cores

    def row(self) -> dict:
        d = asdict(self)
        out = {}
        for k in CSV_COLUMNS:
            v = d[k]
            if v is None:
                out[k] = "—" if k == "efficiency_pct" else ""
            elif k == "runtime_s":
                out[k] = f"{v:.3f}"
            elif isinstance(v, float):
                out[k] = f"{v:.6g}"
            else:
                out[k] = str(v)
        return out


def records_to_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def write_csv(path, records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(records_to_csv(records))


def mesh_label(cells: Sequence[int]) -> str:
    return "x".join(str(int(n)) for n in cells)
