"""Periodic uniform Cartesian meshes and block decompositions into tasks.

Cells are numbered with axis 1 fastest.  Coefficient fields are stored as
arrays of shape ``(N_d, ..., N_1, nmodes)`` so that a C-order reshape to
``(n_elements, nmodes)`` follows the flat cell numbering.  Task-local arrays
carry one ghost layer on every side: ``(n_d + 2, ..., n_1 + 2, nmodes)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ConfigError

__all__ = [
    "CartesianMesh",
    "Decomposition",
    "TaskInfo",
    "build_mesh",
    "decompose",
    "neighbor_offsets",
    "face_offsets",
    "pad_periodic",
]


def neighbor_offsets(dim: int, include_center: bool = False) -> list[tuple[int, ...]]:
    """All offsets in {-1,0,1}^dim, axis 1 fastest; the zero offset is optional."""
    offs = []
    for rev in itertools.product((-1, 0, 1), repeat=dim):
        o = tuple(reversed(rev))
        if include_center or any(o):
            offs.append(o)
    return offs


def face_offsets(dim: int) -> list[tuple[int, ...]]:
    return [o for o in neighbor_offsets(dim) if sum(map(abs, o)) == 1]


def pad_periodic(field: np.ndarray, dim: int) -> np.ndarray:
    """Add one ghost layer on every spatial axis by periodic wrap."""
    width = [(1, 1)] * dim + [(0, 0)] * (field.ndim - dim)
    return np.pad(field, width, mode="wrap")


@dataclass(frozen=True)
class CartesianMesh:
    """Uniform periodic mesh of the box ``lower <= x <= upper``."""

    dim: int
    cells_per_axis: tuple[int, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ConfigError("dim", f"must be 1, 2 or 3, got {self.dim}")
        if len(self.cells_per_axis) != self.dim:
            raise ConfigError("cells_per_axis", f"expected {self.dim} entries")
        if any(int(n) < 1 for n in self.cells_per_axis):
            raise ConfigError("cells_per_axis", f"every entry must be >= 1, got {self.cells_per_axis}")
        if any(u <= l for l, u in zip(self.lower, self.upper)):
            raise ConfigError("domain", "upper bounds must exceed lower bounds")

    @cached_property
    def h(self) -> tuple[float, ...]:
        return tuple((u - l) / n for l, u, n in zip(self.lower, self.upper, self.cells_per_axis))

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.cells_per_axis))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def shape(self) -> tuple[int, ...]:
        """Array shape of a cell field (reversed axis order)."""
        return tuple(reversed(self.cells_per_axis))

    def multi_index(self, flat: int) -> tuple[int, ...]:
        if not 0 <= flat < self.n_elements:
            raise IndexError(f"cell {flat} out of range")
        out = []
        for n in self.cells_per_axis:
            out.append(flat % n)
            flat //= n
        return tuple(out)

    def flat_index(self, multi: Sequence[int]) -> int:
        """Flat id of a (possibly out-of-range) multi-index, wrapped periodically."""
        flat, stride = 0, 1
        for i, n in zip(multi, self.cells_per_axis):
            flat += (int(i) % n) * stride
            stride *= n
        return flat

    def face_neighbors(self, flat: int) -> dict[tuple[int, int], int]:
        """``{(axis, side): neighbor}`` with axis 0-based and side -1 or +1."""
        idx = self.multi_index(flat)
        out = {}
        for a in range(self.dim):
            for s in (-1, 1):
                m = list(idx)
                m[a] += s
                out[(a, s)] = self.flat_index(m)
        return out

    def vertex_neighbors(self, flat: int) -> list[int]:
        idx = self.multi_index(flat)
        return [self.flat_index([i + o for i, o in zip(idx, off)]) for off in neighbor_offsets(self.dim)]

    def region(self, flat: int) -> list[int]:
        """The 3^d cells around ``flat`` (central cell at position (3^d - 1) / 2)."""
        idx = self.multi_index(flat)
        return [
            self.flat_index([i + o for i, o in zip(idx, off)])
            for off in neighbor_offsets(self.dim, include_center=True)
        ]

    def cell_lower_corners(self) -> np.ndarray:
        """Lower corner of every cell, shape (n_elements, dim), flat order."""
        axes = [l + h * np.arange(n) for l, h, n in zip(self.lower, self.h, self.cells_per_axis)]
        grids = np.meshgrid(*axes[::-1], indexing="ij")
        return np.stack([g.ravel() for g in grids[::-1]], axis=-1)

    def cell_centers(self) -> np.ndarray:
        return self.cell_lower_corners() + 0.5 * np.asarray(self.h)

    def physical_points(self, ref_points: np.ndarray) -> np.ndarray:
        """Map reference points (npts, dim) into every cell -> (n_elements, npts, dim)."""
        c = self.cell_centers()[:, None, :]
        return c + 0.5 * np.asarray(self.h) * np.asarray(ref_points)[None, :, :]

    def require_region_support(self) -> None:
        """Regions must not wrap onto themselves through both faces of a cell."""
        if any(n < 3 for n in self.cells_per_axis):
            raise ConfigError("cells_per_axis", f"RIDG needs at least 3 cells per axis, got {self.cells_per_axis}")


def build_mesh(dim: int, cells_per_axis, domain=None) -> CartesianMesh:
    """Build a periodic mesh; ``domain`` is ``(lower, upper)`` and defaults to the unit box."""
    if np.isscalar(cells_per_axis):
        cells_per_axis = (int(cells_per_axis),) * dim
    cells = tuple(int(n) for n in cells_per_axis)
    if domain is None:
        lower, upper = (0.0,) * dim, (1.0,) * dim
    else:
        lower, upper = domain
        lower = tuple(float(v) for v in np.broadcast_to(lower, (dim,)))
        upper = tuple(float(v) for v in np.broadcast_to(upper, (dim,)))
    return CartesianMesh(dim, cells, lower, upper)


@dataclass(frozen=True)
class TaskInfo:
    task_id: int
    coords: tuple[int, ...]
    start: tuple[int, ...]
    stop: tuple[int, ...]
    neighbors: dict  # offset -> task id, all 3^d - 1 offsets

    @property
    def local_cells(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.start, self.stop))

    def face_neighbors(self) -> dict:
        return {o: t for o, t in self.neighbors.items() if sum(map(abs, o)) == 1}


class Decomposition:
    """Uniform block decomposition of a mesh into ``prod(tasks_per_axis)`` tasks.

    Messages are keyed by the offset from sender to receiver.  Task A sends the
    slab of its owned cells facing offset ``o``; the neighbor ``B = A + o``
    stores it in its ghost slab facing ``-o``.
    """

    def __init__(self, mesh: CartesianMesh, tasks_per_axis: Sequence[int]):
        tasks = tuple(int(p) for p in tasks_per_axis)
        if len(tasks) != mesh.dim:
            raise ConfigError("tasks_per_axis", f"expected {mesh.dim} entries, got {len(tasks)}")
        for a, (n, p) in enumerate(zip(mesh.cells_per_axis, tasks)):
            if p < 1 or n % p:
                raise ConfigError(
                    "tasks_per_axis",
                    f"{p} tasks do not evenly divide {n} cells along axis {a + 1}",
                )
        self.mesh = mesh
        self.task_grid = tasks
        self.block = tuple(n // p for n, p in zip(mesh.cells_per_axis, tasks))
        self.n_tasks = int(np.prod(tasks))
        self.offsets = neighbor_offsets(mesh.dim)
        self.tasks = [self._make_task(t) for t in range(self.n_tasks)]

    def _task_id(self, coords) -> int:
        tid, stride = 0, 1
        for c, p in zip(coords, self.task_grid):
            tid += (c % p) * stride
            stride *= p
        return tid

    def _make_task(self, tid: int) -> TaskInfo:
        coords, rem = [], tid
        for p in self.task_grid:
            coords.append(rem % p)
            rem //= p
        start = tuple(c * b for c, b in zip(coords, self.block))
        stop = tuple(s + b for s, b in zip(start, self.block))
        nbrs = {o: self._task_id([c + oo for c, oo in zip(coords, o)]) for o in self.offsets}
        return TaskInfo(tid, tuple(coords), start, stop, nbrs)

    # -- halo maps -------------------------------------------------------
    def send_slice(self, offset) -> tuple:
        """Padded-local array slice of owned cells sent toward ``offset``."""
        sl = []
        for o, n in zip(offset, self.block):
            sl.append(n if o == 1 else 1 if o == -1 else slice(1, n + 1))
        return tuple(_keep_dims(sl[::-1]))

    def recv_slice(self, offset) -> tuple:
        """Padded-local array slice of ghost cells lying toward ``offset``."""
        sl = []
        for o, n in zip(offset, self.block):
            sl.append(n + 1 if o == 1 else 0 if o == -1 else slice(1, n + 1))
        return tuple(_keep_dims(sl[::-1]))

    def _global_ids(self, task: TaskInfo, offset, kind: str) -> list[int]:
        ranges = []
        for a, o in enumerate(offset):
            s, e = task.start[a], task.stop[a]
            if kind == "send":
                r = [e - 1] if o == 1 else [s] if o == -1 else list(range(s, e))
            else:
                r = [e] if o == 1 else [s - 1] if o == -1 else list(range(s, e))
            ranges.append(r)
        ids = []
        for rev in itertools.product(*ranges[::-1]):
            ids.append(self.mesh.flat_index(rev[::-1]))
        return ids

    def send_cells(self, task_id: int, offset) -> list[int]:
        return self._global_ids(self.tasks[task_id], tuple(offset), "send")

    def recv_cells(self, task_id: int, offset) -> list[int]:
        return self._global_ids(self.tasks[task_id], tuple(offset), "recv")

    def scatter(self, field: np.ndarray) -> list[np.ndarray]:
        """Split a global field into padded task-local arrays (ghosts zeroed)."""
        d = self.mesh.dim
        out = []
        for t in self.tasks:
            sl = tuple(slice(s, e) for s, e in zip(t.start[::-1], t.stop[::-1]))
            loc = np.zeros(tuple(n + 2 for n in self.block[::-1]) + field.shape[d:], dtype=field.dtype)
            loc[(slice(1, -1),) * d] = field[sl]
            out.append(loc)
        return out

    def gather(self, locals_: Sequence[np.ndarray], padded: bool = True) -> np.ndarray:
        d = self.mesh.dim
        first = locals_[0]
        out = np.empty(self.mesh.shape + first.shape[d:], dtype=first.dtype)
        for t, loc in zip(self.tasks, locals_):
            sl = tuple(slice(s, e) for s, e in zip(t.start[::-1], t.stop[::-1]))
            out[sl] = loc[(slice(1, -1),) * d] if padded else loc
        return out


def _keep_dims(sl):
    # integer indices would drop axes; turn them into length-1 slices
    return [slice(s, s + 1) if isinstance(s, int) else s for s in sl]


def decompose(mesh: CartesianMesh, tasks_per_axis) -> Decomposition:
    if np.isscalar(tasks_per_axis):
        tasks_per_axis = (int(tasks_per_axis),) * mesh.dim
    return Decomposition(mesh, tasks_per_axis)
