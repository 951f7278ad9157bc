"""Thread-based emulation of the task-parallel (MPI-style) execution.

Each task owns one block of a uniform decomposition and runs the same
:class:`~ridg.stepper.Simulation` as the serial driver.  Ghost layers are
filled by message passing between workers:

* ``rkdg-face``: face neighbors only (2d messages per exchange);
* ``ridg-predict`` and ``ridg-correct``: all 3^d - 1 vertex neighbors.

Messages are copies and carry a per-worker sequence number (epoch) plus the
protocol tag, so a worker that falls out of step aborts instead of reading
stale data.  Ghost buffers start as NaN, which poisons any halo a protocol
failed to deliver.  Reductions gather to task 0 in task-id order and
broadcast back, so sums are reproducible and maxima are exact.
"""

from __future__ import annotations

import csv
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonConvergence, RidgError, Instability
from .law import ProblemSetup
from .mesh import CartesianMesh, Decomposition, decompose, face_offsets
from .metrics import (MetricsRecord, comms_estimate, dof_count, efom, mesh_label,
                      speedup_efficiency)
from .predictor import RegionOperator
from .stepper import SchemeConfig, Simulation, StateField, initial_state, total_integral

__all__ = [
    "ProtocolError",
    "WorkerAborted",
    "Deadlock",
    "ExchangePlan",
    "Mailbox",
    "TaskCounters",
    "TaskWorker",
    "Communicator",
    "Collective",
    "ParallelResult",
    "allreduce_max",
    "run_parallel",
    "scaling_study",
    "write_instrumentation",
    "PROTOCOLS",
]

PROTOCOLS = ("rkdg-face", "ridg-predict", "ridg-correct")
WATCHDOG_S = 60.0
_POLL_S = 0.05


class ProtocolError(RidgError):
    """A message arrived with the wrong protocol tag or epoch."""


class WorkerAborted(RidgError):
    """Raised inside a worker when another worker failed."""


class Deadlock(RidgError):
    """The watchdog expired before every worker finished."""


@dataclass(frozen=True)
class ExchangePlan:
    """Neighbor offsets and per-message cell counts for one protocol."""

    protocol: str
    offsets: tuple
    cells: tuple  # number of cells per message, aligned with offsets

    @classmethod
    def build(cls, decomp: Decomposition, protocol: str) -> "ExchangePlan":
        if protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {protocol!r}")
        d = decomp.mesh.dim
        offs = tuple(face_offsets(d)) if protocol == "rkdg-face" else tuple(decomp.offsets)
        cells = tuple(int(np.prod([1 if o else n for o, n in zip(off, decomp.block)])) for off in offs)
        return cls(protocol, offs, cells)

    @property
    def messages(self) -> int:
        return len(self.offsets)


class _Abort:
    def __init__(self):
        self.event = threading.Event()
        self.reason: Optional[BaseException] = None
        self._lock = threading.Lock()

    def trigger(self, exc: BaseException) -> None:
        with self._lock:
            if self.reason is None:
                self.reason = exc
        self.event.set()


class Mailbox:
    """Receive side of a worker: messages keyed by (epoch, sender offset)."""

    def __init__(self, abort: _Abort):
        self._cv = threading.Condition()
        self._box: dict = {}
        self._abort = abort

    def put(self, key, protocol: str, payload) -> None:
        with self._cv:
            if key in self._box:
                raise ProtocolError(f"duplicate message for key {key}")
            self._box[key] = (protocol, payload)
            self._cv.notify_all()

    def get(self, key, protocol: str, timeout: float = WATCHDOG_S):
        deadline = time.monotonic() + timeout
        with self._cv:
            while key not in self._box:
                if self._abort.event.is_set():
                    raise WorkerAborted("aborted while waiting for a message")
                left = deadline - time.monotonic()
                if left <= 0:
                    raise Deadlock(f"no message for key {key} after {timeout:.0f}s")
                self._cv.wait(min(left, _POLL_S))
            tag, payload = self._box.pop(key)
        if tag != protocol:
            raise ProtocolError(f"epoch {key[0]}: expected {protocol!r} message, got {tag!r}")
        return payload


@dataclass
class TaskCounters:
    task: int
    messages_sent: int = 0
    payload_elements: int = 0
    bytes_sent: int = 0
    reductions: int = 0
    wait_time_s: float = 0.0
    compute_time_s: float = 0.0
    by_protocol: dict = field(default_factory=dict)
    messages_per_step: list = field(default_factory=list)

    def row(self) -> dict:
        return {
            "task": self.task,
            "messages_sent": self.messages_sent,
            "payload_elements": self.payload_elements,
            "bytes_sent": self.bytes_sent,
            "reductions": self.reductions,
            "wait_time_s": f"{self.wait_time_s:.6f}",
            "compute_time_s": f"{self.compute_time_s:.6f}",
        }


class Communicator:
    """Shared wiring between workers: one mailbox per task plus the abort flag."""

    def __init__(self, n_tasks: int, timeout: float = WATCHDOG_S):
        self.abort = _Abort()
        self.timeout = timeout
        self.boxes = [Mailbox(self.abort) for _ in range(n_tasks)]
        self.n_tasks = n_tasks

    def send(self, dest: int, key, protocol: str, payload) -> None:
        self.boxes[dest].put(key, protocol, payload)

    def recv(self, me: int, key, protocol: str):
        return self.boxes[me].get(key, protocol, self.timeout)


class Collective:
    """All-reduce for one task: gather to task 0 in task order, then broadcast."""

    def __init__(self, comm: Communicator, task_id: int, counters: TaskCounters):
        self.comm, self.me, self.counters = comm, task_id, counters
        self.epoch = 0

    def __call__(self, value: float, op: str) -> float:
        me, n = self.me, self.comm.n_tasks
        epoch = ("reduce", self.epoch)
        self.epoch += 1
        self.counters.reductions += 1
        t0 = time.perf_counter()
        if me == 0:
            vals = [float(value)]
            for src in range(1, n):
                vals.append(self.comm.recv(0, (epoch, src), op))
            if op == "max":
                out = max(vals)
            elif op == "sum":
                out = 0.0
                for v in vals:  # fixed task order
                    out += v
            else:
                raise ValueError(f"unsupported reduction {op!r}")
            for dst in range(1, n):
                self.comm.send(dst, (epoch, "bcast"), op, out)
        else:
            self.comm.send(0, (epoch, me), op, float(value))
            out = self.comm.recv(me, (epoch, "bcast"), op)
        self.counters.wait_time_s += time.perf_counter() - t0
        return out


class _OperatorCache:
    """Region operators shared read-only between workers, built once per step size."""

    def __init__(self, law, scheme: SchemeConfig, h):
        self._lock = threading.Lock()
        self._ops: dict[float, RegionOperator] = {}
        self.law, self.scheme, self.h = law, scheme, tuple(h)

    def __call__(self, dt: float) -> RegionOperator:
        with self._lock:
            op = self._ops.get(dt)
            if op is None:
                if not self.law.linear and len(self._ops) > 8:
                    self._ops.clear()
                op = RegionOperator(self.law, self.scheme.mdeg, dt, self.h,
                                    quad_points=self.scheme.quad_points)
                if self.law.linear and self.scheme.newton.linear_fast_path:
                    op.central_map(self.scheme.newton)
                self._ops[dt] = op
            return op


class _Exchange:
    """Halo exchange callable handed to the task's Simulation.

    Calling it performs a blocking exchange; ``begin`` posts the sends and
    returns the partially filled array with a completion callback, which lets
    the caller work on interior cells while messages are in flight.
    """

    def __init__(self, worker: "TaskWorker"):
        self.w = worker

    def __call__(self, X: np.ndarray, protocol: str) -> np.ndarray:
        Xpad, finish = self.begin(X, protocol)
        finish()
        return Xpad

    def begin(self, X: np.ndarray, protocol: str):
        w = self.w
        d = w.decomp.mesh.dim
        plan = w.plans[protocol]
        epoch = w.epoch
        w.epoch += 1
        Xpad = np.full(tuple(n + 2 for n in X.shape[:d]) + X.shape[d:], np.nan)
        Xpad[(slice(1, -1),) * d] = X
        for off, ncell in zip(plan.offsets, plan.cells):
            buf = np.array(Xpad[w.decomp.send_slice(off)], copy=True)
            w.comm.send(w.info.neighbors[off], (epoch, off), protocol, buf)
            w.counters.messages_sent += 1
            w.counters.payload_elements += ncell
            w.counters.bytes_sent += buf.nbytes
            w.counters.by_protocol[protocol] = w.counters.by_protocol.get(protocol, 0) + 1
            w.step_messages += 1

        def finish():
            t0 = time.perf_counter()
            for off in plan.offsets:
                # the neighbor at -off sent toward +off; it lands in our ghost slab at -off
                buf = w.comm.recv(w.info.task_id, (epoch, off), protocol)
                Xpad[w.decomp.recv_slice(tuple(-o for o in off))] = buf
            w.counters.wait_time_s += time.perf_counter() - t0

        return Xpad, finish


class TaskWorker(threading.Thread):
    """One emulated task: owns a block of the field and advances it."""

    def __init__(self, decomp: Decomposition, task_id: int, comm: Communicator, law, scheme: SchemeConfig,
                 Q_local: np.ndarray, final_time: float, threads: int, op_cache: _OperatorCache,
                 max_steps: Optional[int] = None):
        super().__init__(name=f"ridg-task-{task_id}", daemon=True)
        self.decomp = decomp
        self.info = decomp.tasks[task_id]
        self.comm = comm
        self.Q = np.array(Q_local, copy=True)
        self.final_time = final_time
        self.max_steps = max_steps
        self.epoch = 0
        self.step_messages = 0
        self.counters = TaskCounters(task_id)
        self.allreduce = Collective(comm, task_id, self.counters)
        self.plans = {p: ExchangePlan.build(decomp, p) for p in PROTOCOLS}
        mesh = decomp.mesh
        start = self.info.start
        ids = np.array([mesh.flat_index([s0 + i for s0, i in zip(start, m[::-1])])
                        for m in np.ndindex(*self._local_shape())]).reshape(self._local_shape())
        self.sim = Simulation(law, scheme, mesh.h, mesh.cell_volume, _Exchange(self), self.allreduce,
                              threads=threads, element_ids=ids, op_provider=op_cache)
        self.t = 0.0
        self.error: Optional[BaseException] = None
        self.runtime_s = 0.0

    def _local_shape(self):
        # array order (N_d, ..., N_1), local cell (i_d, ..., i_1) -> global multi-index
        return tuple(self.decomp.block[::-1])

    def run(self) -> None:
        start = time.perf_counter()
        try:
            Q, t = self.Q, 0.0
            sim = self.sim
            # step one at a time so per-step message counts can be recorded
            while True:
                before = sim.steps
                self.step_messages = 0
                Q, t = sim.advance(Q, self.final_time, t0=t, max_steps=before + 1)
                if sim.steps == before:
                    break
                self.counters.messages_per_step.append(self.step_messages)
                if self.max_steps is not None and sim.steps >= self.max_steps:
                    break
            self.Q, self.t = Q, t
        except (Instability, NonConvergence) as exc:
            self.error = exc.located(task=self.info.task_id)
            self.comm.abort.trigger(self.error)
        except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
            self.error = exc
            self.comm.abort.trigger(exc)
        finally:
            self.runtime_s = time.perf_counter() - start
            self.counters.compute_time_s = self.runtime_s - self.counters.wait_time_s


@dataclass
class ParallelResult:
    state: StateField
    steps: int
    runtime_s: float
    task_runtime_s: list
    counters: list
    error: Optional[float]
    mass_initial: float
    mass_final: float
    decomposition: Decomposition


def allreduce_max(values: Sequence[float], timeout: float = WATCHDOG_S) -> list[float]:
    """Run a max all-reduce over one emulated task per value; returns each task's result."""
    n = len(values)
    if n == 0:
        raise ValueError("at least one task is required")
    comm = Communicator(n, timeout)
    out = [None] * n

    def body(i):
        try:
            out[i] = Collective(comm, i, TaskCounters(i))(values[i], "max")
        except BaseException as exc:  # noqa: BLE001 - re-raised by _join
            comm.abort.trigger(exc)

    threads = [threading.Thread(target=body, args=(i,), daemon=True) for i in range(n)]
    for th in threads:
        th.start()
    _join(threads, comm, timeout)
    return out


def _join(threads, comm: Communicator, timeout: float) -> None:
    deadline = time.monotonic() + timeout
    for th in threads:
        th.join(max(0.0, deadline - time.monotonic()))
    if any(th.is_alive() for th in threads):
        comm.abort.trigger(Deadlock("watchdog expired"))
        for th in threads:
            th.join(1.0)
        raise Deadlock(f"workers still running after the {timeout:.0f}s watchdog")
    if comm.abort.reason is not None:
        raise comm.abort.reason


def run_parallel(problem: ProblemSetup, scheme: SchemeConfig, mesh: CartesianMesh, tasks_per_axis,
                 threads_per_task: int = 1, max_steps: Optional[int] = None,
                 timeout: float = WATCHDOG_S) -> ParallelResult:
    """Run ``problem`` on an emulated task grid; the result matches the serial run bitwise.

    ``timeout`` bounds the idle wait for any single message or reduction.
    """
    from .metrics import l2_relative_error

    if scheme.scheme == "ridg":
        mesh.require_region_support()
    decomp = decompose(mesh, tasks_per_axis)
    Q0 = initial_state(problem, mesh, scheme.mdeg)
    blocks = [loc[(slice(1, -1),) * mesh.dim] for loc in decomp.scatter(Q0)]
    comm = Communicator(decomp.n_tasks, timeout)
    cache = _OperatorCache(problem.law, scheme, mesh.h)
    workers = [TaskWorker(decomp, t, comm, problem.law, scheme, blocks[t], problem.final_time,
                          threads_per_task, cache, max_steps) for t in range(decomp.n_tasks)]
    start = time.perf_counter()
    for w in workers:
        w.start()
    # the watchdog here bounds the whole run loosely; idle waits are bounded by ``timeout``
    while any(w.is_alive() for w in workers):
        for w in workers:
            w.join(_POLL_S)
        if comm.abort.event.is_set():
            for w in workers:
                w.join(timeout)
            break
    runtime = time.perf_counter() - start
    errors = [w.error for w in workers if w.error is not None]
    if errors:
        primary = [e for e in errors if not isinstance(e, WorkerAborted)]
        raise (primary or errors)[0]
    Q = decomp.gather([w.Q for w in workers], padded=False)
    t = workers[0].t
    err = None
    if problem.exact is not None and abs(t - problem.final_time) <= 1e-12 * problem.final_time:
        err = l2_relative_error(Q, lambda x: problem.exact(t, x), scheme.mdeg, mesh)
    return ParallelResult(StateField(Q, t), workers[0].sim.steps, runtime, [w.runtime_s for w in workers],
                          [w.counters for w in workers], err, total_integral(Q0, mesh.cell_volume),
                          total_integral(Q, mesh.cell_volume), decomp)


def write_instrumentation(path, counters: Sequence[TaskCounters]) -> None:
    cols = ["task", "messages_sent", "payload_elements", "bytes_sent", "reductions", "wait_time_s",
            "compute_time_s"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for c in counters:
            w.writerow(c.row())


def comms_per_stage(scheme: SchemeConfig, dim: int) -> int:
    return 3**dim - 1 if scheme.scheme == "ridg" else 2 * dim


def scaling_study(problem: ProblemSetup, scheme: SchemeConfig, mesh: CartesianMesh,
                  task_counts: Sequence[int], threads_per_task: int = 1,
                  max_steps: Optional[int] = None,
                  on_result: Optional[Callable[[int, ParallelResult], None]] = None) -> list[MetricsRecord]:
    """One record per task count; task counts must be perfect d-th powers dividing the mesh."""
    d = mesh.dim
    runs = {}
    for n in task_counts:
        p = round(n ** (1.0 / d))
        if p**d != n:
            raise ValueError(f"task count {n} is not a perfect {d}-th power")
        res = run_parallel(problem, scheme, mesh, (p,) * d, threads_per_task, max_steps=max_steps)
        runs[n] = res
        if on_result is not None:
            on_result(n, res)
    if 1 not in runs:
        raise ValueError("task counts must include 1 for the speedup baseline")
    se = speedup_efficiency({n: r.runtime_s for n, r in runs.items()})
    theta = (scheme.mdeg + 1) ** d
    records = []
    for n in task_counts:
        r = runs[n]
        sp, eff = se[n]
        cores = n * threads_per_task
        dof = dof_count(theta, mesh.n_elements)
        records.append(MetricsRecord(
            scheme=scheme.scheme, Mdeg=scheme.mdeg, nu=scheme.nu, mesh=mesh_label(mesh.cells_per_axis),
            dof=dof, efom=str(efom(theta, mesh.n_elements, d)), error=r.error, runtime_s=r.runtime_s,
            tasks=n, cores=cores, dof_per_core=dof / cores, speedup=sp, efficiency_pct=eff,
            comms=comms_estimate(n, r.steps, scheme.stage_count, comms_per_stage(scheme, d)),
        ))
    return records
