"""Time integration: RIDG corrector, SSP-RKDG and the simulation driver.

Every cross-element kernel here works on padded arrays (one ghost layer per
side) and applies its 1D operators with stacked matmuls, so the result for an
element never depends on how many elements are processed together.  The
serial driver fills ghosts by periodic wrap; the parallel module fills them by
halo exchange and reuses the same kernels.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .basis import BasisSet, apply_axes, gauss_legendre, gauss_rule, orthonormal_legendre
from .errors import ConfigError, Instability
from .law import ConservationLaw, ProblemSetup
from .mesh import CartesianMesh, pad_periodic
from .predictor import BACKENDS, NewtonConfig, RegionOperator, predict_all

__all__ = [
    "SchemeConfig",
    "StateField",
    "DGOperator",
    "compute_dt",
    "initial_state",
    "correct",
    "rkdg_rhs",
    "ssprk_step",
    "Simulation",
    "RunResult",
    "run",
    "default_stages",
]

SCHEMES = ("ridg", "rkdg")


def default_stages(mdeg: int) -> int:
    return 3 if mdeg <= 2 else 10


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "ridg"
    mdeg: int = 3
    nu: float = 0.9
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    stages: Optional[int] = None
    backend: str = "qqf"
    quad_points: Optional[int] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError("scheme", f"must be one of {SCHEMES}, got {self.scheme!r}")
        if not (isinstance(self.mdeg, (int, np.integer)) and self.mdeg >= 1):
            raise ConfigError("mdeg", f"must be an integer >= 1, got {self.mdeg!r}")
        if not (np.isfinite(self.nu) and self.nu > 0):
            raise ConfigError("nu", f"must be positive, got {self.nu}")
        if self.backend not in BACKENDS:
            raise ConfigError("backend", f"must be one of {BACKENDS}, got {self.backend!r}")
        if self.scheme == "rkdg":
            _check_stages(self.mdeg, self.stage_count)

    @property
    def stage_count(self) -> int:
        if self.scheme == "ridg":
            return 2
        return self.stages if self.stages is not None else default_stages(self.mdeg)


def _check_stages(mdeg: int, stages: int) -> None:
    if stages not in (3, 10):
        raise ConfigError("stages", f"supported stage counts are 3 and 10, got {stages}")
    if (stages == 3 and mdeg > 2) or (stages == 10 and mdeg != 3):
        raise ConfigError("stages", f"{stages}-stage SSP-RK is not paired with Mdeg={mdeg}")


@dataclass
class StateField:
    """Coefficient blocks with array shape (N_d, ..., N_1, theta) at time ``t``."""

    Q: np.ndarray
    t: float = 0.0

    def check_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.Q)))


def compute_dt(nu: float, mesh_or_h, lam_max: float) -> float:
    """CFL step nu * min(h) / lambda_max."""
    if not lam_max > 0:
        raise ValueError("maximum wave speed must be positive to set a time step")
    h = mesh_or_h.h if isinstance(mesh_or_h, CartesianMesh) else tuple(np.atleast_1d(mesh_or_h))
    return nu * min(h) / lam_max


def initial_state(problem: ProblemSetup, mesh: CartesianMesh, mdeg: int, points: int | None = None) -> np.ndarray:
    """L2 projection of the initial condition onto every cell."""
    basis = BasisSet(mesh.dim, mdeg)
    rule = gauss_rule(points or 2 * (mdeg + 1), mesh.dim)
    V = basis.values(rule.points)
    phys = mesh.physical_points(rule.points)
    vals = problem.initial(phys)
    Q = (vals * rule.weights) @ V / 2.0**mesh.dim
    return Q.reshape(mesh.shape + (basis.size,))


class DGOperator:
    """Flux divergence of the DG weak form on padded coefficient arrays.

    ``divergence(Xpad, with_time)`` returns, for every interior cell,

        sum_a (1/h_a) (1/2^d) [ int Phi_{k,xi_a} (F_a(x) - F_a(c))
                                - int_face (Phi_k (fhat - F_a(c)))|_-^+ ]

    with ``c`` the cell's own mean coefficient.  With ``with_time`` the input
    holds space-time coefficients and every integral also runs over tau in
    [-1, 1] with plain Gauss weights.
    """

    def __init__(self, law: ConservationLaw, mdeg: int, h, quad_points: int | None = None):
        self.law = law
        self.d = law.dim
        self.m = mdeg + 1
        self.h = tuple(float(v) for v in h)
        n = quad_points or mdeg + 2
        x, w = gauss_legendre(n)
        psi, dpsi = orthonormal_legendre(mdeg, x)
        ends, _ = orthonormal_legendre(mdeg, np.array([1.0, -1.0]))
        self.n1 = n
        self.P1 = psi.T.copy()                 # (n, m) evaluation
        self.P1w = psi * (0.5 * w)             # (m, n) normalized test
        self.D1w = dpsi * (0.5 * w)
        self.Wt = w[None, :].copy()            # (1, n) plain time weights
        self.ends = {1: ends[:, 0].copy(), -1: ends[:, 1].copy()}

    def _axes(self, with_time):
        return self.d + 1 if with_time else self.d

    def cell_values(self, X: np.ndarray, nlead: int, with_time: bool) -> np.ndarray:
        D = self._axes(with_time)
        T = X.reshape(X.shape[:nlead] + (self.m,) * D)
        return apply_axes(T, nlead, {b: self.P1 for b in range(D)})

    def max_speed(self, Q: np.ndarray) -> float:
        """Largest wave speed at the volume quadrature points of the interior cells."""
        if self.law.linear:
            return float(max(abs(v) for v in self.law.velocity))
        vals = self.cell_values(Q, self.d, False)
        return float(max(np.max(self.law.wave_speed(vals, a)) for a in range(self.d)))

    def divergence(self, Xpad: np.ndarray, with_time: bool) -> np.ndarray:
        d, m, law = self.d, self.m, self.law
        D = self._axes(with_time)
        inner = tuple(s - 2 for s in Xpad.shape[:d])
        interior = tuple(slice(1, 1 + n) for n in inner)
        X = Xpad[interior]
        c = X[..., 0]
        T = X.reshape(inner + (m,) * D)
        vals = apply_axes(T, d, {b: self.P1 for b in range(D)})
        # broadcastable cell constant for point arrays with D trailing axes
        cb = c.reshape(inner + (1,) * D)
        time_op = {d: self.Wt} if with_time else {}
        out = np.zeros(inner + ((1,) if with_time else ()) + (m,) * d)
        for a in range(d):
            Fc = law.flux_component(cb, a)
            G = law.flux_component(vals, a) - Fc
            ops = {b: (self.D1w if b == a else self.P1w) for b in range(d)}
            ops.update(time_op)
            vol = apply_axes(G, d, ops)
            # traces on the faces normal to axis a, interior along the other axes
            lead_ax = d - 1 - a
            sl = list(interior)
            sl[lead_ax] = slice(None)
            Xa = Xpad[tuple(sl)]
            Ta = Xa.reshape(Xa.shape[:d] + (m,) * D)
            tops = {b: self.P1 for b in range(D)}
            wp = apply_axes(_take(Ta, lead_ax, 0, inner[lead_ax] + 1), d, {**tops, a: self.ends[1][None, :]})
            wm = apply_axes(_take(Ta, lead_ax, 1, inner[lead_ax] + 2), d, {**tops, a: self.ends[-1][None, :]})
            lam = np.maximum(law.wave_speed(wp, a), law.wave_speed(wm, a))
            fhat = 0.5 * (law.flux_component(wp, a) + law.flux_component(wm, a)) - 0.5 * lam * (wm - wp)
            n_a = inner[lead_ax]
            f_plus = _take(fhat, lead_ax, 1, n_a + 1) - Fc
            f_minus = _take(fhat, lead_ax, 0, n_a) - Fc
            fops = {b: self.P1w for b in range(d)}
            fops.update(time_op)
            face = (apply_axes(f_plus, d, {**fops, a: 0.5 * self.ends[1][:, None]})
                    - apply_axes(f_minus, d, {**fops, a: 0.5 * self.ends[-1][:, None]}))
            out += (vol - face) / self.h[a]
        return out.reshape(inner + (m**d,))


def _take(X, axis, start, stop):
    sl = [slice(None)] * X.ndim
    sl[axis] = slice(start, stop)
    return X[tuple(sl)]


def correct(Q: np.ndarray, Wpad: np.ndarray, op: DGOperator, dt: float) -> np.ndarray:
    """Explicit correction from padded space-time predictions."""
    return Q + dt * op.divergence(Wpad, with_time=True)


def rkdg_rhs(Qpad: np.ndarray, op: DGOperator) -> np.ndarray:
    """Method-of-lines right-hand side dQ/dt for the interior cells of ``Qpad``."""
    return 2.0 * op.divergence(Qpad, with_time=False)


def ssprk_step(Q: np.ndarray, dt: float, rhs: Callable[[np.ndarray], np.ndarray], stages: int) -> np.ndarray:
    """One SSP-RK step: Shu-Osher RK3 (3 stages) or SSPRK(10,4).

    Both are written in increment form ``Q + dt * sum(b_j k_j)`` so that a
    vanishing right-hand side returns ``Q`` bitwise.
    """
    if stages == 3:
        k1 = rhs(Q)
        k2 = rhs(Q + dt * k1)
        k12 = k1 + k2
        k3 = rhs(Q + (0.25 * dt) * k12)
        return Q + dt * (k12 / 6.0 + (2.0 / 3.0) * k3)
    if stages == 10:
        # Butcher rows: stages 1-5 use k1..k(i-1)/6; stages 6-10 use sum(k1..k5)/15
        # plus k6..k(i-1)/6; weights are 1/10 throughout
        first = np.zeros_like(Q)
        U = Q
        for _ in range(5):
            first = first + rhs(U)
            U = Q + (dt / 6.0) * first
        second = np.zeros_like(Q)
        U = Q + (dt / 15.0) * first
        for _ in range(4):
            second = second + rhs(U)
            U = Q + dt * (first / 15.0 + second / 6.0)
        return Q + (dt / 10.0) * (first + second + rhs(U))
    raise ConfigError("stages", f"supported stage counts are 3 and 10, got {stages}")


# -- simulation driver ---------------------------------------------------------------

Exchange = Callable[[np.ndarray, str], np.ndarray]
Reduce = Callable[[float, str], float]


def _serial_exchange(dim):
    def exchange(X, protocol):
        return pad_periodic(X, dim)
    return exchange


def _serial_reduce(value, op):
    return value


@dataclass
class StepLog:
    step: int
    t: float
    dt: float
    newton_iterations: int


class Simulation:
    """Advance a (possibly task-local) coefficient array to the final time.

    ``exchange(X, protocol)`` returns ``X`` padded with a ghost layer;
    ``reduce(value, op)`` combines a scalar across tasks (op is "max" or "sum").
    """

    def __init__(self, law: ConservationLaw, scheme: SchemeConfig, h, cell_volume: float,
                 exchange: Exchange, reduce: Reduce = _serial_reduce, threads: int = 1,
                 element_ids=None, op_provider: Optional[Callable[[float], RegionOperator]] = None):
        self.law = law
        self.scheme = scheme
        self.h = tuple(h)
        self.cell_volume = cell_volume
        self.exchange = exchange
        self.reduce = reduce
        self.threads = threads
        self.element_ids = element_ids
        self.op_provider = op_provider
        self.dg = DGOperator(law, scheme.mdeg, self.h, scheme.quad_points)
        self._ops: dict[float, RegionOperator] = {}
        self.log: list[StepLog] = []
        self.newton_total = 0
        self.steps = 0
        self.norm0: Optional[float] = None

    def region_operator(self, dt: float) -> RegionOperator:
        if self.op_provider is not None:
            return self.op_provider(dt)
        op = self._ops.get(dt)
        if op is None:
            if not self.law.linear:
                self._ops.clear()
            op = RegionOperator(self.law, self.scheme.mdeg, dt, self.h, quad_points=self.scheme.quad_points)
            self._ops[dt] = op
        return op

    def ridg_step(self, Q: np.ndarray, dt: float) -> tuple[np.ndarray, int]:
        d = self.law.dim
        op = self.region_operator(dt)
        ids = None if self.element_ids is None else np.asarray(self.element_ids).ravel()
        begin = getattr(self.exchange, "begin", None)
        kw = dict(cfg=self.scheme.newton, backend=self.scheme.backend, workers=self.threads)
        if begin is None:
            Qpad = self.exchange(Q, "ridg-predict")
            pred = predict_all(Qpad, op, element_ids=ids, **kw)
            W, iters = pred.W, pred.iterations
        else:
            # cells whose regions are owned entirely are predicted while halos are in flight
            Qpad, finish = begin(Q, "ridg-predict")
            core = np.zeros(Q.shape[:d], dtype=bool)
            core[(slice(1, -1),) * d] = True
            core = core.ravel()
            W = np.empty((core.size, op.theta_t))
            iters = np.ones(core.size, dtype=int)
            for part, ready in ((core, None), (~core, finish)):
                if ready is not None:
                    ready()
                if not part.any():
                    continue
                sub = None if ids is None else ids[part]
                pred = predict_all(Qpad, op, element_ids=sub, mask=part, **kw)
                W[part], iters[part] = pred.W, pred.iterations
        W = W.reshape(Q.shape[:d] + (op.theta_t,))
        Wpad = self.exchange(W, "ridg-correct")
        return correct(Q, Wpad, self.dg, dt), int(iters.max(initial=0))

    def rkdg_step(self, Q: np.ndarray, dt: float) -> np.ndarray:
        rhs = lambda X: rkdg_rhs(self.exchange(X, "rkdg-face"), self.dg)
        return ssprk_step(Q, dt, rhs, self.scheme.stage_count)

    def l2_norm(self, Q: np.ndarray) -> float:
        return math.sqrt(self.reduce(float(np.sum(Q * Q)) * self.cell_volume, "sum"))

    def advance(self, Q: np.ndarray, final_time: float, t0: float = 0.0, max_steps: int | None = None,
                step_log: bool = False) -> tuple[np.ndarray, float]:
        t = t0
        # the reference norm is fixed by the first call so stepwise advancing behaves the same
        if self.norm0 is None:
            self.norm0 = self.l2_norm(Q)
        norm0 = self.norm0
        limit = 10.0 * norm0
        eps_t = 1e-12 * final_time
        while final_time - t > eps_t:
            if max_steps is not None and self.steps >= max_steps:
                break
            lam = self.reduce(self.dg.max_speed(Q), "max")
            dt = compute_dt(self.scheme.nu, self.h, lam)
            if dt >= final_time - t - eps_t:
                dt = final_time - t
            if self.scheme.scheme == "ridg":
                Q, iters = self.ridg_step(Q, dt)
            else:
                Q, iters = self.rkdg_step(Q, dt), 0
            t = final_time if dt == final_time - t else t + dt
            self.steps += 1
            self.newton_total += iters
            if step_log:
                self.log.append(StepLog(self.steps, t, dt, iters))
            finite = self.reduce(0.0 if np.all(np.isfinite(Q)) else 1.0, "max") == 0.0
            norm = self.l2_norm(Q) if finite else float("nan")
            if not finite or norm > limit:
                raise Instability(self.steps, t, norm, norm0)
        return Q, t


@dataclass
class RunResult:
    state: StateField
    steps: int
    runtime_s: float
    newton_iterations: int
    error: float | None
    mass_initial: float
    mass_final: float
    log: list = field(default_factory=list)


def total_integral(Q: np.ndarray, cell_volume: float) -> float:
    return float(np.sum(Q[..., 0])) * cell_volume


def run(problem: ProblemSetup, scheme: SchemeConfig, mesh: CartesianMesh, max_steps: int | None = None,
        step_log: bool = False, threads: int = 1) -> RunResult:
    """Serial run from the projected initial condition to the problem's final time."""
    from .metrics import l2_relative_error

    if problem.dim != mesh.dim:
        raise ConfigError("mesh", f"problem is {problem.dim}D but mesh is {mesh.dim}D")
    if scheme.scheme == "ridg":
        mesh.require_region_support()
    Q0 = initial_state(problem, mesh, scheme.mdeg)
    sim = Simulation(problem.law, scheme, mesh.h, mesh.cell_volume, _serial_exchange(mesh.dim), threads=threads)
    start = time.perf_counter()
    Q, t = sim.advance(Q0, problem.final_time, max_steps=max_steps, step_log=step_log)
    runtime = time.perf_counter() - start
    err = None
    if problem.exact is not None and abs(t - problem.final_time) <= 1e-12 * problem.final_time:
        err = l2_relative_error(Q, lambda x: problem.exact(t, x), scheme.mdeg, mesh)
    return RunResult(StateField(Q, t), sim.steps, runtime, sim.newton_total, err,
                     total_integral(Q0, mesh.cell_volume), total_integral(Q, mesh.cell_volume), sim.log)
