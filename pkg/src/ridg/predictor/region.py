"""Region residual, Jacobian backends and the regional Newton solve.

A region is the 3^d block of cells around a central cell.  Its unknowns are
the space-time coefficients of every cell, ordered cell-major with the
region cells enumerated over offsets in {-1,0,1}^d (axis 1 fastest).

Internally the solve runs in deviation form about ``c``, the cell average of
the central cell: ``W = c e_0 + dW`` and ``Q = c e_0 + dQ``.  The constant
flux ``F(c)`` is subtracted from every volume and face flux, which is an
exact identity for a closed cell boundary, so a constant state produces an
identically zero residual.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg

from ..basis import BasisSet, apply_axes, gauss_rule, orthonormal_legendre
from ..errors import ConfigError, NonConvergence
from ..law import ConservationLaw
from ..mesh import neighbor_offsets
from ..kernels import expand_face_blocks
from .tables import QQFTables, contract_triple, load_or_build

__all__ = [
    "NewtonConfig",
    "RegionOperator",
    "RegionSystem",
    "PredictionResult",
    "BACKENDS",
    "project_flux_jacobian",
    "region_residual",
    "region_jacobian",
    "predict_region",
    "predict_all",
    "gather_regions",
]

BACKENDS = ("qqf", "quadrature", "perturbation")


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-11
    max_iter: int = 20
    linear_fast_path: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError("newton_tol", f"must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ConfigError("newton_max_iter", f"must be >= 1, got {self.max_iter}")


DENSE_LIMIT = 50_000


class _Quadrature:
    """Space-time evaluation and test matrices for one (Mdeg, d, points)."""

    def __init__(self, mdeg: int, dim: int, npts: int):
        D = dim + 1
        basis = BasisSet(D, mdeg)
        rule = gauss_rule(npts, D)
        w = rule.weights
        self.V = basis.values(rule.points)
        self.proj = (self.V * w[:, None]).T / 2.0**D
        self.test_vol = [(basis.derivatives(rule.points, a) * w[:, None]).T / 2.0**dim for a in range(dim)]
        self.dV = [basis.derivatives(rule.points, a) for a in range(dim)]
        self.w = w
        frule = gauss_rule(npts, D - 1)
        self.tr = {}
        self.test_face = {}
        for a in range(dim):
            for s in (1, -1):
                pts = np.insert(frule.points, a, float(s), axis=1)
                T = basis.values(pts)
                self.tr[a, s] = T
                self.test_face[a, s] = (T * frule.weights[:, None]).T / 2.0**dim
        self.wf = frule.weights
        x1, w1 = gauss_rule(npts, 1).nodes_1d, gauss_rule(npts, 1).weights_1d
        psi, dpsi = orthonormal_legendre(mdeg, x1)
        self.P1 = psi.T.copy()
        self.P1w = (psi * (0.5 * w1)).copy()
        self.D1w = (dpsi * (0.5 * w1)).copy()
        ends, _ = orthonormal_legendre(mdeg, np.array([1.0, -1.0]))
        self.ends = {1: ends[:, 0].copy(), -1: ends[:, 1].copy()}
        self.D = D
        self.m = mdeg + 1
        self.n1 = npts
        # small bases: one dense product beats sum factorization's per-axis overhead
        self.dense = self.V.size <= DENSE_LIMIT

    def evaluate(self, W):
        """Values at the tensor quadrature points by sum factorization, (..., Nq)."""
        if self.dense:
            return W @ self.V.T
        lead = W.shape[:-1]
        X = apply_axes(W.reshape(lead + (self.m,) * self.D), len(lead), {b: self.P1 for b in range(self.D)}, stacked=False)
        return X.reshape(lead + (-1,))

    def project(self, vals):
        """Normalized projection of point values (..., Nq) onto the basis, (..., theta_T)."""
        if self.dense:
            return vals @ self.proj.T
        lead = vals.shape[:-1]
        X = apply_axes(vals.reshape(lead + (self.n1,) * self.D), len(lead), {b: self.P1w for b in range(self.D)}, stacked=False)
        return X.reshape(lead + (-1,))

    def test_volume(self, vals, a):
        """(1/2^d) sum_q w_q dPsi_k/dxi_a vals_q, (..., theta_T)."""
        if self.dense:
            return vals @ self.test_vol[a].T
        lead = vals.shape[:-1]
        ops = {b: (self.D1w if b == a else self.P1w) for b in range(self.D)}
        X = apply_axes(vals.reshape(lead + (self.n1,) * self.D), len(lead), ops, stacked=False)
        return 2.0 * X.reshape(lead + (-1,))

    def trace(self, W, a, side):
        """Values on the face xi_a = side at the face quadrature points, (..., Nf)."""
        if self.dense:
            return W @ self.tr[a, side].T
        lead = W.shape[:-1]
        ops = {b: (self.ends[side][None, :] if b == a else self.P1) for b in range(self.D)}
        X = apply_axes(W.reshape(lead + (self.m,) * self.D), len(lead), ops, stacked=False)
        return X.reshape(lead + (-1,))

    def test_trace(self, vals, a, side):
        """(1/2^d) sum_f w_f Psi_k(face point) vals_f, (..., theta_T)."""
        lead = vals.shape[:-1]
        shape = [self.n1] * self.D
        shape[self.D - 1 - a] = 1
        ops = {b: (self.ends[side][:, None] if b == a else self.P1w) for b in range(self.D)}
        X = apply_axes(vals.reshape(lead + tuple(shape)), len(lead), ops, stacked=False)
        return X.reshape(lead + (-1,))


_quad_cache: dict = {}


def _quadrature(mdeg, dim, npts) -> _Quadrature:
    key = (mdeg, dim, npts)
    if key not in _quad_cache:
        _quad_cache[key] = _Quadrature(mdeg, dim, npts)
    return _quad_cache[key]


def project_flux_jacobian(W_elem, law: ConservationLaw, npts: int | None = None) -> np.ndarray:
    """Normalized space-time L2 projection of F'(Psi^T W) -> (theta_T, d)."""
    W_elem = np.asarray(W_elem, dtype=float)
    d = law.dim
    mdeg = round(W_elem.shape[-1] ** (1.0 / (d + 1))) - 1
    q = _quadrature(mdeg, d, npts or mdeg + 2)
    wq = W_elem @ q.V.T
    return np.stack([law.jacobian_component(wq, a) @ q.proj.T for a in range(d)], axis=-1)


class RegionOperator:
    """Residual and Jacobians of the prediction system for fixed (law, dt, h)."""

    def __init__(self, law: ConservationLaw, mdeg: int, dt: float, h: Sequence[float],
                 tables: QQFTables | None = None, quad_points: int | None = None):
        self.law = law
        self.d = d = law.dim
        self.mdeg = mdeg
        self.tables = tables or load_or_build(mdeg, d)
        self.m = mdeg + 1
        self.theta = self.m**d
        self.theta_t = self.m ** (d + 1)
        self.dt = float(dt)
        self.h = tuple(float(v) for v in h)
        self.scale = [self.dt / ha for ha in self.h]
        self.npts = quad_points or mdeg + 2
        self.q = _quadrature(mdeg, d, self.npts)
        offs = neighbor_offsets(d, include_center=True)
        self.nreg = len(offs)
        self.center = self.nreg // 2
        pos = np.array(offs) + 1
        self.positions = pos
        lookup = {tuple(p): i for i, p in enumerate(pos)}
        self.pairs, self.upper, self.lower = [], [], []
        for a in range(d):
            L, R = [], []
            for i, p in enumerate(pos):
                if p[a] < 2:
                    r = p.copy()
                    r[a] += 1
                    L.append(i)
                    R.append(lookup[tuple(r)])
            self.pairs.append((np.array(L), np.array(R)))
            self.upper.append(np.flatnonzero(pos[:, a] == 2))
            self.lower.append(np.flatnonzero(pos[:, a] == 0))
        self.time_op = self.tables.time_operator
        self.C = self.tables.C
        self._linear_map = None

    @property
    def size(self) -> int:
        return self.nreg * self.theta_t

    # -- residual -----------------------------------------------------------
    def _full(self, dW, c):
        W = np.array(dW, dtype=float, copy=True)
        W[..., 0] += c
        return W

    def face_lambdas(self, dW, c) -> list[np.ndarray]:
        """Per-interface wave-speed bound, max over the face points of both traces."""
        W = self._full(dW, c)
        lams = []
        for a, (L, R) in enumerate(self.pairs):
            wl = self.q.trace(W[..., L, :], a, 1)
            wr = self.q.trace(W[..., R, :], a, -1)
            sp = np.maximum(self.law.wave_speed(wl, a), self.law.wave_speed(wr, a))
            lams.append(np.max(sp, axis=-1))
        return lams

    def residual(self, dW, dQ, c, lam=None) -> np.ndarray:
        """Scaled residual of the prediction system, shape (..., nreg, theta_T)."""
        law, q = self.law, self.q
        dW = np.asarray(dW, dtype=float)
        if lam is None:
            lam = self.face_lambdas(dW, c)
        W = self._full(dW, c)
        R = dW @ self.time_op.T - np.asarray(dQ) @ self.C.T
        R = np.broadcast_to(R, dW.shape).copy()
        wq = q.evaluate(W)
        for a in range(self.d):
            s = self.scale[a]
            Fc = law.flux_component(c, a)
            R -= s * q.test_volume(law.flux_component(wq, a) - Fc, a)
            wp = q.trace(W, a, 1)
            wm = q.trace(W, a, -1)
            L, Rr = self.pairs[a]
            wl, wr = wp[..., L, :], wm[..., Rr, :]
            fhat = (0.5 * (law.flux_component(wl, a) + law.flux_component(wr, a))
                    - 0.5 * lam[a][..., None] * (wr - wl) - Fc)
            R[..., L, :] += s * q.test_trace(fhat, a, 1)
            R[..., Rr, :] -= s * q.test_trace(fhat, a, -1)
            up, lo = self.upper[a], self.lower[a]
            R[..., up, :] += s * q.test_trace(law.flux_component(wp[..., up, :], a) - Fc, a, 1)
            R[..., lo, :] -= s * q.test_trace(law.flux_component(wm[..., lo, :], a) - Fc, a, -1)
        return R

    # -- Jacobians ------------------------------------------------------------
    def jacobian(self, dW, dQ, c, lam=None, backend: str = "qqf", rows=None) -> np.ndarray:
        """Dense region Jacobian (size x size).

        ``rows`` optionally restricts assembly to the block rows of the given
        region cells (other rows are left zero); used for benchmarking.
        """
        if backend not in BACKENDS:
            raise ConfigError("backend", f"unknown Jacobian backend {backend!r}; choose from {BACKENDS}")
        if lam is None:
            lam = self.face_lambdas(dW, c)
        if backend == "perturbation":
            return self._jacobian_fd(dW, dQ, c, lam)
        n = self.theta_t
        J = np.zeros((self.nreg, n, self.nreg, n))
        blocks = self._blocks_qqf(dW, c, lam, rows) if backend == "qqf" else self._blocks_quad(dW, c, lam, rows)
        for (i, j), blk in blocks:
            J[i, :, j, :] += blk
        for i in (range(self.nreg) if rows is None else rows):
            J[i, :, i, :] += self.time_op
        return J.reshape(self.size, self.size)

    def block_row(self, dW, c, lam=None, cell: int | None = None, backend: str = "qqf") -> dict:
        """Nonzero blocks {j: block} of the Jacobian rows belonging to region cell ``cell``.

        This is the per-element unit of assembly work; the dense region matrix
        is never formed.  Only the ``qqf`` and ``quadrature`` backends apply.
        """
        if backend not in ("qqf", "quadrature"):
            raise ConfigError("backend", f"block rows are assembled by 'qqf' or 'quadrature', not {backend!r}")
        cell = self.center if cell is None else int(cell)
        if lam is None:
            lam = self.face_lambdas(dW, c)
        gen = self._blocks_qqf if backend == "qqf" else self._blocks_quad
        out = {cell: self.time_op.copy()}
        for (i, j), blk in gen(dW, c, lam, [cell]):
            # generated blocks are freshly computed, so they can be kept without copying
            if j in out:
                out[j] += blk
            else:
                out[j] = blk
        return out

    def _wanted(self, rows):
        return (lambda i: True) if rows is None else (lambda i, s=frozenset(rows): i in s)

    def _blocks_quad(self, dW, c, lam, rows):
        law, q = self.law, self.q
        want = self._wanted(rows)
        # only cells coupled to the requested rows are evaluated, as in the qqf path
        need = np.arange(self.nreg) if rows is None else np.array(sorted(self._closed_neighborhood(rows)))
        W = np.zeros((self.nreg, self.theta_t))
        W[need] = self._full(dW, c)[need]
        wq = W[need] @ q.V.T
        for a in range(self.d):
            s = self.scale[a]
            fq = dict(zip(need.tolist(), law.jacobian_component(wq, a)))
            for i in need.tolist():
                if want(i):
                    yield (i, i), -s * ((q.test_vol[a] * fq[i]) @ q.V)
            tp, tm = q.tr[a, 1], q.tr[a, -1]
            vp, vm = q.test_face[a, 1], q.test_face[a, -1]
            wp, wm = W @ tp.T, W @ tm.T
            L, R = self.pairs[a]
            for n_if, (l, r) in enumerate(zip(L, R)):
                if not (want(l) or want(r)):
                    continue
                gl = 0.5 * (law.jacobian_component(wp[l], a) + lam[a][n_if])
                gr = 0.5 * (law.jacobian_component(wm[r], a) - lam[a][n_if])
                if want(l):
                    yield (l, l), s * ((vp * gl) @ tp)
                    yield (l, r), s * ((vp * gr) @ tm)
                if want(r):
                    yield (r, l), -s * ((vm * gl) @ tp)
                    yield (r, r), -s * ((vm * gr) @ tm)
            for i in self.upper[a]:
                if want(i):
                    yield (i, i), s * ((vp * law.jacobian_component(wp[i], a)) @ tp)
            for i in self.lower[a]:
                if want(i):
                    yield (i, i), -s * ((vm * law.jacobian_component(wm[i], a)) @ tm)

    def _qqf_plan(self, rows):
        """State-independent bookkeeping for the QQF blocks of the given rows."""
        key = None if rows is None else tuple(sorted(rows))
        cache = self.__dict__.setdefault("_plans", {})
        if key in cache:
            return cache[key]
        t, m, D = self.tables, self.m, self.d + 1
        want = self._wanted(rows)
        need = sorted(set(range(self.nreg)) if rows is None else self._closed_neighborhood(rows))
        pos = {cell: n for n, cell in enumerate(need)}
        rows_ = [i for i in range(self.nreg) if want(i)]
        ends = {1: t.e_plus, -1: t.e_minus}
        axes = []
        for a in range(self.d):
            # (block, coefficient cell, sides, flux factor, lambda sign, orientation, interface)
            entries = []
            L, R = self.pairs[a]
            for n_if, (l, r) in enumerate(zip(L, R)):
                if want(l):
                    entries += [((l, l), l, (1, 1, 1), 0.5, 0.5, 1, n_if),
                             ((l, r), r, (1, -1, -1), 0.5, -0.5, 1, n_if)]
                if want(r):
                    entries += [((r, l), l, (-1, 1, 1), 0.5, 0.5, -1, n_if),
                             ((r, r), r, (-1, -1, -1), 0.5, -0.5, -1, n_if)]
            entries += [((i, i), i, (1, 1, 1), 1.0, 0.0, 1, -1) for i in self.upper[a] if want(i)]
            entries += [((i, i), i, (-1, -1, -1), 1.0, 0.0, -1, -1) for i in self.lower[a] if want(i)]
            nb = len(entries)
            ek = np.array([ends[sp[2][0]] for sp in entries]).reshape(nb, m)
            el = np.array([ends[sp[2][1]] for sp in entries]).reshape(nb, m)
            ax = D - a
            axes.append(dict(
                keys=[sp[0] for sp in entries],
                cell=np.array([pos[sp[1]] for sp in entries], dtype=int),
                pside=np.array([0 if sp[2][2] == 1 else 1 for sp in entries], dtype=int),
                fac=np.array([sp[3] * sp[5] for sp in entries]),
                lam_sign=np.array([sp[4] * sp[5] for sp in entries]),
                iface=np.array([max(sp[6], 0) for sp in entries], dtype=int),
                ek=ek, el=el,
                pk=m ** (ax - 1), qk=m ** (D - ax),
                vol=[t.axis_factor(b, a) for b in range(D)],
            ))
        plan = dict(need=need, rows=rows_, rowpos=np.array([pos[i] for i in rows_], dtype=int), axes=axes)
        cache[key] = plan
        return plan

    def _blocks_qqf(self, dW, c, lam, rows):
        t, m, D = self.tables, self.m, self.d + 1
        plan = self._qqf_plan(rows)
        W = self._full(dW, c)
        wq = self.q.evaluate(W[plan["need"]])
        ends = np.stack([t.e_plus, t.e_minus])
        n = m**D
        for a, ap in enumerate(plan["axes"]):
            s = self.scale[a]
            Fp = self.q.project(self.law.jacobian_component(wq, a))
            vol = contract_triple((-2.0 * s) * Fp[plan["rowpos"]], ap["vol"], m)
            for i, blk in zip(plan["rows"], vol):
                yield (i, i), blk
            nb = len(ap["keys"])
            if not nb:
                continue
            # trace of each coefficient tensor on the face: contract p_a with e_sp
            Fpt = np.moveaxis(Fp.reshape((-1,) + (m,) * D), D - a, -1)
            tr = Fpt @ ends.T  # (..., 2): last axis selects the + / - trace
            tr = np.moveaxis(tr, -1, 0).reshape(2, Fp.shape[0], -1)
            g = (s * ap["fac"])[:, None] * tr[ap["pside"], ap["cell"]]
            lam_a = np.asarray(lam[a]).reshape(-1)
            g[:, 0] += s * ap["lam_sign"] * (lam_a[ap["iface"]] if lam_a.size else 0.0)
            H = contract_triple(g, [t.t1_list] * (D - 1), m)
            blocks = expand_face_blocks(H, ap["ek"], ap["el"], ap["pk"], ap["qk"])
            for key, blk in zip(ap["keys"], blocks):
                yield key, blk

    def _closed_neighborhood(self, cells) -> set:
        out = set()
        for i in cells:
            out.add(i)
            for a in range(self.d):
                L, R = self.pairs[a]
                out.update(R[L == i].tolist())
                out.update(L[R == i].tolist())
        return out

    @cached_property
    def _colors(self) -> list[list[int]]:
        """Greedy distance-2 coloring of region cells for grouped perturbations."""
        nb = [self._closed_neighborhood([i]) for i in range(self.nreg)]
        colors: list[list[int]] = []
        for i in range(self.nreg):
            for group in colors:
                if all(not (nb[i] & nb[j]) for j in group):
                    group.append(i)
                    break
            else:
                colors.append([i])
        return colors

    def _jacobian_fd(self, dW, dQ, c, lam) -> np.ndarray:
        """One-sided differences with frozen lambda; cells are perturbed in color groups."""
        n = self.theta_t
        dW = np.asarray(dW, dtype=float)
        W = self._full(dW, c)
        eps = 1e-7 * np.maximum(1.0, np.abs(W))
        R0 = self.residual(dW, dQ, c, lam)
        J = np.zeros((self.nreg, n, self.nreg, n))
        modes = np.arange(n)
        for group in self._colors:
            P = np.zeros((n,) + dW.shape)
            for i in group:
                P[modes, i, modes] = eps[i]
            # perturbed coefficient minus base, as actually represented
            Wp = dW[None] + P
            step = Wp - dW[None]
            Rb = self.residual(Wp, dQ, c, lam)
            for i in group:
                h = step[modes, i, modes]
                for j in self._closed_neighborhood([i]):
                    J[j, :, i, :] = ((Rb[:, j, :] - R0[j]) / h[:, None]).T
        return J.reshape(self.size, self.size)

    # -- solves -----------------------------------------------------------------
    def initial_guess(self, dQ) -> np.ndarray:
        dW = np.zeros((self.nreg, self.theta_t))
        dW[:, : self.theta] = dQ
        return dW

    def newton(self, dQ, c, cfg: NewtonConfig, backend: str = "qqf"):
        """Full Newton on the region; returns (dW, iterations, residual norm)."""
        dW = self.initial_guess(dQ)
        it = 0
        lam = None
        while True:
            # lambda never decreases within a solve: switching face maxima cannot cycle
            cur = self.face_lambdas(dW, c)
            lam = cur if lam is None else [np.maximum(a, b) for a, b in zip(lam, cur)]
            R = self.residual(dW, dQ, c, lam)
            nrm = float(np.linalg.norm(R))
            if not np.isfinite(nrm):
                raise NonConvergence(nrm, dW, it)
            if it >= 1 and nrm < cfg.tol:
                return dW, it, nrm
            if it >= cfg.max_iter:
                raise NonConvergence(nrm, dW, it)
            J = self.jacobian(dW, dQ, c, lam, backend)
            step = scipy.linalg.solve(J, R.ravel(), check_finite=False)
            dW = dW - step.reshape(dW.shape)
            it += 1

    def central_map(self, cfg: NewtonConfig | None = None) -> np.ndarray:
        """Linear laws: matrix G with dW_center = G @ vec(dQ_region).

        Assembled and factored once; the factorization is checked by solving
        one random system and evaluating its residual.
        """
        if self._linear_map is not None:
            return self._linear_map
        if not self.law.linear:
            raise ValueError("central_map requires a linear law")
        cfg = cfg or NewtonConfig()
        n, th = self.theta_t, self.theta
        zero_dW = np.zeros((self.nreg, n))
        zero_dQ = np.zeros((self.nreg, th))
        A = self.jacobian(zero_dW, zero_dQ, 0.0, backend="qqf")
        lu = scipy.linalg.lu_factor(A, check_finite=False)
        E = np.zeros((self.size, n))
        E[self.center * n:(self.center + 1) * n, :] = np.eye(n)
        Y = scipy.linalg.lu_solve(lu, E, trans=1, check_finite=False)
        Y = Y.reshape(self.nreg, n, n)
        G = np.concatenate([Y[i].T @ self.C for i in range(self.nreg)], axis=1)
        # verify on a random right-hand side against the nonlinear residual
        rng = np.random.default_rng(12345)
        dQ = rng.standard_normal((self.nreg, th)) * 1e-2
        Cq = (dQ @ self.C.T).ravel()
        dW = scipy.linalg.lu_solve(lu, Cq, check_finite=False).reshape(self.nreg, n)
        res = float(np.linalg.norm(self.residual(dW, dQ, 0.0)))
        # relative check: a singular factorization gives O(1) residuals
        if not res <= max(cfg.tol, 1e-9 * float(np.linalg.norm(Cq))):
            raise NonConvergence(res, dW, 1)
        G.setflags(write=False)
        self._linear_map = G
        return G


# -- public functional interface ---------------------------------------------------

@dataclass
class RegionSystem:
    """A region solve: operator plus current space-time iterate ``W`` (nreg, theta_T)."""

    op: RegionOperator
    W: np.ndarray

    def deviation(self, Q):
        Q = np.asarray(Q, dtype=float)
        c = float(Q[self.op.center, 0])
        dQ = Q.copy()
        dQ[:, 0] -= c
        dW = np.array(self.W, dtype=float, copy=True)
        dW[:, 0] -= c
        return dW, dQ, c


def region_residual(sys: RegionSystem, Q_n) -> np.ndarray:
    dW, dQ, c = sys.deviation(Q_n)
    return sys.op.residual(dW, dQ, c).ravel()


def region_jacobian(sys: RegionSystem, Q_n, backend: str = "qqf") -> np.ndarray:
    dW, dQ, c = sys.deviation(Q_n)
    return sys.op.jacobian(dW, dQ, c, backend=backend)


def predict_region(op: RegionOperator, Q_region, cfg: NewtonConfig = NewtonConfig(),
                   backend: str = "qqf", fast_path: bool | None = None):
    """Solve one region; return the central cell's W (theta_T,) and the iteration count."""
    Q_region = np.asarray(Q_region, dtype=float)
    c = float(Q_region[op.center, 0])
    dQ = Q_region.copy()
    dQ[:, 0] -= c
    use_fast = cfg.linear_fast_path if fast_path is None else fast_path
    if op.law.linear and use_fast:
        Wc = op.central_map(cfg) @ dQ.ravel()
        it = 1
    else:
        dW, it, _ = op.newton(dQ, c, cfg, backend)
        Wc = dW[op.center].copy()
    Wc[0] += c
    return Wc, it


def gather_regions(Xpad: np.ndarray, dim: int) -> np.ndarray:
    """Stack the 3^d neighborhood of every interior cell -> (E, 3^d, nmodes)."""
    inner = tuple(n - 2 for n in Xpad.shape[:dim])
    parts = []
    for off in neighbor_offsets(dim, include_center=True):
        sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off[::-1], inner))
        parts.append(Xpad[sl])
    stacked = np.stack(parts, axis=dim)
    return stacked.reshape((-1, len(parts)) + Xpad.shape[dim:])


@dataclass
class PredictionResult:
    W: np.ndarray           # (E, theta_T), flat interior order
    iterations: np.ndarray  # per element


_CHUNK = 512


def predict_all(Qpad: np.ndarray, op: RegionOperator, cfg: NewtonConfig = NewtonConfig(),
                backend: str = "qqf", order=None, element_ids=None, workers: int = 1,
                mask=None) -> PredictionResult:
    """Predictions for every interior cell of a padded coefficient array.

    Each element is solved from its own region only; ``order`` permutes the
    visitation sequence (results do not depend on it).  ``mask`` (boolean,
    flat interior order) restricts the solve to a subset of cells; the result
    then lists only those cells and ``element_ids`` must match the subset.
    """
    d = op.d
    regions = gather_regions(Qpad, d)
    if mask is not None:
        regions = regions[np.asarray(mask, dtype=bool).ravel()]
    E = regions.shape[0]
    c = regions[:, op.center, 0].copy()
    dQ = regions.copy()
    dQ[:, :, 0] -= c[:, None]
    out = np.empty((E, op.theta_t))
    iters = np.ones(E, dtype=int)
    if op.law.linear and cfg.linear_fast_path:
        G = op.central_map(cfg).T
        X = dQ.reshape(E, 1, -1)
        for s in range(0, E, _CHUNK):
            out[s:s + _CHUNK] = np.matmul(X[s:s + _CHUNK], G)[:, 0, :]
        out[:, 0] += c
        return PredictionResult(out, iters)

    seq = np.arange(E) if order is None else np.asarray(order)

    def solve(e):
        try:
            dW, it, _ = op.newton(dQ[e], c[e], cfg, backend)
        except NonConvergence as exc:
            gid = int(element_ids[e]) if element_ids is not None else int(e)
            raise exc.located(element=gid) from None
        w = dW[op.center].copy()
        w[0] += c[e]
        out[e] = w
        iters[e] = it

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(solve, seq))
    else:
        for e in seq:
            solve(e)
    return PredictionResult(out, iters)
