"""Orthonormal tensor-product Legendre bases and Gauss-Legendre quadrature.

Everything lives on the reference cube [-1, 1]^d.  Integrals are normalized by
the reference measure 2^d so that the basis is orthonormal:

    (1/2^d) * int phi_k phi_l = delta_kl

A flat basis index enumerates multi-indices lexicographically with axis 1
fastest and the last axis slowest.  For space-time bases the last axis is
time.  In array form the coefficient vector reshapes (C order) to a tensor
whose array axes run over the basis axes in *reverse* order, i.e. the last
array axis is basis axis 1.  :func:`apply_axes` hides this bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "QuadratureRule",
    "BasisSet",
    "gauss_legendre",
    "gauss_rule",
    "legendre",
    "orthonormal_legendre",
    "eval_basis",
    "project",
    "reconstruct",
    "apply_axes",
]


def legendre(nmax: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Legendre polynomials P_0..P_nmax and their derivatives at ``x``.

    Uses the three-term recurrence for P and ``P'_{n+1} = P'_{n-1} + (2n+1) P_n``
    for the derivatives, which stays well conditioned at the endpoints.

    Returns arrays of shape ``(nmax + 1,) + x.shape``.
    """
    x = np.asarray(x, dtype=float)
    P = np.empty((nmax + 1,) + x.shape)
    dP = np.empty_like(P)
    P[0] = 1.0
    dP[0] = 0.0
    if nmax >= 1:
        P[1] = x
        dP[1] = 1.0
    for n in range(1, nmax):
        P[n + 1] = ((2 * n + 1) * x * P[n] - n * P[n - 1]) / (n + 1)
        dP[n + 1] = dP[n - 1] + (2 * n + 1) * P[n]
    return P, dP


def orthonormal_legendre(mmax: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of sqrt(2m+1) P_m(x) for m = 0..mmax."""
    P, dP = legendre(mmax, x)
    scale = np.sqrt(2.0 * np.arange(mmax + 1) + 1.0).reshape((-1,) + (1,) * np.ndim(x))
    return scale * P, scale * dP


@lru_cache(maxsize=None)
def _gauss_legendre_cached(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    # enforce exact symmetry of the rule
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    if n % 2 == 1:
        x[n // 2] = 0.0
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1]."""
    if n < 1:
        raise ValueError(f"points_per_axis must be >= 1, got {n}")
    return _gauss_legendre_cached(int(n))


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product rule on [-1, 1]^d.

    ``points`` has shape (npts, d) with axis 1 varying fastest; ``weights`` sum
    to 2^d.  ``nodes_1d``/``weights_1d`` keep the generating 1D rule.
    """

    points: np.ndarray
    weights: np.ndarray
    nodes_1d: np.ndarray = field(repr=False)
    weights_1d: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def points_per_axis(self) -> int:
        return len(self.nodes_1d)

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.weights, f(self.points)))


def gauss_rule(points_per_axis: int, dim: int) -> QuadratureRule:
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    x, w = gauss_legendre(points_per_axis)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    # reverse so that axis 1 is fastest in the flattened C-order listing
    pts = np.stack([g.ravel() for g in grids[::-1]], axis=-1)
    wts = np.prod(np.stack([g.ravel() for g in wgrids]), axis=0)
    return QuadratureRule(pts, wts, x, w)


class BasisSet:
    """Orthonormal tensor Legendre basis of per-axis degree ``degree`` on [-1,1]^dim.

    For a space-time basis build ``BasisSet(d + 1, degree)`` and treat the last
    axis as time.
    """

    def __init__(self, dim: int, degree: int):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        if degree < 0:
            raise ValueError(f"degree must be >= 0, got {degree}")
        self.dim = int(dim)
        self.degree = int(degree)
        self.m = self.degree + 1
        self.size = self.m**self.dim
        flat = np.arange(self.size)
        self.multi_index = np.stack(
            [(flat // self.m**a) % self.m for a in range(self.dim)], axis=-1
        )
        self.multi_index.setflags(write=False)

    def __repr__(self) -> str:
        return f"BasisSet(dim={self.dim}, degree={self.degree})"

    def flat_index(self, multi: Sequence[int]) -> int:
        if len(multi) != self.dim or any(not 0 <= m < self.m for m in multi):
            raise IndexError(f"multi-index {tuple(multi)} out of range for {self!r}")
        return int(sum(int(m) * self.m**a for a, m in enumerate(multi)))

    def values(self, points) -> np.ndarray:
        """Basis values at ``points`` (npts, dim) -> (npts, size)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.ones((pts.shape[0], self.size))
        for a in range(self.dim):
            psi, _ = orthonormal_legendre(self.degree, pts[:, a])
            out *= psi[self.multi_index[:, a]].T
        return out

    def derivatives(self, points, axis: int) -> np.ndarray:
        """d/d xi_axis of every basis function at ``points`` -> (npts, size)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.ones((pts.shape[0], self.size))
        for a in range(self.dim):
            psi, dpsi = orthonormal_legendre(self.degree, pts[:, a])
            tab = dpsi if a == axis else psi
            out *= tab[self.multi_index[:, a]].T
        return out


def eval_basis(basis: BasisSet, k: int, xi) -> float:
    """Value of basis function ``k`` at a single reference point."""
    if not 0 <= k < basis.size:
        raise IndexError(f"basis index {k} out of range [0, {basis.size})")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (basis.dim,):
        raise ValueError(f"point must have {basis.dim} coordinates")
    val = 1.0
    for a in range(basis.dim):
        m = int(basis.multi_index[k, a])
        psi, _ = orthonormal_legendre(m, xi[a])
        val *= float(psi[m])
    return val


def project(f: Callable[[np.ndarray], np.ndarray], basis: BasisSet, rule: QuadratureRule) -> np.ndarray:
    """Discrete L2 projection of ``f`` (vectorized over points) onto ``basis``."""
    vals = np.asarray(f(rule.points), dtype=float)
    return (basis.values(rule.points).T @ (rule.weights * vals)) / 2.0**basis.dim


def reconstruct(coeffs, basis: BasisSet, points) -> np.ndarray:
    return basis.values(points) @ np.asarray(coeffs, dtype=float)


def apply_axes(X: np.ndarray, nlead: int, ops: Mapping[int, np.ndarray], stacked: bool = True) -> np.ndarray:
    """Apply 1D operators along the basis axes of a tensor-shaped array.

    ``X`` has ``nlead`` leading (batch) axes followed by one array axis per
    basis axis, in reverse basis order.  ``ops[a]`` is a matrix of shape
    (n_out, n_in) applied along basis axis ``a``; axes without an entry pass
    through unchanged.

    With ``stacked=True`` every contraction is a stacked matmul over the
    flattened batch, so each batch item is computed by an independent,
    identically shaped product and its result does not depend on how many
    items share the call.  ``stacked=False`` merges the batch into a single
    matrix product, which is faster for many tiny items but whose rounding may
    depend on the batch size.
    """
    lead = X.shape[:nlead]
    nax = X.ndim - nlead
    Y = X.reshape((-1,) + X.shape[nlead:])
    for a, op in ops.items():
        if op is None:
            continue
        ax = 1 + nax - 1 - a
        Y = np.moveaxis(Y, ax, -1)
        shp = Y.shape
        if stacked:
            Z = np.matmul(Y.reshape(shp[0], -1, shp[-1]), op.T)
        else:
            Z = Y.reshape(-1, shp[-1]) @ op.T
        Y = np.moveaxis(Z.reshape(shp[:-1] + (op.shape[0],)), -1, ax)
    return np.ascontiguousarray(Y).reshape(lead + Y.shape[1:])


def default_projection_points(degree: int) -> int:
    return 2 * (degree + 1)


def gram_matrix(basis: BasisSet, rule: QuadratureRule | None = None) -> np.ndarray:
    rule = rule or gauss_rule(basis.degree + 1, basis.dim)
    V = basis.values(rule.points)
    return (V.T * rule.weights) @ V / 2.0**basis.dim
