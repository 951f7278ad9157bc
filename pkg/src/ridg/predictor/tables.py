"""Exact integral tables for the space-time prediction system.

All multi-dimensional tensors factor into products of three 1D tables:

    T1[i, j, m] = 1/2 int psi_i  psi_j psi_m
    D1[i, j, m] = 1/2 int psi_i' psi_j psi_m
    e_pm[m]     = psi_m(+-1)

The volume tensor for spatial axis ``a`` is

    B_a[k, l, p] = 2 * D1[k_a, l_a, p_a] * prod_{b != a} T1[k_b, l_b, p_b]

(the factor 2 converts the space-time normalization 1/2^(d+1) into the 1/2^d
that scales the flux terms of the residual).  The assembly never forms
``B_a``; it contracts one axis at a time, see :func:`contract_triple`.
"""

from __future__ import annotations

import hashlib
import os
import threading
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ..basis import gauss_legendre, orthonormal_legendre
from .. import kernels

__all__ = [
    "QQFTables",
    "build_tables",
    "triple_product_1d",
    "derivative_triple_1d",
    "contract_triple",
    "load_or_build",
    "TABLE_FORMAT_VERSION",
]

TABLE_FORMAT_VERSION = 1


def _exact_rule(mdeg: int):
    # triple products have degree <= 3*Mdeg
    return gauss_legendre(max(1, (3 * mdeg) // 2 + 1))


def _t1_mask(m: int) -> np.ndarray:
    i, j, k = np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij")
    return ((i + j + k) % 2 == 0) & (np.abs(i - j) <= k) & (k <= i + j)


def _d1_mask(m: int) -> np.ndarray:
    i, j, k = np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij")
    return ((i + j + k) % 2 == 1) & (np.abs(j - k) <= i - 1)


def triple_product_1d(mdeg: int) -> np.ndarray:
    """T1[i,j,m] = (1/2) int psi_i psi_j psi_m, with structural zeros set exactly."""
    x, w = _exact_rule(mdeg)
    psi, _ = orthonormal_legendre(mdeg, x)
    t = np.einsum("q,iq,jq,mq->ijm", 0.5 * w, psi, psi, psi)
    t[~_t1_mask(mdeg + 1)] = 0.0
    return t


def derivative_triple_1d(mdeg: int) -> np.ndarray:
    """D1[i,j,m] = (1/2) int psi_i' psi_j psi_m, with structural zeros set exactly."""
    x, w = _exact_rule(mdeg)
    psi, dpsi = orthonormal_legendre(mdeg, x)
    t = np.einsum("q,iq,jq,mq->ijm", 0.5 * w, dpsi, psi, psi)
    t[~_d1_mask(mdeg + 1)] = 0.0
    return t


def _nonzero_list(t: np.ndarray):
    idx = np.argwhere(t != 0.0).astype(np.intp)
    return np.ascontiguousarray(idx), np.ascontiguousarray(t[tuple(idx.T)])


@dataclass(frozen=True, eq=False)
class QQFTables:
    """Precomputed tables for one (Mdeg, d) pair.  Immutable and shareable."""

    mdeg: int
    dim: int
    T1: np.ndarray = field(repr=False)
    D1: np.ndarray = field(repr=False)
    e_plus: np.ndarray = field(repr=False)
    e_minus: np.ndarray = field(repr=False)
    Kt: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return self.mdeg + 1

    @property
    def theta(self) -> int:
        return self.m**self.dim

    @property
    def theta_t(self) -> int:
        return self.m ** (self.dim + 1)

    # -- time, endpoint and causal matrices ------------------------------
    @cached_property
    def Mplus(self) -> np.ndarray:
        """Endpoint mass at tau = +1, shape (theta_T, theta_T)."""
        return _frozen(np.kron(np.outer(self.e_plus, self.e_plus), np.eye(self.theta)))

    @cached_property
    def K(self) -> np.ndarray:
        """K[k, l] = normalized int int Psi_{k,tau} Psi_l."""
        return _frozen(np.kron(self.Kt, np.eye(self.theta)))

    @cached_property
    def C(self) -> np.ndarray:
        """Causal matrix C[k, m] = normalized int Psi_k(tau=-1) Phi_m, (theta_T, theta)."""
        return _frozen(np.kron(self.e_minus[:, None], np.eye(self.theta)))

    @cached_property
    def time_operator(self) -> np.ndarray:
        return _frozen(self.Mplus - self.K)

    # -- sparse 1D lists used by the contraction kernels ------------------
    @cached_property
    def t1_list(self):
        return _nonzero_list(self.T1)

    @cached_property
    def d1_list(self):
        return _nonzero_list(self.D1)

    def axis_factor(self, a: int, deriv_axis: int):
        return self.d1_list if a == deriv_axis else self.t1_list

    # -- full tensors as index/value lists ------------------------------
    def volume_nonzeros(self, axis: int):
        """Nonzero entries of B_axis as (alpha, beta).

        ``alpha`` has rows (k, l, p) of flat space-time indices.  The list
        grows like nnz1D^(d+1); intended for inspection and tests.
        """
        if not 0 <= axis < self.dim:
            raise IndexError(f"axis {axis} out of range")
        lists = [self.axis_factor(b, axis) for b in range(self.dim + 1)]
        return _kron_lists(lists, self.m, scale=2.0)

    def face_nonzeros(self, axis: int, sides: tuple[int, int, int]):
        """Nonzero entries of the face tensor with trace sides (s_k, s_l, s_p).

        G[k, l, p] = e_{s_k}[k_a] e_{s_l}[l_a] e_{s_p}[p_a] prod_{b != a} T1[k_b, l_b, p_b]
        """
        e = {1: self.e_plus, -1: self.e_minus}
        ea = np.einsum("i,j,m->ijm", e[sides[0]], e[sides[1]], e[sides[2]])
        lists = [self.t1_list if b != axis else _nonzero_list(ea) for b in range(self.dim + 1)]
        return _kron_lists(lists, self.m, scale=1.0)

    def volume_tensor_dense(self, axis: int) -> np.ndarray:
        alpha, beta = self.volume_nonzeros(axis)
        out = np.zeros((self.theta_t,) * 3)
        out[tuple(alpha.T)] = beta
        return out

    def nnz_volume(self, axis: int) -> int:
        n = len(self.d1_list[1]) * len(self.t1_list[1]) ** self.dim
        return int(n)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _kron_lists(lists, m: int, scale: float):
    """Combine per-axis (idx, val) lists into flat space-time (alpha, beta)."""
    alpha = np.zeros((1, 3), dtype=np.int64)
    beta = np.full(1, scale)
    stride = 1
    for idx, val in lists:
        alpha = (alpha[:, None, :] + stride * idx[None, :, :]).reshape(-1, 3)
        beta = (beta[:, None] * val[None, :]).ravel()
        stride *= m
    return alpha, beta


def build_tables(mdeg: int, dim: int) -> QQFTables:
    """Compute every table for degree ``mdeg`` in ``dim`` space dimensions."""
    if mdeg < 0:
        raise ValueError(f"Mdeg must be >= 0, got {mdeg}")
    if not 1 <= dim <= 3:
        raise ValueError(f"dim must be 1, 2 or 3, got {dim}")
    x, w = _exact_rule(mdeg)
    psi, dpsi = orthonormal_legendre(mdeg, x)
    Kt = np.einsum("q,iq,jq->ij", w, dpsi, psi)
    ends, _ = orthonormal_legendre(mdeg, np.array([1.0, -1.0]))
    arrays = dict(
        T1=triple_product_1d(mdeg),
        D1=derivative_triple_1d(mdeg),
        e_plus=ends[:, 0].copy(),
        e_minus=ends[:, 1].copy(),
        Kt=Kt,
    )
    for a in arrays.values():
        a.setflags(write=False)
    return QQFTables(mdeg, dim, **arrays)


_cache: dict = {}
_cache_lock = threading.Lock()


def load_or_build(mdeg: int, dim: int, cache_dir: str | os.PathLike | None = None) -> QQFTables:
    """In-memory (and optional on-disk) cache keyed by (Mdeg, d).

    The on-disk file is an ``.npz`` stamped with a format version; stale or
    unreadable files are rebuilt silently.
    """
    key = (int(mdeg), int(dim))
    with _cache_lock:
        if key in _cache:
            return _cache[key]
    tables = None
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"qqf_tables_v{TABLE_FORMAT_VERSION}_m{mdeg}_d{dim}.npz"
        tables = _read_cache(path, mdeg, dim)
    if tables is None:
        tables = build_tables(mdeg, dim)
        if path is not None:
            _write_cache(path, tables)
    with _cache_lock:
        _cache.setdefault(key, tables)
        return _cache[key]


def _checksum(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


_FIELDS = ("T1", "D1", "e_plus", "e_minus", "Kt")


def _write_cache(path: Path, t: QQFTables) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f: getattr(t, f) for f in _FIELDS}
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, version=TABLE_FORMAT_VERSION, mdeg=t.mdeg, dim=t.dim,
             checksum=_checksum(arrays.values()), **arrays)
    os.replace(tmp, path)


def _read_cache(path: Path, mdeg: int, dim: int) -> QQFTables | None:
    if not path.exists():
        return None
    try:
        with np.load(path) as z:
            if int(z["version"]) != TABLE_FORMAT_VERSION or int(z["mdeg"]) != mdeg or int(z["dim"]) != dim:
                return None
            arrays = {f: np.array(z[f]) for f in _FIELDS}
            if str(z["checksum"]) != _checksum(arrays.values()):
                return None
    except (OSError, KeyError, ValueError):
        return None
    for a in arrays.values():
        a.setflags(write=False)
    return QQFTables(mdeg, dim, **arrays)


def contract_triple(coeffs: np.ndarray, factors, m: int) -> np.ndarray:
    """Contract coefficient tensors with a product of 1D triple tables.

    Computes ``J[k, l] = sum_p prod_b X_b[k_b, l_b, p_b] coeffs[p]`` where
    ``factors[b]`` is the nonzero list ``(idx, val)`` of ``X_b`` for basis
    axis ``b``.  ``coeffs`` is a flat coefficient vector (axis 1 fastest) or a
    stack of them with shape (B, m^D); the result is (n, n) or (B, n, n).
    The contraction runs one axis at a time, so the cost is governed by the
    last step, roughly nnz1D * m^(2D - 2) per item for D axes.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    single = coeffs.ndim == 1
    out = kernels.contract(coeffs.reshape(1, -1) if single else coeffs, factors, m)
    return out[0] if single else out
