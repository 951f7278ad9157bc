"""Hot kernels with a compiled implementation and a numpy fallback.

The compiled module ``ridg._kernels`` is used when it was built and the
environment variable ``RIDG_PURE_PYTHON`` is unset.  Both implementations
compute the same sparse mode product used by the QQF Jacobian contraction.
"""

from __future__ import annotations

import math
import os
from functools import lru_cache

import numpy as np

__all__ = [
    "BACKEND",
    "compiled_available",
    "contract",
    "contract_numpy",
    "expand_face_blocks",
    "expand_face_blocks_numpy",
    "mode_product",
    "mode_product_numpy",
]

try:  # pragma: no cover - depends on the build
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover
    _compiled = None


def compiled_available() -> bool:
    return _compiled is not None


def mode_product_numpy(Y: np.ndarray, idx: np.ndarray, val: np.ndarray, m: int) -> np.ndarray:
    """out[a, i*m + j, b] = sum over list entries (i, j, p) of val * Y[a, p, b].

    Dense fallback: scatter the list into an (m*m, m) matrix and apply it
    with a stacked matmul.
    """
    X = np.zeros((m * m, Y.shape[1]))
    X[idx[:, 0] * m + idx[:, 1], idx[:, 2]] = val
    return np.matmul(X, Y)


def _mode_product_compiled(Y, idx, val, m):
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    out = np.zeros((Y.shape[0], m * m, Y.shape[2]))
    _compiled.sparse_mode_product(Y, np.ascontiguousarray(idx, dtype=np.intp),
                                  np.ascontiguousarray(val, dtype=np.float64), m, out)
    return out


@lru_cache(maxsize=None)
def _pair_permutation(m: int, D: int) -> np.ndarray:
    """Position in the (k, l) block layout of every pair-ordered entry."""
    # pair-ordered tensor: array axes (k_D, l_D, ..., k_1, l_1)
    kl = np.arange(m ** (2 * D)).reshape((m, m) * D)
    order = list(range(0, 2 * D, 2)) + list(range(1, 2 * D, 2))
    perm = np.empty(m ** (2 * D), dtype=np.intp)
    perm[kl.transpose(order).ravel()] = np.arange(m ** (2 * D))
    perm.setflags(write=False)
    return perm


def contract_numpy(coeffs: np.ndarray, factors, m: int) -> np.ndarray:
    """J[b, k, l] = sum_p prod_axes X[k_a, l_a, p_a] coeffs[b, p], one axis at a time."""
    D = len(factors)
    B = coeffs.shape[0]
    shape = [B] + [m] * D
    Y = np.ascontiguousarray(coeffs, dtype=float).reshape(shape)
    # array axis D - b holds basis axis b
    for b in range(D):
        ax = D - b
        pre, post = math.prod(shape[:ax]), math.prod(shape[ax + 1:])
        idx, val = factors[b]
        Y = mode_product_numpy(Y.reshape(pre, m, post), idx, val, m)
        shape[ax] = m * m
    Y = Y.reshape([B] + [m] * (2 * D))
    order = [0] + list(range(1, 2 * D + 1, 2)) + list(range(2, 2 * D + 1, 2))
    n = m**D
    return np.ascontiguousarray(Y.transpose(order)).reshape(B, n, n)


def _contract_compiled(coeffs, factors, m):
    D = len(factors)
    coeffs = np.ascontiguousarray(coeffs, dtype=np.float64)
    B = coeffs.shape[0]
    n = m**D
    idx = np.ascontiguousarray(np.concatenate([f[0] for f in factors]), dtype=np.intp)
    val = np.ascontiguousarray(np.concatenate([f[1] for f in factors]), dtype=np.float64)
    offsets = np.zeros(D + 1, dtype=np.intp)
    offsets[1:] = np.cumsum([len(f[1]) for f in factors])
    work_a = np.empty(n * n)
    work_b = np.empty(n * n)
    out = np.empty((B, n * n))
    _compiled.factored_contraction(coeffs, idx, val, offsets, m, _pair_permutation(m, D),
                                   work_a, work_b, out)
    return out.reshape(B, n, n)


def expand_face_blocks_numpy(H: np.ndarray, ek: np.ndarray, el: np.ndarray, pk: int, qk: int) -> np.ndarray:
    """Blocks out[b, (p, i, q), (p', j, q')] = H[b, (p, q), (p', q')] * ek[b, i] * el[b, j]."""
    nb, m = ek.shape
    Hx = np.asarray(H).reshape(nb, pk, 1, qk, pk, 1, qk)
    outer = (ek[:, :, None] * el[:, None, :]).reshape(nb, 1, m, 1, 1, m, 1)
    n = pk * m * qk
    return (Hx * outer).reshape(nb, n, n)


def _expand_face_blocks_compiled(H, ek, el, pk, qk):
    nb, m = ek.shape
    n = pk * m * qk
    out = np.empty((nb, n * n))
    _compiled.expand_face_blocks(np.ascontiguousarray(H, dtype=np.float64).reshape(nb, -1),
                                 np.ascontiguousarray(ek, dtype=np.float64),
                                 np.ascontiguousarray(el, dtype=np.float64), pk, qk, out)
    return out.reshape(nb, n, n)


if _compiled is not None and not os.environ.get("RIDG_PURE_PYTHON"):
    mode_product = _mode_product_compiled
    contract = _contract_compiled
    expand_face_blocks = _expand_face_blocks_compiled
    BACKEND = "cython"
else:
    mode_product = mode_product_numpy
    contract = contract_numpy
    expand_face_blocks = expand_face_blocks_numpy
    BACKEND = "numpy"

mode_product_compiled = _mode_product_compiled if _compiled is not None else None
contract_compiled = _contract_compiled if _compiled is not None else None
expand_face_blocks_compiled = _expand_face_blocks_compiled if _compiled is not None else None
