# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the QQF Jacobian contraction."""

from libc.string cimport memset


def sparse_mode_product(const double[:, :, ::1] Y, const Py_ssize_t[:, ::1] idx,
                        const double[::1] val, Py_ssize_t m, double[:, :, ::1] out):
    """out[a, i*m + j, b] += val[n] * Y[a, p, b] for each list entry n = (i, j, p)."""
    cdef Py_ssize_t n, a, b, row, p
    cdef Py_ssize_t nnz = idx.shape[0]
    cdef Py_ssize_t pre = Y.shape[0]
    cdef Py_ssize_t post = Y.shape[2]
    cdef double v
    with nogil:
        for a in range(pre):
            for n in range(nnz):
                row = idx[n, 0] * m + idx[n, 1]
                p = idx[n, 2]
                v = val[n]
                for b in range(post):
                    out[a, row, b] += v * Y[a, p, b]


def factored_contraction(const double[:, ::1] coeffs, const Py_ssize_t[:, ::1] idx,
                         const double[::1] val, const Py_ssize_t[::1] offsets,
                         Py_ssize_t m, const Py_ssize_t[::1] perm,
                         double[::1] work_a, double[::1] work_b, double[:, ::1] out):
    """Contract each coefficient row with a product of sparse 1D triple tables.

    Axis ``b`` uses list entries ``offsets[b]:offsets[b+1]`` of ``idx``/``val``.
    After step ``b`` the work tensor has flat index ``p_hi * (m^2)^(b+1) + pairs``
    where ``pairs`` enumerates (k, l) pairs of the processed axes.  ``perm``
    maps the final pair-ordered tensor onto the (k, l) block layout.
    """
    cdef Py_ssize_t D = offsets.shape[0] - 1
    cdef Py_ssize_t B = coeffs.shape[0]
    cdef Py_ssize_t ntot = coeffs.shape[1]
    cdef Py_ssize_t nn = out.shape[1]
    cdef Py_ssize_t item, b, n, hi, nhi, lo, nlo, row, p, q, src, dst, size_out
    cdef double v
    cdef double* cur
    cdef double* nxt
    cdef double* tmp
    with nogil:
        for item in range(B):
            cur = &work_a[0]
            nxt = &work_b[0]
            for q in range(ntot):
                cur[q] = coeffs[item, q]
            nlo = 1
            nhi = ntot
            for b in range(D):
                nhi = nhi // m
                size_out = nhi * nlo * m * m
                memset(nxt, 0, size_out * sizeof(double))
                for hi in range(nhi):
                    for n in range(offsets[b], offsets[b + 1]):
                        row = idx[n, 0] * m + idx[n, 1]
                        p = idx[n, 2]
                        v = val[n]
                        src = (hi * m + p) * nlo
                        dst = (hi * m * m + row) * nlo
                        for lo in range(nlo):
                            nxt[dst + lo] += v * cur[src + lo]
                nlo = nlo * m * m
                tmp = cur
                cur = nxt
                nxt = tmp
            for q in range(nn):
                out[item, perm[q]] = cur[q]


def expand_face_blocks(const double[:, ::1] H, const double[:, ::1] ek, const double[:, ::1] el,
                       Py_ssize_t pk, Py_ssize_t qk, double[:, ::1] out):
    """Insert the face-normal factor ek[i] * el[j] into every reduced block.

    ``H[b]`` is indexed (p, q, p', q') and ``out[b]`` (p, i, q, p', j, q') with
    i, j running over the face-normal axis of length m.
    """
    cdef Py_ssize_t nb = H.shape[0]
    cdef Py_ssize_t m = ek.shape[1]
    cdef Py_ssize_t n = pk * m * qk
    cdef Py_ssize_t b, p, i, q, p2, j, q2, row, col, src
    cdef double fi, f
    with nogil:
        for b in range(nb):
            for p in range(pk):
                for i in range(m):
                    fi = ek[b, i]
                    for q in range(qk):
                        row = ((p * m + i) * qk + q) * n
                        for p2 in range(pk):
                            for j in range(m):
                                f = fi * el[b, j]
                                col = row + (p2 * m + j) * qk
                                src = ((p * qk + q) * pk + p2) * qk
                                for q2 in range(qk):
                                    out[b, col + q2] = H[b, src + q2] * f
