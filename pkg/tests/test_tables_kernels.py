import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ridg import kernels
from ridg.basis import BasisSet, gauss_rule
from ridg.predictor.tables import build_tables, contract_triple, load_or_build


def brute_volume(mdeg, d, axis, npts):
    D = d + 1
    b = BasisSet(D, mdeg)
    r = gauss_rule(npts, D)
    V = b.values(r.points)
    dV = b.derivatives(r.points, axis)
    return 2.0 / 2**D * np.einsum("q,qk,ql,qp->klp", r.weights, dV, V, V)


@pytest.mark.parametrize("mdeg,d", [(1, 1), (2, 1), (3, 1), (1, 2), (2, 2), (1, 3)])
def test_volume_tensor_exact(mdeg, d):
    t = build_tables(mdeg, d)
    for a in range(d):
        # polynomial degree 3*Mdeg per axis; Mdeg+2 points suffice for Mdeg <= 3
        ref = brute_volume(mdeg, d, a, mdeg + 2)
        np.testing.assert_allclose(t.volume_tensor_dense(a), ref, atol=1e-13)


def test_volume_tensor_exact_high_degree():
    ref = brute_volume(5, 1, 0, 9)
    np.testing.assert_allclose(build_tables(5, 1).volume_tensor_dense(0), ref, atol=1e-13)


def test_sparsity_lists_have_no_zeros_and_match_rules():
    for mdeg in range(0, 8):
        t = build_tables(mdeg, 1)
        for idx, val in (t.t1_list, t.d1_list):
            assert np.all(val != 0)
        i, j, k = t.t1_list[0].T
        assert np.all((i + j + k) % 2 == 0)
        i, j, k = t.d1_list[0].T
        assert np.all((i + j + k) % 2 == 1) and np.all(np.abs(j - k) <= i - 1)


def test_nnz_mdeg1_d1_brute_force():
    ref = brute_volume(1, 1, 0, 3)
    t = build_tables(1, 1)
    assert t.nnz_volume(0) == int(np.count_nonzero(np.abs(ref) > 1e-14))
    assert len(t.volume_nonzeros(0)[1]) == t.nnz_volume(0)


def test_face_tensor_exact():
    mdeg, d = 2, 2
    t = build_tables(mdeg, d)
    D = d + 1
    b = BasisSet(D, mdeg)
    r = gauss_rule(mdeg + 2, D - 1)
    for axis in range(d):
        for sides in [(1, 1, 1), (1, -1, -1), (-1, 1, 1)]:
            def at(s):
                pts = np.insert(r.points, axis, float(s), axis=1)
                return b.values(pts)
            ref = np.einsum("q,qk,ql,qp->klp", r.weights / 2 ** (D - 1), at(sides[0]), at(sides[1]), at(sides[2]))
            alpha, beta = t.face_nonzeros(axis, sides)
            dense = np.zeros((t.theta_t,) * 3)
            np.add.at(dense, tuple(alpha.T), beta)
            np.testing.assert_allclose(dense, ref, atol=1e-13)


def test_time_and_causal_matrices():
    mdeg, d = 2, 2
    t = build_tables(mdeg, d)
    assert t.Mplus[0, 0] == pytest.approx(1.0)
    assert np.all(t.K[0] == 0)
    D = d + 1
    st_basis, sp_basis = BasisSet(D, mdeg), BasisSet(d, mdeg)
    rs = gauss_rule(mdeg + 2, d)
    rst = gauss_rule(mdeg + 2, D)
    wsp = rs.weights / 2**d

    def at_time(tau):
        return st_basis.values(np.column_stack([rs.points, np.full(len(rs.points), tau)]))

    # spatially normalized slab integrals: (1/2^d) int_space, plain int over tau
    Mp = np.einsum("q,qk,ql->kl", wsp, at_time(1.0), at_time(1.0))
    K = np.einsum("q,qk,ql->kl", rst.weights / 2**d, st_basis.derivatives(rst.points, d),
                  st_basis.values(rst.points))
    C = np.einsum("q,qk,qm->km", wsp, at_time(-1.0), sp_basis.values(rs.points))
    np.testing.assert_allclose(t.Mplus, Mp, atol=1e-13)
    np.testing.assert_allclose(t.K, K, atol=1e-13)
    np.testing.assert_allclose(t.C, C, atol=1e-13)


def dense_contract(coeffs, factors, m):
    D = len(factors)
    dense = []
    for idx, val in factors:
        X = np.zeros((m, m, m))
        X[tuple(idx.T)] = val
        dense.append(X)
    n = m**D
    J = np.zeros((coeffs.shape[0], n, n))
    for k in range(n):
        ks = [(k // m**a) % m for a in range(D)]
        for l in range(n):
            ls = [(l // m**a) % m for a in range(D)]
            w = np.ones(1)
            for a in range(D):
                w = np.multiply.outer(dense[a][ks[a], ls[a]], w).ravel()
            J[:, k, l] = coeffs @ w
    return J


@pytest.mark.parametrize("mdeg,d", [(1, 1), (2, 1), (1, 2)])
def test_contraction_backends_agree_with_dense(mdeg, d):
    t = build_tables(mdeg, d)
    m = mdeg + 1
    factors = [t.axis_factor(b, 0) for b in range(d + 1)]
    coeffs = np.random.default_rng(3).standard_normal((3, m ** (d + 1)))
    ref = dense_contract(coeffs, factors, m)
    np.testing.assert_allclose(kernels.contract_numpy(coeffs, factors, m), ref, atol=1e-13)
    if kernels.compiled_available():
        np.testing.assert_allclose(kernels.contract_compiled(coeffs, factors, m), ref, atol=1e-13)
    np.testing.assert_allclose(contract_triple(coeffs[0], factors, m), ref[0], atol=1e-13)


@pytest.mark.skipif(not kernels.compiled_available(), reason="compiled kernels not built")
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_compiled_matches_numpy(mdeg, d, seed):
    t = load_or_build(mdeg, d)
    m = mdeg + 1
    rng = np.random.default_rng(seed)
    factors = [t.axis_factor(b, int(rng.integers(d))) for b in range(d + 1)]
    coeffs = rng.standard_normal((2, m ** (d + 1)))
    np.testing.assert_allclose(kernels.contract_compiled(coeffs, factors, m),
                               kernels.contract_numpy(coeffs, factors, m), atol=1e-12)
    Y = rng.standard_normal((3, m, 4))
    idx, val = t.t1_list
    np.testing.assert_allclose(kernels.mode_product_compiled(Y, idx, val, m),
                               kernels.mode_product_numpy(Y, idx, val, m), atol=1e-13)


@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_face_block_expansion(pk, qk, m, seed):
    rng = np.random.default_rng(seed)
    nb = 2
    H = rng.standard_normal((nb, pk * qk * pk * qk))
    ek, el = rng.standard_normal((nb, m)), rng.standard_normal((nb, m))
    ref = np.einsum("bpqrs,bi,bj->bpiqrjs", H.reshape(nb, pk, qk, pk, qk), ek, el)
    n = pk * m * qk
    np.testing.assert_allclose(kernels.expand_face_blocks_numpy(H, ek, el, pk, qk), ref.reshape(nb, n, n))
    if kernels.compiled_available():
        np.testing.assert_allclose(kernels.expand_face_blocks_compiled(H, ek, el, pk, qk),
                                   ref.reshape(nb, n, n))


def test_pure_python_switch():
    env = dict(os.environ, RIDG_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from ridg import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_disk_cache_roundtrip_and_corruption(tmp_path):
    from ridg.predictor import tables as tmod

    tmod._cache.clear()
    a = load_or_build(2, 2, cache_dir=tmp_path)
    files = list(tmp_path.glob("qqf_tables_v*_m2_d2.npz"))
    assert len(files) == 1
    tmod._cache.clear()
    b = load_or_build(2, 2, cache_dir=tmp_path)
    np.testing.assert_array_equal(a.T1, b.T1)
    files[0].write_bytes(b"garbage")
    tmod._cache.clear()
    c = load_or_build(2, 2, cache_dir=tmp_path)
    np.testing.assert_array_equal(a.D1, c.D1)
    tmod._cache.clear()


def test_build_tables_validation():
    with pytest.raises(ValueError):
        build_tables(-1, 1)
    with pytest.raises(ValueError):
        build_tables(2, 4)
