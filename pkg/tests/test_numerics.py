import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pdednn.errors import ConvergenceError, DimensionError, NumericalError, SingularMatrixError
from pdednn.numerics import as_csr, dense_solve, dot, gemm, sparse_solve, spmv, svd


def test_svd_identity():
    res = svd(np.eye(3))
    np.testing.assert_allclose(res.s, [1.0, 1.0, 1.0])


def test_svd_rank_one():
    a = np.array([2.0, 0.0, 0.0])
    b = np.array([0.0, 3.0, 0.0, 0.0])
    res = svd(np.outer(a, b))
    assert res.s[0] == pytest.approx(6.0)
    assert np.all(res.s[1:] < 1e-12)


def test_svd_reconstruction_and_orthonormality(rng):
    m = rng.standard_normal((50, 20))
    res = svd(m)
    assert np.linalg.norm(res.reconstruct() - m) <= 1e-10 * np.linalg.norm(m)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(20), atol=1e-10)
    np.testing.assert_allclose(res.vt @ res.vt.T, np.eye(20), atol=1e-10)
    assert np.all(np.diff(res.s) <= 0) and np.all(res.s >= 0)


def test_svd_rejects_nonfinite():
    with pytest.raises(NumericalError):
        svd(np.array([[1.0, np.nan]]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_svd_property_reconstruction(m):
    res = svd(m)
    assert np.linalg.norm(res.reconstruct() - m) <= 1e-10 * max(np.linalg.norm(m), 1e-300) + 1e-300
    assert np.all(np.diff(res.s) <= 1e-12 * max(res.s[0], 1.0))


def test_dense_solve_basic():
    np.testing.assert_allclose(dense_solve(np.eye(2), [1.0, 2.0]), [1.0, 2.0])
    np.testing.assert_allclose(dense_solve(np.diag([2.0, 4.0]), [2.0, 4.0]), [1.0, 1.0])


def test_dense_solve_residual(rng):
    a = rng.standard_normal((10, 10)) + 10 * np.eye(10)
    b = rng.standard_normal(10)
    x = dense_solve(a, b)
    assert np.linalg.norm(a @ x - b) <= 1e-10 * (np.linalg.norm(a) * np.linalg.norm(x) + np.linalg.norm(b))


def test_dense_solve_singular():
    with pytest.raises(SingularMatrixError):
        dense_solve(np.array([[1.0, 2.0], [2.0, 4.0]]), [1.0, 1.0])


def test_dense_solve_dimension():
    with pytest.raises(DimensionError):
        dense_solve(np.eye(3), np.ones(2))


def test_sparse_solve_identity(rng):
    b = rng.standard_normal(6)
    np.testing.assert_allclose(sparse_solve(sp.identity(6, format="csr"), b), b)


def test_sparse_solve_laplacian_1d():
    a = sp.diags([-np.ones(4), 2 * np.ones(5), -np.ones(4)], [-1, 0, 1], format="csr")
    b = np.ones(5)
    x = sparse_solve(a, b, tol=1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(a.toarray(), b), rtol=1e-10)


def test_sparse_solve_nonsymmetric_fem(advdiff8):
    sysm = advdiff8.system(np.array([0.7, 0.3]))
    u = sysm.solve(tol=1e-10)
    assert sysm.residual(u) <= 1e-10


def test_sparse_solve_iteration_cap(rng):
    n = 200
    a = sp.random(n, n, density=0.05, random_state=1, format="csr") + sp.identity(n) * 1e-3
    with pytest.raises(ConvergenceError) as info:
        sparse_solve(a, rng.standard_normal(n), tol=1e-14, max_iters=2)
    assert info.value.residual > 1e-14
    assert info.value.iterations >= 2


def test_sparse_solve_zero_rhs():
    np.testing.assert_array_equal(sparse_solve(sp.identity(3, format="csr") * 2, np.zeros(3)), np.zeros(3))


def test_products(rng):
    v = rng.standard_normal(5)
    np.testing.assert_array_equal(spmv(sp.identity(5, format="csr"), v), v)
    np.testing.assert_array_equal(spmv(sp.csr_matrix((5, 5)), v), np.zeros(5))
    a = rng.standard_normal((7, 5))
    b = rng.standard_normal((5, 3))
    naive = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                naive[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(gemm(a, b), naive, atol=1e-13)
    assert dot(v, v) == pytest.approx(float(np.sum(v * v)))


def test_product_dimension_errors(rng):
    with pytest.raises(DimensionError):
        gemm(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        spmv(sp.identity(3, format="csr"), np.ones(4))
    with pytest.raises(DimensionError):
        dot(np.ones(3), np.ones(4))


def test_as_csr_canonical():
    m = as_csr(sp.coo_matrix(([1.0, 2.0, 3.0], ([0, 0, 1], [1, 1, 0])), shape=(2, 2)))
    assert np.all(np.diff(m.indptr) >= 0)
    for r in range(2):
        cols = m.indices[m.indptr[r]:m.indptr[r + 1]]
        assert np.all(np.diff(cols) > 0)
    assert m[0, 1] == 3.0
