"""Dense and sparse linear-algebra kernels.

Dense matrices are plain ``numpy.ndarray`` objects of dtype float64; sparse
operators are ``scipy.sparse.csr_matrix`` instances in canonical form (sorted
column indices, no duplicates).  Everything here is a pure function of its
inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack

from .errors import ConvergenceError, DimensionError, NumericalError, SingularMatrixError

__all__ = [
    "SvdResult",
    "as_csr",
    "dense_solve",
    "dot",
    "gemm",
    "sparse_solve",
    "spmv",
    "svd",
]


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(s) @ vt``."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def _as_dense(m, name="matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be two-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name} has non-finite entries")
    return a


def as_csr(a) -> sp.csr_matrix:
    """Return ``a`` as a canonical CSR matrix (sorted, duplicate free, finite)."""
    m = sp.csr_matrix(a, dtype=np.float64, copy=True)
    m.sum_duplicates()
    m.sort_indices()
    if not np.all(np.isfinite(m.data)):
        raise NumericalError("sparse matrix has non-finite values")
    return m


def svd(m) -> SvdResult:
    """Thin singular value decomposition.

    Backed by LAPACK's divide-and-conquer driver; singular values come back
    sorted in non-increasing order.

    Raises
    ------
    NumericalError
        If the LAPACK iteration fails to converge.
    """
    a = _as_dense(m)
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError("svd needs at least one row and one column")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd can fail where the QR-iteration driver still converges
        try:
            from scipy.linalg import svd as _svd

            u, s, vt = _svd(a, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD did not converge: {exc}") from exc
    return SvdResult(u, s, vt)


def dense_solve(a, b) -> np.ndarray:
    """Solve ``a x = b`` by LU factorization with partial pivoting.

    Parameters
    ----------
    a : (n, n) array_like
    b : (n,) or (n, k) array_like

    Raises
    ------
    SingularMatrixError
        If an exactly zero pivot is encountered.
    """
    a = _as_dense(a, "a")
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"dense_solve needs a square matrix, got {a.shape}")
    if b.shape[0] != n:
        raise DimensionError(f"rhs length {b.shape[0]} does not match matrix size {n}")
    lu, piv, info = lapack.dgetrf(a)
    if info > 0:
        raise SingularMatrixError(f"exactly singular pivot at position {info - 1}")
    if info < 0:
        raise NumericalError(f"dgetrf rejected argument {-info}")
    x, info = lapack.dgetrs(lu, piv, b)
    if info != 0:
        raise NumericalError(f"dgetrs failed with info={info}")
    return x


def spmv(a, v) -> np.ndarray:
    """Sparse (or dense) matrix-vector product with a shape check."""
    v = np.asarray(v, dtype=np.float64)
    if a.shape[1] != v.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by vector of length {v.shape[0]}")
    return np.asarray(a @ v, dtype=np.float64)


def gemm(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def dot(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"dot needs equal-length vectors, got {u.shape} and {v.shape}")
    return float(u @ v)


def sparse_solve(a, b, tol=1e-10, max_iters=None, x0=None) -> np.ndarray:
    """Jacobi-preconditioned BiCGStab for general (nonsymmetric) systems.

    Convergence is declared on the true relative residual
    ``||b - a x|| / ||b|| <= tol``; the recursively updated residual is only
    used to decide when to check it.  On breakdown the iteration restarts from
    the current iterate.

    Parameters
    ----------
    a : sparse matrix, shape (n, n)
    b : (n,) array_like
    tol : float
        Target relative residual.
    max_iters : int, optional
        Iteration cap, default ``10 * n``.
    x0 : (n,) array_like, optional
        Initial guess, default zero.

    Raises
    ------
    ConvergenceError
        When the cap is reached; carries the final relative residual.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"sparse_solve needs a square matrix, got {a.shape}")
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (n,):
        raise DimensionError(f"rhs shape {b.shape} does not match matrix size {n}")
    if max_iters is None:
        max_iters = 10 * n
    a = sp.csr_matrix(a)

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)

    diag = a.diagonal()
    dinv = np.where(diag != 0.0, 1.0 / np.where(diag != 0.0, diag, 1.0), 1.0)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - a @ x
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > tol and it < max_iters:
        # (re)start
        r_hat = r.copy()
        rho_old = alpha = omega = 1.0
        v = np.zeros(n)
        p = np.zeros(n)
        while it < max_iters:
            it += 1
            rho = r_hat @ r
            if rho == 0.0 or omega == 0.0:
                break
            beta = (rho / rho_old) * (alpha / omega)
            p = r + beta * (p - omega * v)
            p_hat = dinv * p
            v = a @ p_hat
            denom = r_hat @ v
            if denom == 0.0:
                break
            alpha = rho / denom
            s = r - alpha * v
            x += alpha * p_hat
            if np.linalg.norm(s) <= tol * bnorm * 0.5:
                r = s
                break
            s_hat = dinv * s
            t = a @ s_hat
            tt = t @ t
            if tt == 0.0:
                r = s
                break
            omega = (t @ s) / tt
            x += omega * s_hat
            r = s - omega * t
            rho_old = rho
            if np.linalg.norm(r) <= tol * bnorm * 0.5:
                break
        r = b - a @ x
        res = np.linalg.norm(r) / bnorm
        if not np.isfinite(res):
            raise ConvergenceError("BiCGStab produced non-finite iterates", res, it)
    if res > tol:
        raise ConvergenceError(
            f"BiCGStab stopped after {it} iterations at relative residual {res:.3e}",
            res,
            it,
        )
    return x
