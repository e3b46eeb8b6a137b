# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled batched reduced-solve kernels (LAPACK getrf/getrs per sample)."""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy
from scipy.linalg.cython_lapack cimport dgetrf, dgetrs

cnp.import_array()

BACKEND = "compiled"


cdef class BatchFactor:
    """LU factors of a batch, stored as column-major blocks."""

    cdef public object lu
    cdef public object piv

    def __init__(self, lu, piv):
        self.lu = lu
        self.piv = piv


def factor_solve(mats, rhs):
    """Solve ``mats[b] x[b] = rhs[b]`` for every sample.

    Exactly singular matrices get a diagonal shift of ``1e-10 * trace / n``.
    """
    cdef double[:, :, ::1] a = np.ascontiguousarray(mats, dtype=np.float64)
    cdef Py_ssize_t nb = a.shape[0]
    cdef int n = <int>a.shape[1]
    # lu[b] read in C order is A^T, i.e. A in Fortran order
    lu_arr = np.empty((nb, n, n), dtype=np.float64)
    x_arr = np.array(rhs, dtype=np.float64, order="C", copy=True)
    piv_arr = np.empty((nb, n), dtype=np.intc)
    shifted_arr = np.zeros(nb, dtype=bool)
    cdef double[:, :, ::1] lu = lu_arr
    cdef double[:, ::1] x = x_arr
    cdef int[:, ::1] piv = piv_arr
    cdef Py_ssize_t b, i, j
    cdef int info = 0, nrhs = 1
    cdef char trans = b'N'
    cdef double tr, shift
    for b in range(nb):
        for i in range(n):
            for j in range(n):
                lu[b, j, i] = a[b, i, j]
        dgetrf(&n, &n, &lu[b, 0, 0], &n, &piv[b, 0], &info)
        if info > 0:
            tr = 0.0
            for i in range(n):
                tr += a[b, i, i]
            shift = 1e-10 * (tr / n if tr != 0.0 else 1.0)
            for i in range(n):
                for j in range(n):
                    lu[b, j, i] = a[b, i, j]
                lu[b, i, i] += shift
            dgetrf(&n, &n, &lu[b, 0, 0], &n, &piv[b, 0], &info)
            shifted_arr[b] = True
        if info != 0:
            raise ArithmeticError(f"reduced system {b} stays singular after shifting")
        dgetrs(&trans, &n, &nrhs, &lu[b, 0, 0], &n, &piv[b, 0], &x[b, 0], &n, &info)
    return x_arr, BatchFactor(lu_arr, piv_arr), shifted_arr


def solve_transpose(BatchFactor factor, rhs):
    """Solve ``mats[b]^T y[b] = rhs[b]`` with the stored LU factors."""
    cdef double[:, :, ::1] lu = factor.lu
    cdef int[:, ::1] piv = factor.piv
    y_arr = np.array(rhs, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] y = y_arr
    cdef Py_ssize_t nb = lu.shape[0], b
    cdef int n = <int>lu.shape[1], nrhs = 1, info = 0
    cdef char trans = b'T'
    for b in range(nb):
        dgetrs(&trans, &n, &nrhs, &lu[b, 0, 0], &n, &piv[b, 0], &y[b, 0], &n, &info)
    return y_arr
