"""Pure-numpy implementation of the batched reduced-solve kernels."""

import numpy as np

BACKEND = "python"


def _shift(a):
    n = a.shape[-1]
    tr = np.trace(a)
    return 1e-10 * (tr / n if tr != 0.0 else 1.0)


class BatchFactor:
    __slots__ = ("mats",)

    def __init__(self, mats):
        self.mats = mats


def factor_solve(mats, rhs):
    """Solve ``mats[b] x[b] = rhs[b]`` for every sample.

    Exactly singular matrices get a diagonal shift of ``1e-10 * trace / n``.

    Returns
    -------
    x : (B, N) array
    factor : opaque object consumed by :func:`solve_transpose`
    shifted : (B,) bool array
    """
    mats = np.array(mats, dtype=np.float64, copy=True)
    rhs = np.asarray(rhs, dtype=np.float64)
    shifted = np.zeros(mats.shape[0], dtype=bool)
    try:
        x = np.linalg.solve(mats, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        x = np.empty_like(rhs)
        for b in range(mats.shape[0]):
            try:
                x[b] = np.linalg.solve(mats[b], rhs[b])
            except np.linalg.LinAlgError:
                mats[b] += _shift(mats[b]) * np.eye(mats.shape[1])
                shifted[b] = True
                x[b] = np.linalg.solve(mats[b], rhs[b])
    return x, BatchFactor(mats), shifted


def solve_transpose(factor, rhs):
    """Solve ``mats[b]^T y[b] = rhs[b]`` reusing the forward factorization."""
    rhs = np.asarray(rhs, dtype=np.float64)
    return np.linalg.solve(np.swapaxes(factor.mats, 1, 2), rhs[..., None])[..., 0]
