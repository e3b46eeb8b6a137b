"""Reduced-basis machinery: POD, Galerkin projection, (M)DEIM and the online solver."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, NumericalError
from .numerics import dense_solve, svd


@dataclass(frozen=True)
class ReducedBasis:
    """Orthonormal POD basis ``V`` plus the full singular spectrum it came from."""

    basis: np.ndarray  # (n, N)
    singular_values: np.ndarray
    tol: float

    @property
    def size(self) -> int:
        return self.basis.shape[1]


def tail_energy(singular_values) -> np.ndarray:
    """``t[j] = sum_{i > j} s_i^2 / sum_i s_i^2`` for ``j = 0..len(s)``.

    ``t[j]`` is the relative energy left out by keeping ``j`` modes.
    """
    e = np.asarray(singular_values, dtype=np.float64) ** 2
    total = e.sum()
    rev = np.concatenate([np.cumsum(e[::-1])[::-1], [0.0]])
    return rev / total


def pod_size(singular_values, tol: float) -> int:
    """Smallest ``N >= 1`` whose discarded energy fraction is at most ``tol**2``."""
    t = tail_energy(singular_values)
    hits = np.flatnonzero(t[1:] <= tol * tol)
    return int(hits[0]) + 1


def pod(snapshots, tol: float) -> ReducedBasis:
    s = np.asarray(snapshots, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if not 0.0 < tol < 1.0:
        raise ValueError(f"POD tolerance must lie in (0, 1), got {tol}")
    if not np.any(s):
        raise NumericalError("snapshot matrix is identically zero")
    res = svd(s)
    n = pod_size(res.s, tol)
    return ReducedBasis(np.ascontiguousarray(res.u[:, :n]), res.s.copy(), float(tol))


def galerkin_project(op, basis):
    """``V^T A V`` for a matrix or ``V^T f`` for a vector."""
    v = basis.basis if isinstance(basis, ReducedBasis) else np.asarray(basis, dtype=np.float64)
    if op.shape[0] != v.shape[0]:
        raise DimensionError(f"operator of shape {op.shape} vs basis with {v.shape[0]} rows")
    if sp.issparse(op):
        if op.shape[1] != v.shape[0]:
            raise DimensionError(f"operator of shape {op.shape} is not square in the basis space")
        return v.T @ np.asarray(op @ v)
    op = np.asarray(op, dtype=np.float64)
    if op.ndim == 1:
        return v.T @ op
    if op.shape[1] != v.shape[0]:
        raise DimensionError(f"operator of shape {op.shape} is not square in the basis space")
    return v.T @ op @ v


def reconstruct(basis, u_n, lift=None) -> np.ndarray:
    v = basis.basis if isinstance(basis, ReducedBasis) else np.asarray(basis)
    u_n = np.asarray(u_n, dtype=np.float64)
    if u_n.shape[0] != v.shape[1]:
        raise DimensionError(f"reduced vector of length {u_n.shape[0]} for basis of size {v.shape[1]}")
    out = v @ u_n
    if lift is not None:
        out = out + (lift if out.ndim == 1 else lift[:, None])
    return out


# --------------------------------------------------------------------- (M)DEIM


@dataclass(frozen=True)
class DeimModel:
    """Empirical interpolation of a vector- or matrix-valued family.

    ``basis`` holds ``m`` orthonormal modes; a target ``w`` is approximated by
    ``basis @ theta`` where ``theta`` solves ``basis[indices] @ theta = w[indices]``.
    For matrix targets the vectors are the CSR value arrays over the shared
    sparsity ``pattern = (indptr, indices, shape)``.
    """

    basis: np.ndarray
    indices: np.ndarray
    singular_values: np.ndarray
    kind: str = "vector"
    pattern: tuple | None = None

    @property
    def size(self) -> int:
        return self.basis.shape[1]

    @property
    def interpolation_matrix(self) -> np.ndarray:
        return self.basis[self.indices]

    def truncate(self, m: int) -> "DeimModel":
        """Model with the first ``m`` modes; greedy selection makes this nested."""
        if not 1 <= m <= self.size:
            raise ValueError(f"cannot truncate a {self.size}-term model to {m}")
        return replace(self, basis=self.basis[:, :m].copy(), indices=self.indices[:m].copy())

    def coefficients(self, probe) -> np.ndarray:
        return deim_online_coeffs(self, probe)

    def values(self, target) -> np.ndarray:
        """Flat value vector of a target (CSR data for matrix models)."""
        if self.kind == "matrix":
            m = sp.csr_matrix(target)
            _check_pattern(m, self.pattern)
            return m.data
        return np.asarray(target, dtype=np.float64)

    def probe(self, target) -> np.ndarray:
        return self.values(target)[self.indices]

    def approximate(self, target) -> np.ndarray:
        """Flat interpolant of ``target``."""
        return self.basis @ self.coefficients(self.probe(target))

    def term(self, q: int):
        """The ``q``-th affine component, as a CSR matrix for matrix models."""
        col = self.basis[:, q]
        if self.kind == "matrix":
            indptr, indices, shape = self.pattern
            return sp.csr_matrix((col.copy(), indices, indptr), shape=shape)
        return col.copy()


def _check_pattern(m: sp.csr_matrix, pattern):
    indptr, indices, shape = pattern
    if m.shape != tuple(shape) or not (
        np.array_equal(m.indptr, indptr) and np.array_equal(m.indices, indices)
    ):
        raise DimensionError("matrix sparsity pattern differs from the reference pattern")


def greedy_indices(basis: np.ndarray) -> np.ndarray:
    """Classical DEIM point selection (residual maximisation, lowest index on ties)."""
    n, m = basis.shape
    idx = [int(np.argmax(np.abs(basis[:, 0])))]
    for k in range(1, m):
        p = np.asarray(idx)
        c = dense_solve(basis[p, :k], basis[p, k])
        r = basis[:, k] - basis[:, :k] @ c
        idx.append(int(np.argmax(np.abs(r))))
    return np.asarray(idx, dtype=np.int64)


def deim_offline(snapshots, m: int, kind="vector", pattern=None, rank_tol=1e-13) -> DeimModel:
    """Build an ``m``-term DEIM model from snapshot columns.

    Raises
    ------
    NumericalError
        If the snapshots span fewer than ``m`` numerically independent
        directions; the message reports the achievable ``m``.
    """
    s = np.asarray(snapshots, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if m < 1:
        raise ValueError("m must be at least 1")
    res = svd(s)
    rank = int(np.sum(res.s > rank_tol * res.s[0])) if res.s[0] > 0 else 0
    if rank < m:
        raise NumericalError(f"snapshots have numerical rank {rank}; at most m={rank} terms achievable")
    basis = np.ascontiguousarray(res.u[:, :m])
    idx = greedy_indices(basis)
    if len(set(idx.tolist())) != m:
        raise NumericalError("DEIM selected repeated indices")
    cond = np.linalg.cond(basis[idx])
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalError(f"DEIM interpolation system is singular (cond={cond:.2e})")
    return DeimModel(basis, idx, res.s.copy(), kind, pattern)


def deim_offline_tol(snapshots, tol: float, **kwargs) -> DeimModel:
    """DEIM with the number of terms picked by the POD energy criterion."""
    s = np.asarray(snapshots, dtype=np.float64)
    m = pod_size(svd(s).s, tol)
    return deim_offline(s, m, **kwargs)


def mdeim_offline(matrices, m: int) -> DeimModel:
    """MDEIM over the nonzero values of matrices sharing one sparsity pattern."""
    mats = [sp.csr_matrix(a) for a in matrices]
    if not mats:
        raise ValueError("need at least one snapshot matrix")
    ref = mats[0]
    pattern = (ref.indptr.copy(), ref.indices.copy(), ref.shape)
    for a in mats[1:]:
        _check_pattern(a, pattern)
    data = np.column_stack([a.data for a in mats])
    return deim_offline(data, m, kind="matrix", pattern=pattern)


def deim_online_coeffs(model: DeimModel, probe) -> np.ndarray:
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape != (model.size,):
        raise DimensionError(f"probe of shape {probe.shape} for a {model.size}-term model")
    return dense_solve(model.interpolation_matrix, probe)


# ---------------------------------------------------------- affine operator set


def widen_ranges(values, frac=0.1, positive=None):
    """Per-column ``(lo, hi)`` of ``values`` widened by ``frac`` of the span.

    Constant columns are widened by ``frac * max(|v|, 1)``.  Columns flagged in
    ``positive`` keep their lower bound at no less than half the observed
    minimum, so strictly positive quantities stay positive.
    """
    v = np.atleast_2d(np.asarray(values, dtype=np.float64))
    lo, hi = v.min(axis=0), v.max(axis=0)
    span = hi - lo
    pad = np.where(span > 0, frac * span, frac * np.maximum(np.abs(lo), 1.0))
    wlo, whi = lo - pad, hi + pad
    if positive is not None:
        positive = np.asarray(positive, dtype=bool)
        wlo = np.where(positive & (lo > 0), np.maximum(wlo, 0.5 * lo), wlo)
    return wlo, whi


@dataclass(frozen=True)
class AffineOperatorSet:
    """Frozen reduced arrays ``A_N^q`` (Q_a, N, N) and ``f_N^q`` (Q_f, N)."""

    matrices: np.ndarray
    vectors: np.ndarray
    lo: np.ndarray  # (Q_a + Q_f,)
    hi: np.ndarray
    provenance: str = "exact-affine"

    def __post_init__(self):
        if self.matrices.ndim != 3 or self.vectors.ndim != 2:
            raise DimensionError("matrices must be (Q_a, N, N) and vectors (Q_f, N)")
        n = self.matrices.shape[1]
        if self.matrices.shape[2] != n or self.vectors.shape[1] != n:
            raise DimensionError("all reduced blocks must share N")
        if self.lo.shape != (self.q_a + self.q_f,) or np.any(self.lo >= self.hi):
            raise DimensionError("coefficient ranges must be non-degenerate, one per coefficient")

    @property
    def q_a(self) -> int:
        return self.matrices.shape[0]

    @property
    def q_f(self) -> int:
        return self.vectors.shape[0]

    @property
    def n(self) -> int:
        return self.matrices.shape[1]


def build_affine_set(a_terms, f_terms, basis, thetas, provenance="exact-affine", positive=None):
    """Project full-order affine terms and attach widened coefficient ranges.

    ``thetas`` is an ``(n_samples, Q_a + Q_f)`` array of coefficient values on
    the training set.
    """
    mats = np.stack([galerkin_project(a, basis) for a in a_terms])
    vecs = np.stack([galerkin_project(f, basis) for f in f_terms])
    lo, hi = widen_ranges(thetas, positive=positive)
    return AffineOperatorSet(mats, vecs, lo, hi, provenance)


def rb_assemble(theta_a, theta_f, ops: AffineOperatorSet):
    theta_a = np.asarray(theta_a, dtype=np.float64)
    theta_f = np.asarray(theta_f, dtype=np.float64)
    if theta_a.shape != (ops.q_a,) or theta_f.shape != (ops.q_f,):
        raise DimensionError(
            f"expected {ops.q_a} + {ops.q_f} coefficients, got {theta_a.shape} and {theta_f.shape}"
        )
    return np.tensordot(theta_a, ops.matrices, axes=1), theta_f @ ops.vectors


def rb_solve(a_n, f_n) -> np.ndarray:
    return dense_solve(a_n, f_n)
