"""P1 finite elements on structured triangulations of the unit square.

Two parametrized elliptic benchmarks are provided:

* :class:`AdvectionDiffusionProblem` -- ``-div(nu grad u) + b(x; alpha).grad u = 0``
  with ``b = sin(alpha) b1 + cos(alpha) b2``, ``u = 0`` on ``x1 = 0``,
  ``u = 1`` on ``x1 = 1`` and homogeneous Neumann data elsewhere.  The operator is
  affine in ``(nu, sin alpha, cos alpha)``.
* :class:`NonaffineDiffusionProblem` -- ``-div(k(x; mu) grad T) = 1`` with a
  Gaussian bump diffusivity ``k = s + exp(-|x - x0|^2 / s) / s``,
  ``T = 1`` on ``y = 0``, ``T = 0`` on the lateral sides and homogeneous
  Neumann data on ``y = 1``.

Variable coefficients are sampled at triangle centroids (one-point rule).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, DomainError, NumericalError
from .numerics import as_csr, sparse_solve

LEFT, RIGHT, BOTTOM, TOP = 1, 2, 4, 8


@dataclass(frozen=True)
class StructuredTriMesh:
    """Uniform mesh of ``(0, 1)^2`` with every cell cut along its main diagonal.

    Node ``k = j * (nx + 1) + i`` sits at ``(i / nx, j / ny)``.
    """

    nx: int
    ny: int
    coords: np.ndarray  # (n_nodes, 2)
    triangles: np.ndarray  # (n_tri, 3), counter-clockwise
    boundary: np.ndarray  # (n_nodes,) bitmask of LEFT/RIGHT/BOTTOM/TOP

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def areas(self) -> np.ndarray:
        p = self.coords[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self) -> np.ndarray:
        c = self.__dict__.get("_centroids")
        if c is None:
            c = self.coords[self.triangles].mean(axis=1)
            c.flags.writeable = False
            object.__setattr__(self, "_centroids", c)
        return c

    def gradients(self) -> np.ndarray:
        """Gradients of the three barycentric functions, shape (n_tri, 3, 2)."""
        p = self.coords[self.triangles]
        area2 = 2.0 * self.areas()
        x, y = p[..., 0], p[..., 1]
        g = np.empty((self.n_triangles, 3, 2))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            g[:, a, 0] = (y[:, b] - y[:, c]) / area2
            g[:, a, 1] = (x[:, c] - x[:, b]) / area2
        return g

    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary)


def build_mesh(nx: int, ny: int) -> StructuredTriMesh:
    if nx < 2 or ny < 2:
        raise ValueError(f"mesh needs at least 2 cells per axis, got ({nx}, {ny})")
    i, j = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    i, j = i.ravel(), j.ravel()
    coords = np.column_stack([i / nx, j / ny])

    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny))
    ci, cj = ci.ravel(), cj.ravel()
    n00 = cj * (nx + 1) + ci
    n10 = n00 + 1
    n01 = n00 + nx + 1
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    tris[0::2] = lower
    tris[1::2] = upper

    tags = np.zeros(coords.shape[0], dtype=np.int64)
    tags[i == 0] |= LEFT
    tags[i == nx] |= RIGHT
    tags[j == 0] |= BOTTOM
    tags[j == ny] |= TOP
    return StructuredTriMesh(nx, ny, coords, tris, tags)


def _assemble(mesh: StructuredTriMesh, local: np.ndarray) -> sp.csr_matrix:
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes
    return as_csr(sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)))


def _sample(coefficient, points: np.ndarray, shape_tail=()) -> np.ndarray:
    if callable(coefficient):
        values = np.asarray(coefficient(points), dtype=np.float64)
    else:
        values = np.asarray(coefficient, dtype=np.float64)
    return np.broadcast_to(values, (points.shape[0],) + shape_tail)


class _StiffnessMap:
    """Linear map from per-triangle diffusivities to CSR stiffness values.

    The pattern keeps every structural slot, so matrices assembled with
    different coefficients share one sparsity pattern.
    """

    def __init__(self, mesh: StructuredTriMesh):
        t = mesh.triangles
        n = mesh.n_nodes
        g = mesh.gradients()
        local = np.einsum("tad,tbd->tab", g, g) * mesh.areas()[:, None, None]
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        keys, slot = np.unique(rows * n + cols, return_inverse=True)
        tri = np.repeat(np.arange(mesh.n_triangles), 9)
        self.map = sp.csr_matrix((local.ravel(), (slot.ravel(), tri)), shape=(keys.size, mesh.n_triangles))
        self.indices = (keys % n).astype(np.int32)
        self.indptr = np.searchsorted(keys // n, np.arange(n + 1)).astype(np.int32)
        self.shape = (n, n)

    def __call__(self, k: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((self.map @ k, self.indices.copy(), self.indptr.copy()), shape=self.shape)


def _stiffness_map(mesh: StructuredTriMesh) -> _StiffnessMap:
    m = mesh.__dict__.get("_stiffness_map")
    if m is None:
        m = _StiffnessMap(mesh)
        object.__setattr__(mesh, "_stiffness_map", m)  # geometry cache on the frozen mesh
    return m


def assemble_stiffness(mesh: StructuredTriMesh, diffusivity=1.0) -> sp.csr_matrix:
    """Stiffness matrix ``int k grad(phi_j) . grad(phi_i)``.

    ``diffusivity`` is a scalar, an array of per-triangle values, or a callable
    mapping an ``(n, 2)`` array of points to ``n`` values; callables are
    evaluated at centroids.
    """
    k = _sample(diffusivity, mesh.centroids())
    bad = np.flatnonzero(~(k > 0))
    if bad.size:
        raise NumericalError(
            f"non-positive diffusivity {k[bad[0]]!r} on triangle {int(bad[0])}"
        )
    m = _stiffness_map(mesh)(np.ascontiguousarray(k, dtype=np.float64))
    if not np.all(np.isfinite(m.data)):
        raise NumericalError("stiffness matrix has non-finite values")
    return m


def assemble_advection(mesh: StructuredTriMesh, velocity) -> sp.csr_matrix:
    """Advection matrix ``int (b . grad(phi_j)) phi_i`` with centroid quadrature."""
    b = _sample(velocity, mesh.centroids(), (2,))
    g = mesh.gradients()
    bg = np.einsum("td,tbd->tb", b, g)  # b . grad(phi_j) per triangle
    w = mesh.areas() / 3.0  # phi_i at the centroid times area
    local = np.broadcast_to((bg * w[:, None])[:, None, :], (mesh.n_triangles, 3, 3))
    return _assemble(mesh, np.ascontiguousarray(local))


def assemble_mass(mesh: StructuredTriMesh) -> sp.csr_matrix:
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = mesh.areas()[:, None, None] * base[None]
    return _assemble(mesh, local)


def assemble_load(mesh: StructuredTriMesh, source=1.0) -> np.ndarray:
    """Load vector ``int f phi_i`` with ``f`` sampled at centroids."""
    f = _sample(source, mesh.centroids())
    contrib = np.repeat((f * mesh.areas() / 3.0)[:, None], 3, axis=1)
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.triangles.ravel(), contrib.ravel())
    return out


def h1_error(u, v, stiffness1, mass) -> float:
    """``sqrt(e^T (K + M) e)`` for ``e = u - v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.shape[0] != stiffness1.shape[0]:
        raise DimensionError("h1_error needs equal-length vectors matching the operators")
    e = u - v
    val = e @ (stiffness1 @ e) + e @ (mass @ e)
    return float(np.sqrt(max(val, 0.0)))


@dataclass
class FomSystem:
    """Assembled full-order system.

    With ``lift is None`` the Dirichlet rows of ``matrix`` are identity rows and
    ``rhs`` carries the boundary values.  Otherwise Dirichlet rows and columns
    are identity, the unknown is homogeneous there and the solution is
    ``x + lift``.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dirichlet_nodes: np.ndarray
    dirichlet_values: np.ndarray
    lift: np.ndarray | None = None

    def solve(self, tol=1e-10, max_iters=None) -> np.ndarray:
        x0 = np.zeros(self.rhs.shape[0])
        if self.lift is None:
            # Dirichlet entries of the iterate stay untouched by BiCGStab when
            # the initial guess already satisfies the identity rows.
            x0[self.dirichlet_nodes] = self.dirichlet_values
        x = sparse_solve(self.matrix, self.rhs, tol=tol, max_iters=max_iters, x0=x0)
        if self.lift is not None:
            x = x + self.lift
        return x

    def residual(self, u) -> float:
        x = u if self.lift is None else u - self.lift
        return float(np.linalg.norm(self.matrix @ x - self.rhs) / np.linalg.norm(self.rhs))


def _replace_rows(a: sp.csr_matrix, nodes: np.ndarray) -> sp.csr_matrix:
    keep = np.ones(a.shape[0])
    keep[nodes] = 0.0
    d = sp.diags(keep)
    e = sp.diags(1.0 - keep)
    return as_csr(d @ a + e)


def _replace_rows_cols(a: sp.csr_matrix, nodes: np.ndarray) -> sp.csr_matrix:
    keep = np.ones(a.shape[0])
    keep[nodes] = 0.0
    d = sp.diags(keep)
    e = sp.diags(1.0 - keep)
    return as_csr(d @ a @ d + e)


class ParametrizedProblem:
    """Common scaffolding for parametrized boundary-value problems.

    Subclasses define :attr:`variant`, :attr:`lower`, :attr:`upper`,
    :meth:`operator` and :meth:`source`, and the Dirichlet data.
    """

    variant: str
    lower: np.ndarray
    upper: np.ndarray
    param_names: tuple

    def __init__(self, mesh: StructuredTriMesh, dirichlet_nodes, dirichlet_values):
        self.mesh = mesh
        self.dirichlet_nodes = np.asarray(dirichlet_nodes, dtype=np.int64)
        self.dirichlet_values = np.asarray(dirichlet_values, dtype=np.float64)
        mask = np.ones(mesh.n_nodes, dtype=bool)
        mask[self.dirichlet_nodes] = False
        self.free_nodes = np.flatnonzero(mask)
        self.lift = np.zeros(mesh.n_nodes)
        self.lift[self.dirichlet_nodes] = self.dirichlet_values

    @property
    def n_params(self) -> int:
        return len(self.lower)

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_nodes

    def check(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=np.float64)
        if mu.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got shape {mu.shape}")
        if np.any(mu < self.lower) or np.any(mu > self.upper):
            raise DomainError(f"parameter {mu.tolist()} outside box {self.lower.tolist()}..{self.upper.tolist()}")
        return mu

    def operator(self, mu) -> sp.csr_matrix:  # pragma: no cover - abstract
        raise NotImplementedError

    def source(self, mu) -> np.ndarray:
        return np.zeros(self.n_dofs)

    def lifted_rhs(self, mu, a=None) -> np.ndarray:
        """``f(mu) - A(mu) g`` with Dirichlet rows zeroed."""
        if a is None:
            a = self.operator(mu)
        f = self.source(mu) - a @ self.lift
        f[self.dirichlet_nodes] = 0.0
        return f

    def system(self, mu, method=None) -> FomSystem:
        mu = self.check(mu)
        method = method or self.default_bc
        a = self.operator(mu)
        if method == "row":
            rhs = self.source(mu).copy()
            rhs[self.dirichlet_nodes] = self.dirichlet_values
            return FomSystem(
                _replace_rows(a, self.dirichlet_nodes), rhs, self.dirichlet_nodes, self.dirichlet_values
            )
        if method == "lifting":
            return FomSystem(
                _replace_rows_cols(a, self.dirichlet_nodes),
                self.lifted_rhs(mu, a),
                self.dirichlet_nodes,
                self.dirichlet_values,
                lift=self.lift.copy(),
            )
        raise ValueError(f"unknown boundary treatment {method!r}")


def fom_solve(problem: ParametrizedProblem, mu, tol=1e-10, method=None) -> np.ndarray:
    return problem.system(mu, method).solve(tol=tol)


def _curl(dpsi_dx, dpsi_dy):
    return np.column_stack([dpsi_dy, -dpsi_dx])


def stream_field_1(p):
    """curl of sin(pi x) sin(2 pi y)."""
    x, y = p[:, 0], p[:, 1]
    dx = np.pi * np.cos(np.pi * x) * np.sin(2 * np.pi * y)
    dy = 2 * np.pi * np.sin(np.pi * x) * np.cos(2 * np.pi * y)
    return _curl(dx, dy)


def stream_field_2(p):
    """curl of sin(2 pi x) sin(pi y), the mirror image of :func:`stream_field_1`."""
    x, y = p[:, 0], p[:, 1]
    dx = 2 * np.pi * np.cos(2 * np.pi * x) * np.sin(np.pi * y)
    dy = np.pi * np.sin(2 * np.pi * x) * np.cos(np.pi * y)
    return _curl(dx, dy)


def default_advection_magnitude(mesh: StructuredTriMesh, nu_min: float) -> float:
    """Largest field magnitude keeping the cell Peclet number at or below one."""
    h = 1.0 / min(mesh.nx, mesh.ny)
    c = mesh.centroids()
    peak = max(
        np.max(np.linalg.norm(stream_field_1(c), axis=1)),
        np.max(np.linalg.norm(stream_field_2(c), axis=1)),
    )
    return 2.0 * nu_min / (h * peak)


class AdvectionDiffusionProblem(ParametrizedProblem):
    """Affine advection-diffusion benchmark, ``mu = (nu, alpha)``."""

    variant = "advdiff"
    param_names = ("nu", "alpha")
    default_bc = "row"
    n_affine = 3

    def __init__(self, mesh: StructuredTriMesh, magnitude=None, lower=(0.5, 0.0), upper=(10.0, np.pi / 6)):
        self.lower = np.asarray(lower, dtype=np.float64)
        self.upper = np.asarray(upper, dtype=np.float64)
        if np.any(self.upper < self.lower):
            raise ValueError("empty parameter box")
        tags = mesh.boundary
        dn = np.flatnonzero(tags & (LEFT | RIGHT))
        dv = np.where(tags[dn] & RIGHT, 1.0, 0.0)
        super().__init__(mesh, dn, dv)
        if magnitude is None:
            magnitude = default_advection_magnitude(mesh, float(self.lower[0]))
        self.magnitude = float(magnitude)
        self._components = None

    def velocity(self, alpha):
        m = self.magnitude

        def b(p):
            return m * (np.sin(alpha) * stream_field_1(p) + np.cos(alpha) * stream_field_2(p))

        return b

    def operator(self, mu) -> sp.csr_matrix:
        """Directly assembled operator (no boundary treatment)."""
        nu, alpha = mu
        return as_csr(
            assemble_stiffness(self.mesh, nu) + assemble_advection(self.mesh, self.velocity(alpha))
        )

    @staticmethod
    def theta(mu) -> np.ndarray:
        nu, alpha = mu
        return np.array([nu, np.sin(alpha), np.cos(alpha)])

    @staticmethod
    def theta_jacobian(mu) -> np.ndarray:
        """d theta / d mu, shape (3, 2)."""
        _, alpha = mu
        return np.array([[1.0, 0.0], [0.0, np.cos(alpha)], [0.0, -np.sin(alpha)]])

    def affine_components(self):
        """``(A_q, f_q)`` with ``A(mu) = sum theta_q A_q`` and lifted rhs components.

        ``f_q = -A_q g`` restricted to free rows, so that the lifted rhs is
        ``sum theta_q f_q`` with the same coefficients.
        """
        if self._components is None:
            m = self.magnitude
            a1 = assemble_stiffness(self.mesh, 1.0)
            a2 = assemble_advection(self.mesh, lambda p: m * stream_field_1(p))
            a3 = assemble_advection(self.mesh, lambda p: m * stream_field_2(p))
            mats = [a1, a2, a3]
            vecs = []
            for a in mats:
                f = -(a @ self.lift)
                f[self.dirichlet_nodes] = 0.0
                vecs.append(f)
            self._components = (mats, vecs)
        return self._components

    def recompose(self, mu) -> sp.csr_matrix:
        mats, _ = self.affine_components()
        th = self.theta(mu)
        return as_csr(sum(t * a for t, a in zip(th, mats)))


class NonaffineDiffusionProblem(ParametrizedProblem):
    """Gaussian-bump diffusion benchmark, ``mu = (x0, y0, s)``."""

    variant = "nonaffine"
    param_names = ("x0", "y0", "sigma")
    default_bc = "lifting"

    def __init__(self, mesh: StructuredTriMesh, lower=(0.4, 0.4, 0.05), upper=(0.6, 0.6, 0.1)):
        self.lower = np.asarray(lower, dtype=np.float64)
        self.upper = np.asarray(upper, dtype=np.float64)
        if np.any(self.upper < self.lower):
            raise ValueError("empty parameter box")
        tags = mesh.boundary
        bottom = (tags & BOTTOM) != 0
        sides = ((tags & (LEFT | RIGHT)) != 0) & ~bottom
        dn = np.flatnonzero(bottom | sides)
        dv = np.where(bottom[dn], 1.0, 0.0)
        super().__init__(mesh, dn, dv)
        self._load = assemble_load(mesh, 1.0)

    @staticmethod
    def diffusivity(mu):
        x0, y0, s = mu

        def k(p):
            r2 = (p[:, 0] - x0) ** 2 + (p[:, 1] - y0) ** 2
            return s + np.exp(-r2 / s) / s

        return k

    def operator(self, mu) -> sp.csr_matrix:
        return assemble_stiffness(self.mesh, self.diffusivity(mu))

    def source(self, mu) -> np.ndarray:
        return self._load.copy()


def assemble_nonaffine(problem: NonaffineDiffusionProblem, mu, method="lifting") -> FomSystem:
    return problem.system(mu, method)
