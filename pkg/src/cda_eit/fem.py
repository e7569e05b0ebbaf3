"""P1 / RT0 finite elements: spaces, assembly, SPD solves, transfer.

Conductivity is always passed as a pair ``(k_I, k_E)``: triangles tagged
INCLUSION get ``k_I``, BACKGROUND triangles ``k_E``.

Vector P1 fields are stored component-blocked: ``[x-components, y-components]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .mesh import INCLUSION, OUTER, MeshError, barycentric, locate

P1_SCALAR = "P1_SCALAR"
P1_VEC2 = "P1_VEC2"
RT0 = "RT0"

NEUMANN = "NEUMANN"
DIRICHLET = "DIRICHLET"

STATE_N = "STATE_N"
STATE_D = "STATE_D"
ADJ_N = "ADJ_N"
ADJ_D = "ADJ_D"

RESIDUAL_RTOL = 1e-12

# 4-point Gauss-Legendre on [0, 1]
_gl_x, _gl_w = np.polynomial.legendre.leggauss(4)
EDGE_POINTS = 0.5 * (_gl_x + 1.0)
EDGE_WEIGHTS = 0.5 * _gl_w

# 7-point degree-5 rule on triangles (barycentric points, weights sum to 1)
_s15 = np.sqrt(15.0)
_a1, _b1 = (6 - _s15) / 21, (9 + 2 * _s15) / 21
_a2, _b2 = (6 + _s15) / 21, (9 - 2 * _s15) / 21
TRI7_POINTS = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_b1, _a1, _a1], [_a1, _b1, _a1], [_a1, _a1, _b1],
    [_b2, _a2, _a2], [_a2, _b2, _a2], [_a2, _a2, _b2],
])
TRI7_WEIGHTS = np.array([0.225] + [(155 - _s15) / 1200] * 3 + [(155 + _s15) / 1200] * 3)


class SolverError(RuntimeError):
    """Factorization breakdown or residual contract violated."""


class ConductivityError(ValueError):
    pass


def element_conductivity(mesh, conductivity):
    k_I, k_E = (float(c) for c in conductivity)
    if not (k_I > 0 and k_E > 0):
        raise ConductivityError(f"conductivities must be positive, got {conductivity}")
    return np.where(mesh.tags == INCLUSION, k_I, k_E)


def mesh_cache(mesh):
    """Per-mesh memo dictionary (dropped together with the mesh)."""
    try:
        return mesh.__dict__["_fem_cache"]
    except KeyError:
        cache = {}
        mesh.__dict__["_fem_cache"] = cache
        return cache


@dataclass(frozen=True, eq=False)
class FeSpace:
    mesh: object
    kind: str

    def __post_init__(self):
        if self.kind not in (P1_SCALAR, P1_VEC2, RT0):
            raise ValueError(f"unknown space kind {self.kind!r}")

    @property
    def ndofs(self):
        if self.kind == P1_SCALAR:
            return self.mesh.n_vertices
        if self.kind == P1_VEC2:
            return 2 * self.mesh.n_vertices
        return self.mesh.n_edges

    @property
    def signs(self):
        """RT0 local orientation signs (nt, 3); None for P1 spaces."""
        return self.mesh.edge_signs if self.kind == RT0 else None


@dataclass(eq=False)
class Field:
    space: FeSpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.shape != (self.space.ndofs,):
            raise ValueError(f"{self.space.kind} field needs {self.space.ndofs} coefficients, "
                             f"got shape {self.coefficients.shape}")

    @property
    def mesh(self):
        return self.space.mesh

    def nodal(self):
        """Scalar: (nv,) values; vector: (nv, 2) values."""
        if self.space.kind == P1_VEC2:
            return self.coefficients.reshape(2, -1).T
        return self.coefficients


def p1_field(mesh, values):
    return Field(FeSpace(mesh, P1_SCALAR), values)


def vec_field(mesh, values):
    """P1_VEC2 field from an (nv, 2) array or a blocked coefficient vector."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values.T.ravel()
    return Field(FeSpace(mesh, P1_VEC2), values)


@dataclass(eq=False)
class LinearSystem:
    """``matrix x = rhs`` with ``x[constrained] = values`` imposed."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    constrained: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.empty(0))
    space: FeSpace | None = None
    key: tuple | None = None  # identifies the matrix + constraint pattern for factor reuse

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        self.rhs = np.asarray(self.rhs, dtype=np.float64)
        self.constrained = np.asarray(self.constrained, dtype=np.int64)
        self.values = np.broadcast_to(np.asarray(self.values, dtype=np.float64),
                                      self.constrained.shape).copy()
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n) or self.rhs.shape != (n,):
            raise ValueError("matrix must be square and match the right-hand side")


# ---------------------------------------------------------------------------
# assembly helpers


def _scatter_matrix(dofs, local, n):
    rows = np.repeat(dofs, dofs.shape[1], axis=1).ravel()
    cols = np.tile(dofs, (1, dofs.shape[1])).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def _scatter_vector(dofs, local, n):
    return np.bincount(dofs.ravel(), weights=local.ravel(), minlength=n)


def p1_matrix(mesh, kvals, mass_weight=1.0):
    local = _kernels.p1_local_matrix(mesh.areas, mesh.grads, np.ascontiguousarray(kvals, dtype=np.float64),
                                     float(mass_weight))
    return _scatter_matrix(mesh.triangles, local, mesh.n_vertices)


def state_matrix(mesh, conductivity):
    """Matrix of ``a(u, v) = int k grad u . grad v + u v`` (cached per mesh)."""
    key = ("state", float(conductivity[0]), float(conductivity[1]))
    cache = mesh_cache(mesh)
    if key not in cache:
        cache[key] = p1_matrix(mesh, element_conductivity(mesh, conductivity))
    return cache[key]


def hdiv_matrix(mesh, conductivity):
    """Matrix of ``int k^-1 s . t + div s div t`` on RT0 (cached per mesh)."""
    key = ("hdiv", float(conductivity[0]), float(conductivity[1]))
    cache = mesh_cache(mesh)
    if key not in cache:
        kinv = 1.0 / element_conductivity(mesh, conductivity)
        local = _kernels.rt0_local_matrix(mesh.coords, mesh.areas, np.ascontiguousarray(mesh.edge_signs), kinv)
        cache[key] = _scatter_matrix(mesh.tri_edges, local, mesh.n_edges)
    return cache[key]


def outer_edge_quadrature(mesh):
    """Gauss points on OUTER edges: ``(edges (ne,2), points (ne,4,2), weights*length (ne,4))``."""
    e = mesh.labelled_edges(OUTER)
    p = mesh.vertices[e[:, 0]]
    q = mesh.vertices[e[:, 1]]
    pts = p[:, None, :] + EDGE_POINTS[None, :, None] * (q - p)[:, None, :]
    length = np.hypot(*(q - p).T)
    return e, pts, EDGE_WEIGHTS[None, :] * length[:, None]


def neumann_load(mesh, g):
    """``int_{dD} g v ds`` for every P1 hat function, 4-point Gauss per edge."""
    e, pts, w = outer_edge_quadrature(mesh)
    gv = np.asarray(g(pts[..., 0], pts[..., 1]), dtype=np.float64) * w
    load = np.zeros(mesh.n_vertices)
    np.add.at(load, e[:, 0], (gv * (1.0 - EDGE_POINTS)).sum(axis=1))
    np.add.at(load, e[:, 1], (gv * EDGE_POINTS).sum(axis=1))
    return load


def edge_integrals(mesh, g):
    """``int_e g ds`` for each OUTER edge (boundary-list order)."""
    _, pts, w = outer_edge_quadrature(mesh)
    return (np.asarray(g(pts[..., 0], pts[..., 1]), dtype=np.float64) * w).sum(axis=1)


def outer_vertices(mesh):
    return np.flatnonzero(mesh.outer_vertex_mask)


def _dirichlet_values(mesh, data):
    idx = outer_vertices(mesh)
    if callable(data):
        v = mesh.vertices[idx]
        return idx, np.asarray(data(v[:, 0], v[:, 1]), dtype=np.float64) * np.ones(len(idx))
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 0:
        return idx, np.full(len(idx), float(data))
    if data.shape == (mesh.n_vertices,):
        return idx, data[idx]
    if data.shape == (len(idx),):
        return idx, data
    raise ValueError("Dirichlet data must be callable, scalar, nodal, or one value per OUTER vertex")


def assemble_state(mesh, conductivity, problem, data):
    """Galerkin system for the Neumann or Dirichlet state problem.

    ``data`` is ``g(x, y)`` (vectorized callable, or None for zero flux) for
    NEUMANN; for DIRICHLET a callable, scalar, full nodal array or array over
    the OUTER vertices (ascending index).
    """
    A = state_matrix(mesh, conductivity)
    space = FeSpace(mesh, P1_SCALAR)
    key = ("state", float(conductivity[0]), float(conductivity[1]), problem)
    if problem == NEUMANN:
        rhs = np.zeros(mesh.n_vertices) if data is None else neumann_load(mesh, data)
        return LinearSystem(A, rhs, space=space, key=key)
    if problem == DIRICHLET:
        idx, vals = _dirichlet_values(mesh, 0.0 if data is None else data)
        return LinearSystem(A, np.zeros(mesh.n_vertices), idx, vals, space=space, key=key)
    raise ValueError(f"unknown problem {problem!r}")


def interpolate(mesh, f):
    """Nodal P1 interpolant of a callable ``f(x, y)``."""
    return p1_field(mesh, np.asarray(f(mesh.vertices[:, 0], mesh.vertices[:, 1]), dtype=np.float64)
                    * np.ones(mesh.n_vertices))


# ---------------------------------------------------------------------------
# solver


class SpdFactor:
    """Sparse LU of an SPD matrix in symmetric mode, with a definiteness check."""

    def __init__(self, A):
        self.A = sp.csc_matrix(A)
        n = self.A.shape[0]
        if n == 0:
            self.lu = None
            return
        asym = abs(self.A - self.A.T)
        if asym.nnz and asym.max() > 1e-12 * abs(self.A).max():
            raise SolverError("matrix is not symmetric")
        diag = self.A.diagonal()
        if not np.all(diag > 0):
            raise SolverError("matrix is not positive definite")
        # symmetric Jacobi scaling: slivers make entries span many decades
        self.scale = 1.0 / np.sqrt(diag)
        S = sp.diags(self.scale)
        try:
            self.lu = spla.splu(sp.csc_matrix(S @ self.A @ S), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                options={"SymmetricMode": True})
        except RuntimeError as exc:  # singular factor
            raise SolverError(f"factorization failed: {exc}") from exc
        d = self.lu.U.diagonal()
        if not np.all(d > 0):
            raise SolverError("matrix is not positive definite")

    def _lu_solve(self, b):
        return self.scale * self.lu.solve(self.scale * b)

    def _extended(self):
        if getattr(self, "_A_ext", None) is None:
            self._A_ext = self.A.astype(np.longdouble)
        return self._A_ext

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        if self.lu is None:
            return np.zeros(0)
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return np.zeros_like(b)
        x = self._lu_solve(b)
        rel = np.linalg.norm(b - self.A @ x) / nb
        if rel <= RESIDUAL_RTOL:
            return x
        # iterative refinement with residuals in extended precision, so the
        # float64 matvec rounding does not mask convergence
        A_ext = self._extended()
        b_ext = b.astype(np.longdouble)
        x_ext = x.astype(np.longdouble)
        for _ in range(6):
            r = b_ext - A_ext @ x_ext
            rel = float(np.linalg.norm(r.astype(np.float64))) / nb
            if rel <= RESIDUAL_RTOL:
                break
            x_ext = x_ext + self._lu_solve(r.astype(np.float64))
        x = x_ext.astype(np.float64)
        rel = max(rel, float(np.linalg.norm((b_ext - A_ext @ x).astype(np.float64))) / nb)
        if rel <= RESIDUAL_RTOL:
            return x
        # x may be the correctly rounded solution whose residual still exceeds
        # the contract because |A||x| >> |b|; accept that floor, nothing else
        floor = 8.0 * np.finfo(np.float64).eps * np.linalg.norm(abs(self.A) @ np.abs(x)) / nb
        if rel <= floor:
            return x
        raise SolverError(f"relative residual {rel:.3e} exceeds {RESIDUAL_RTOL:g}")


def _factor_for(system, A_ff):
    if system.key is None or system.space is None:
        return SpdFactor(A_ff)
    cache = mesh_cache(system.space.mesh)
    key = ("factor",) + system.key + (system.constrained.tobytes(),)
    if key not in cache:
        cache[key] = SpdFactor(A_ff)
    return cache[key]


def solve_spd(system):
    """Solve a :class:`LinearSystem`; returns the full coefficient vector.

    Constrained dofs are eliminated symmetrically.  Raises
    :class:`SolverError` on a non-SPD reduced matrix or when the relative
    residual of the reduced system exceeds ``1e-12``.
    """
    A = system.matrix
    n = A.shape[0]
    x = np.zeros(n)
    c = system.constrained
    if c.size == 0:
        return _factor_for(system, A).solve(system.rhs)
    free = np.ones(n, dtype=bool)
    free[c] = False
    x[c] = system.values
    A = A.tocsr()
    A_ff = A[free][:, free]
    b = system.rhs[free] - A[free][:, c] @ system.values
    x[free] = _factor_for(system, A_ff).solve(b)
    return x


def solve_field(system):
    return Field(system.space, solve_spd(system))


# ---------------------------------------------------------------------------
# H(div)


def assemble_hdiv(mesh, conductivity, rhs_kind, inputs=None):
    """RT0 flux system for the state / adjoint complementary-energy problems.

    ``inputs`` (mapping):

    * STATE_N: ``g`` callable (None for zero flux); boundary dofs fixed to the
      edge integrals of ``g``.
    * STATE_D: ``U_D`` nodal P1 values (only OUTER entries are used).
    * ADJ_N / ADJ_D: ``u`` (P1 field or array) and ``theta`` (P1_VEC2 field
      or blocked array).  ADJ_N fixes boundary dofs to zero.
    """
    inputs = dict(inputs or {})
    A = hdiv_matrix(mesh, conductivity)
    space = FeSpace(mesh, RT0)
    n = mesh.n_edges
    ids, tri, loc = mesh.outer_edge_data
    sign = mesh.edge_signs[tri, loc]
    key = ("hdiv", float(conductivity[0]), float(conductivity[1]))
    if rhs_kind == STATE_N:
        g = inputs.get("g")
        vals = np.zeros(len(ids)) if g is None else sign * edge_integrals(mesh, g)
        return LinearSystem(A, np.zeros(n), ids, vals, space=space, key=key + ("N",))
    if rhs_kind == STATE_D:
        if "U_D" not in inputs:
            raise ValueError("STATE_D needs U_D")
        U = np.asarray(getattr(inputs["U_D"], "coefficients", inputs["U_D"]), dtype=np.float64)
        e = mesh.edges[ids]
        rhs = np.zeros(n)
        np.add.at(rhs, ids, sign * 0.5 * (U[e[:, 0]] + U[e[:, 1]]))
        return LinearSystem(A, rhs, space=space, key=key + ("D",))
    if rhs_kind in (ADJ_N, ADJ_D):
        if "u" not in inputs or "theta" not in inputs:
            raise ValueError(f"{rhs_kind} needs inputs 'u' and 'theta'")
        u = np.asarray(getattr(inputs["u"], "coefficients", inputs["u"]), dtype=np.float64)
        th = np.asarray(getattr(inputs["theta"], "coefficients", inputs["theta"]), dtype=np.float64)
        th_loc = np.ascontiguousarray(th.reshape(2, -1).T[mesh.triangles])
        local = _kernels.adjoint_flux_rhs_local(mesh.coords, mesh.areas, mesh.grads,
                                                np.ascontiguousarray(mesh.edge_signs),
                                                np.ascontiguousarray(u[mesh.triangles]), th_loc)
        rhs = _scatter_vector(mesh.tri_edges, local, n)
        if rhs_kind == ADJ_N:
            return LinearSystem(A, rhs, ids, np.zeros(len(ids)), space=space, key=key + ("N",))
        return LinearSystem(A, rhs, space=space, key=key + ("D",))
    raise ValueError(f"unknown rhs kind {rhs_kind!r}")


def rt0_local(field):
    """Local RT0 coefficients (nt, 3) of a global flux field."""
    mesh = field.mesh
    return np.ascontiguousarray(field.coefficients[mesh.tri_edges])


# ---------------------------------------------------------------------------
# norms and transfer


def energy_norm(mesh, conductivity, v):
    coeffs = np.asarray(getattr(v, "coefficients", v), dtype=np.float64)
    val = coeffs @ (state_matrix(mesh, conductivity) @ coeffs)
    return float(np.sqrt(max(val, 0.0)))


def energy_product(mesh, conductivity, v, w):
    v = np.asarray(getattr(v, "coefficients", v), dtype=np.float64)
    w = np.asarray(getattr(w, "coefficients", w), dtype=np.float64)
    return float(v @ (state_matrix(mesh, conductivity) @ w))


def prolongation_matrix(coarse, fine):
    """Sparse P1 interpolation ``coarse -> fine`` along the recorded hierarchy.

    Each fine vertex is located in a coarse triangle (starting from the
    recorded origin), so the map stays exact after both meshes are moved by
    the same piecewise-affine displacement.
    """
    if fine is coarse or (fine.uid == coarse.uid):
        return sp.identity(coarse.n_vertices, format="csr")
    if fine.origin_uid != coarse.uid:
        raise MeshError("fine mesh is not a recorded refinement of the coarse mesh")
    nvf = fine.n_vertices
    t = fine.triangles.ravel()
    first = np.full(nvf, -1, dtype=np.int64)
    first[t[::-1]] = np.arange(len(t))[::-1] // 3
    if np.any(first < 0):
        raise MeshError("fine mesh has vertices without triangles")
    ctri, lam = locate(coarse, fine.vertices, guess=fine.origin[first])
    # round-off and curved-boundary overshoot: drop tiny / negative weights
    lam[lam < 1e-12] = 0.0
    lam /= lam.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(nvf), 3)
    cols = coarse.triangles[ctri].ravel()
    P = sp.csr_matrix((lam.ravel(), (rows, cols)), shape=(nvf, coarse.n_vertices))
    P.eliminate_zeros()
    return P


def prolong(coarse_field, fine_mesh):
    """Exact P1 transfer of a scalar or vector field to a nested finer mesh."""
    coarse = coarse_field.mesh
    P = prolongation_matrix(coarse, fine_mesh)
    kind = coarse_field.space.kind
    if kind == P1_SCALAR:
        return Field(FeSpace(fine_mesh, P1_SCALAR), P @ coarse_field.coefficients)
    if kind == P1_VEC2:
        c = coarse_field.coefficients.reshape(2, -1)
        return Field(FeSpace(fine_mesh, P1_VEC2), np.concatenate([P @ c[0], P @ c[1]]))
    raise ValueError("only P1 fields can be prolonged")


def evaluate_p1(mesh, values, tri_ids, points):
    """Point values of a P1 function inside given triangles."""
    lam = barycentric(mesh, tri_ids, points)
    return np.einsum("pk,pk->p", lam, np.asarray(values)[mesh.triangles[tri_ids]])
