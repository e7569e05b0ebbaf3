"""EIT physics: state solves, Kohn-Vogelius misfit, volumetric shape gradient.

The misfit for one measurement is ``J = 1/2 a(u_N - u_D, u_N - u_D)`` where
``u_N`` solves the problem with the measured flux ``g`` and ``u_D`` the one
with the measured potential ``U_D``.  Several measurements are summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _kernels
from . import fem
from .fem import DIRICHLET, NEUMANN, P1_SCALAR, P1_VEC2, FeSpace, Field

SINGLE = "SINGLE"
FAMILY = "FAMILY"
FAMILY_SIZE = 10

# validation geometry: disk rho_E = 5 with circular inclusion rho_I = 4
RHO_E, RHO_I = 5.0, 4.0
K_E, K_I = 1.0, 10.0
MODE = 5
C0 = complex(-6.3e-9, 40.39491005)
C1 = complex(1.30145994, 0.325482825)
C2 = complex(1.5e-11, -1.301459935)
# the tabulated constants are rounded to ~10 digits; the imaginary residue of
# the assembled solution reaches ~7e-8 relative near the interface
IMAG_RTOL = 1e-7


@dataclass(eq=False)
class Measurement:
    """One flux/potential pair; ``U_D`` lives on the OUTER vertices of ``data_mesh``."""

    g: object
    U_D: np.ndarray
    data_mesh: object

    def __post_init__(self):
        self.U_D = np.asarray(self.U_D, dtype=np.float64)
        n_outer = int(self.data_mesh.outer_vertex_mask.sum())
        if self.U_D.shape == (self.data_mesh.n_vertices,):
            self.U_D = self.U_D[self.data_mesh.outer_vertex_mask]
        if self.U_D.shape != (n_outer,):
            raise ValueError(f"U_D needs one value per OUTER vertex ({n_outer}), got {self.U_D.shape}")

    def trace_on(self, mesh):
        """U_D at ``mesh``'s OUTER vertices by interpolation along the data polyline."""
        cache = fem.mesh_cache(mesh)
        key = ("trace", id(self))
        if key not in cache:
            cache[key] = _polyline_interpolate(self.data_mesh, self.U_D, mesh)
        return cache[key]


def _polyline_interpolate(src_mesh, src_vals, mesh):
    idx_src = np.flatnonzero(src_mesh.outer_vertex_mask)
    lookup = np.full(src_mesh.n_vertices, -1, dtype=np.int64)
    lookup[idx_src] = np.arange(len(idx_src))
    e = src_mesh.labelled_edges(fem.OUTER)
    a = src_mesh.vertices[e[:, 0]]
    d = src_mesh.vertices[e[:, 1]] - a
    va = src_vals[lookup[e[:, 0]]]
    vb = src_vals[lookup[e[:, 1]]]
    dd = np.einsum("ed,ed->e", d, d)
    pts = mesh.vertices[mesh.outer_vertex_mask]
    out = np.empty(len(pts))
    for s in range(0, len(pts), 256):
        p = pts[s:s + 256]
        rel = p[:, None, :] - a[None]
        t = np.clip(np.einsum("ped,ed->pe", rel, d) / dd, 0.0, 1.0)
        dist = np.sum((rel - t[..., None] * d[None]) ** 2, axis=2)
        k = np.argmin(dist, axis=1)
        tk = t[np.arange(len(p)), k]
        out[s:s + 256] = (1.0 - tk) * va[k] + tk * vb[k]
    return out


@dataclass(eq=False)
class EitSetup:
    conductivity: tuple
    measurements: list = field(default_factory=list)

    def __post_init__(self):
        k_I, k_E = (float(c) for c in self.conductivity)
        if not (k_I > 0 and k_E > 0):
            raise fem.ConductivityError(f"conductivities must be positive, got {self.conductivity}")
        self.conductivity = (k_I, k_E)
        if not self.measurements:
            raise ValueError("an EIT setup needs at least one measurement")

    def __len__(self):
        return len(self.measurements)


@dataclass(eq=False)
class StatePair:
    u_N: Field
    u_D: Field


def solve_states(mesh, setup, j):
    """Neumann and Dirichlet P1 states for measurement ``j``."""
    meas = setup.measurements[j]
    kc = setup.conductivity
    u_N = fem.solve_spd(fem.assemble_state(mesh, kc, NEUMANN, meas.g))
    u_D = fem.solve_spd(fem.assemble_state(mesh, kc, DIRICHLET, meas.trace_on(mesh)))
    space = FeSpace(mesh, P1_SCALAR)
    return StatePair(Field(space, u_N), Field(space, u_D))


def solve_all_states(mesh, setup):
    return [solve_states(mesh, setup, j) for j in range(len(setup))]


def _pairs(pairs):
    return [pairs] if isinstance(pairs, StatePair) else list(pairs)


def kohn_vogelius(mesh, setup, pair):
    """``J = 1/2 |||u_N - u_D|||^2``; a list of pairs gives the summed misfit."""
    total = 0.0
    for p in _pairs(pair):
        diff = p.u_N.coefficients - p.u_D.coefficients
        total += 0.5 * fem.energy_norm(mesh, setup.conductivity, diff) ** 2
    return total


def _coeffs(v):
    return np.asarray(getattr(v, "coefficients", v), dtype=np.float64)


def _theta_local(mesh, theta):
    th = _coeffs(theta)
    return np.ascontiguousarray(th.reshape(2, -1).T[mesh.triangles])


def shape_gradient_local(mesh, conductivity, u):
    """Element-wise covector of ``theta -> G(u)(theta)``, shape (nt, 3, 2)."""
    kvals = fem.element_conductivity(mesh, conductivity)
    return _kernels.shape_gradient_local(mesh.areas, mesh.grads, kvals,
                                         np.ascontiguousarray(_coeffs(u)[mesh.triangles]))


def _scatter_vec(mesh, local):
    nv = mesh.n_vertices
    out = np.zeros(2 * nv)
    out[:nv] = np.bincount(mesh.triangles.ravel(), weights=local[..., 0].ravel(), minlength=nv)
    out[nv:] = np.bincount(mesh.triangles.ravel(), weights=local[..., 1].ravel(), minlength=nv)
    return out


def shape_gradient_vector(mesh, setup, pairs):
    """Covector ``L`` with ``<d_h J, theta> = L . theta`` (blocked P1_VEC2 layout).

    Entries at OUTER vertices are zero.
    """
    local = 0.0
    for p in _pairs(pairs):
        local = local + (shape_gradient_local(mesh, setup.conductivity, p.u_N)
                         - shape_gradient_local(mesh, setup.conductivity, p.u_D))
    L = _scatter_vec(mesh, np.broadcast_to(local, (mesh.n_triangles, 3, 2)))
    L.reshape(2, -1)[:, mesh.outer_vertex_mask] = 0.0
    return L


def operator_G(mesh, conductivity, u, theta):
    """``G(u)(theta) = 1/2 int k M(theta) grad u . grad u - div(theta) u^2``."""
    return float(np.sum(shape_gradient_local(mesh, conductivity, u)
                        * np.ascontiguousarray(_theta_local(mesh, theta))))


def dG_du_form(mesh, setup, u_h, theta_h):
    """Load vector of ``dr -> int k M(theta) grad u . grad dr - div(theta) u dr``."""
    conductivity = getattr(setup, "conductivity", setup)
    kvals = fem.element_conductivity(mesh, conductivity)
    local = _kernels.dgdu_local(mesh.areas, mesh.grads, kvals,
                                np.ascontiguousarray(_coeffs(u_h)[mesh.triangles]),
                                _theta_local(mesh, theta_h))
    return np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def misfit_and_gradient(mesh, setup):
    """Solve all states; return ``(J, L, pairs)``."""
    pairs = solve_all_states(mesh, setup)
    return kohn_vogelius(mesh, setup, pairs), shape_gradient_vector(mesh, setup, pairs), pairs


# ---------------------------------------------------------------------------
# boundary data


def _odd_power(s, b):
    if float(b).is_integer():
        return s ** int(b)
    return np.sign(s) * np.abs(s) ** b


def boundary_data(kind, j=0, mode=MODE):
    """Analytic flux ``g(x, y)`` (vectorized).

    SINGLE: ``cos(mode * angle)``, only ``j = 0``.
    FAMILY: ``j = 1..10``, ``g_j = (x + a y)^b a^c`` with ``a = 1 + j/10``,
    ``b = (j + 1)/2``, ``c = j mod 2``; half-integer powers use the odd
    extension ``sign(s) |s|^b``.
    """
    if kind == SINGLE:
        if j != 0:
            raise IndexError("SINGLE data has only index 0")

        def g(x, y):
            return np.cos(mode * np.arctan2(y, x))

        return g
    if kind == FAMILY:
        if not (1 <= j <= FAMILY_SIZE):
            raise IndexError(f"FAMILY index must be in 1..{FAMILY_SIZE}, got {j}")
        a = 1.0 + 0.1 * j
        b = (j + 1) / 2
        c = j - 2 * (j // 2)
        scale = a ** c

        def g(x, y):
            return _odd_power(np.asarray(x) + a * np.asarray(y), b) * scale

        return g
    raise ValueError(f"unknown boundary data kind {kind!r}")


# ---------------------------------------------------------------------------
# analytic validation solution


def _JY(M, x):
    """``J_M(-ix)`` and ``Y_M(-ix)`` for real ``x > 0`` via modified Bessel functions."""
    i_m = special.iv(M, x)
    k_m = special.kv(M, x)
    J = (-1j) ** M * i_m
    Y = (-1j) ** (M + 1) * i_m - (2 / np.pi) * (1j) ** M * k_m
    return J, Y


def _dJY(M, x):
    """Derivatives of ``J_M(-ix)``, ``Y_M(-ix)`` with respect to ``x``."""
    di = special.ivp(M, x)
    dk = special.kvp(M, x)
    return (-1j) ** M * di, (-1j) ** (M + 1) * di - (2 / np.pi) * (1j) ** M * dk


def _to_real(z):
    z = np.asarray(z)
    ratio = np.abs(z.imag) / np.maximum(np.abs(z.real), 1e-300)
    if np.any((ratio > IMAG_RTOL) & (z.imag != 0)):
        raise ArithmeticError(f"analytic solution has imaginary residue {ratio.max():.2e}")
    return z.real


def analytic_radial(rho):
    """Radial profile ``R(rho)`` with ``u = R(rho) cos(5 angle)``, and ``R'(rho)``."""
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho < 0) or np.any(rho > RHO_E * (1 + 1e-12)):
        raise ValueError(f"rho must lie in [0, {RHO_E}]")
    inner = rho <= RHO_I
    si, se = 1 / np.sqrt(K_I), 1 / np.sqrt(K_E)
    xi = rho * si
    xe = np.where(inner, RHO_I, rho) * se
    J_in = (-1j) ** MODE * special.iv(MODE, xi)
    dJ_in = (-1j) ** MODE * special.ivp(MODE, xi)
    J_out, Y_out = _JY(MODE, xe)
    dJ_out, dY_out = _dJY(MODE, xe)
    R_in = C0 * J_in
    dR_in = C0 * dJ_in * si
    R_out = C1 * J_out + C2 * Y_out
    dR_out = (C1 * dJ_out + C2 * dY_out) * se
    R = np.where(inner, R_in, R_out)
    dR = np.where(inner, dR_in, dR_out)
    return _to_real(R), _to_real(dR)


def analytic_reference(rho, theta_angle):
    """Exact Neumann state of the validation problem at polar point ``(rho, angle)``."""
    R, _ = analytic_radial(rho)
    return R * np.cos(MODE * np.asarray(theta_angle))


def analytic_xy(x, y):
    """Exact state and its Cartesian gradient at ``(x, y)``: ``(u, ux, uy)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rho = np.hypot(x, y)
    ang = np.arctan2(y, x)
    R, dR = analytic_radial(np.minimum(rho, RHO_E))
    c, s = np.cos(MODE * ang), np.sin(MODE * ang)
    u = R * c
    safe = np.where(rho > 0, rho, 1.0)
    u_r = dR * c
    u_t = np.where(rho > 0, -MODE * R * s / safe, 0.0)  # (1/rho) du/dangle
    cx, sy = np.where(rho > 0, x / safe, 1.0), np.where(rho > 0, y / safe, 0.0)
    return u, u_r * cx - u_t * sy, u_r * sy + u_t * cx


def validation_setup(mesh_for_trace=None, trace=None):
    """SINGLE-measurement setup of the validation problem.

    The Dirichlet trace defaults to the analytic solution sampled on the OUTER
    vertices of ``mesh_for_trace``.
    """
    g = boundary_data(SINGLE, 0)
    if trace is None:
        v = mesh_for_trace.vertices[mesh_for_trace.outer_vertex_mask]
        trace = analytic_xy(v[:, 0], v[:, 1])[0]
    return EitSetup((K_I, K_E), [Measurement(g, trace, mesh_for_trace)])
