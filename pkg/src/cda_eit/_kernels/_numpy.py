"""Vectorized numpy element kernels.

All kernels take per-element arrays (leading axis = triangle) and return
per-element local contributions; scattering into global arrays is done by
the callers in :mod:`cda_eit.fem`.  Every element integral here has a
polynomial integrand of degree <= 2 and is evaluated with the 3-point
edge-midpoint rule, which is exact for that degree.
"""

import numpy as np

# local edge q is opposite local vertex q; its endpoints are (q+1, q+2) mod 3
_NEXT = np.array([1, 2, 0])
_PREV = np.array([2, 0, 1])


def geometry(coords):
    """Signed areas and barycentric gradients of each triangle.

    Parameters
    ----------
    coords : (nt, 3, 2) array
        Vertex coordinates per triangle.

    Returns
    -------
    areas : (nt,) array
        Signed areas (positive for counterclockwise triangles).
    grads : (nt, 3, 2) array
        Gradients of the three barycentric (P1 hat) functions.
    """
    p1 = coords[:, _NEXT, :]
    p2 = coords[:, _PREV, :]
    e = p2 - p1
    d1 = coords[:, 1] - coords[:, 0]
    d2 = coords[:, 2] - coords[:, 0]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    grads = np.empty_like(coords)
    grads[..., 0] = -e[..., 1]
    grads[..., 1] = e[..., 0]
    grads /= (2.0 * areas)[:, None, None]
    return areas, grads


def p1_local_matrix(areas, grads, kvals, mass_weight):
    """Local ``k * stiffness + mass_weight * mass`` matrices, shape (nt, 3, 3)."""
    stiff = np.einsum("tid,tjd->tij", grads, grads) * (kvals * areas)[:, None, None]
    mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return stiff + mass_weight * areas[:, None, None] * mass[None]


def _rt0_at_midpoints(coords, areas, signs):
    # basis values phi_i(m_q) -> (nt, q, i, 2)
    mids = 0.5 * (coords[:, _NEXT, :] + coords[:, _PREV, :])
    diff = mids[:, :, None, :] - coords[:, None, :, :]
    return diff * (signs / (2.0 * areas[:, None]))[:, None, :, None]


def rt0_local_matrix(coords, areas, signs, kinv):
    """Local H(div) matrices ``kinv * (phi_i, phi_j) + (div phi_i, div phi_j)``."""
    phi = _rt0_at_midpoints(coords, areas, signs)
    mass = np.einsum("tqid,tqjd->tij", phi, phi) * (kinv * areas / 3.0)[:, None, None]
    div = signs / areas[:, None]
    return mass + np.einsum("ti,tj->tij", div, div) * areas[:, None, None]


def _grad_theta(grads, th_loc):
    # (nt, 2, 2) with [c, d] = d theta_c / d x_d
    return np.einsum("tic,tid->tcd", th_loc, grads)


def _m_operator(dth):
    div = dth[:, 0, 0] + dth[:, 1, 1]
    m = dth + np.transpose(dth, (0, 2, 1))
    m[:, 0, 0] -= div
    m[:, 1, 1] -= div
    return m, div


def shape_gradient_local(areas, grads, kvals, u_loc):
    """Local covector of ``theta -> 1/2 int k M(theta) grad u . grad u - div(theta) u^2``.

    Returns an (nt, 3, 2) array: entry [t, i, c] is the contribution of the
    test field ``phi_i e_c`` on triangle t.
    """
    gu = np.einsum("ti,tid->td", u_loc, grads)
    gu2 = np.einsum("td,td->t", gu, gu)
    g_dot = np.einsum("tid,td->ti", grads, gu)
    usq = (np.einsum("ti,ti->t", u_loc, u_loc) + u_loc.sum(axis=1) ** 2) * areas / 12.0
    ka = kvals * areas
    term = 2.0 * gu[:, None, :] * g_dot[:, :, None] - grads * gu2[:, None, None]
    return 0.5 * (ka[:, None, None] * term - grads * usq[:, None, None])


def dgdu_local(areas, grads, kvals, u_loc, th_loc):
    """Local load of ``dr -> int k M(theta) grad u . grad dr - div(theta) u dr``."""
    gu = np.einsum("ti,tid->td", u_loc, grads)
    m, div = _m_operator(_grad_theta(grads, th_loc))
    mgu = np.einsum("tcd,td->tc", m, gu)
    stiff = np.einsum("tid,td->ti", grads, mgu) * (kvals * areas)[:, None]
    umass = (u_loc + u_loc.sum(axis=1)[:, None]) * (areas / 12.0)[:, None]
    return stiff - div[:, None] * umass


def adjoint_flux_rhs_local(coords, areas, grads, signs, u_loc, th_loc):
    """Local RT0 load of ``dxi -> int div(theta) u div(dxi) - M(theta) grad u . dxi``."""
    gu = np.einsum("ti,tid->td", u_loc, grads)
    m, div = _m_operator(_grad_theta(grads, th_loc))
    mgu = np.einsum("tcd,td->tc", m, gu)
    centroid = coords.mean(axis=1)
    # int_K phi_j = s_j / 2 (x_c - P_j)
    lever = centroid[:, None, :] - coords
    ubar = u_loc.mean(axis=1)
    return signs * (div * ubar)[:, None] - 0.5 * signs * np.einsum("tjd,td->tj", lever, mgu)


def flux_bound_local(coords, areas, grads, signs, kvals, flux_loc, w_loc, shift_vec, shift_loc):
    """Element contributions of the complementary-energy bound.

    Integrand ``k^-1 |q - k grad w + shift_vec|^2 + (div q - w - shift)^2`` with
    ``q`` the RT0 field of local dofs ``flux_loc``, ``w`` and ``shift`` P1
    (nodal values per triangle) and ``shift_vec`` constant per triangle.
    """
    phi = _rt0_at_midpoints(coords, areas, signs)
    q = np.einsum("tqid,ti->tqd", phi, flux_loc)
    gw = np.einsum("ti,tid->td", w_loc, grads)
    vec = q - (kvals[:, None] * gw - shift_vec)[:, None, :]
    divq = np.einsum("ti,ti->t", signs, flux_loc) / areas
    s = w_loc + shift_loc
    s_mid = 0.5 * (s[:, _NEXT] + s[:, _PREV])
    sc = divq[:, None] - s_mid
    quad = np.einsum("tqd,tqd->tq", vec, vec) / kvals[:, None] + sc * sc
    return quad.sum(axis=1) * areas / 3.0
