"""Guaranteed bounds on the discretization error of the shape derivative.

For every measurement we bound four energy errors (Neumann/Dirichlet states
and their influence functions) with equilibrated RT0 fluxes.  Because the
misfit is self-adjoint, the error in ``<dJ, theta>`` is controlled by
``E_bar = sum_j |||e_N||| |||eps_N||| + |||e_D||| |||eps_D|||``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels, eit, fem
from .fem import ADJ_D, ADJ_N, DIRICHLET, NEUMANN, P1_SCALAR, RT0, STATE_D, STATE_N, FeSpace, Field

N = "N"
D = "D"

DORFLER_DEFAULT = 0.3


def _coeffs(v):
    return np.asarray(getattr(v, "coefficients", v), dtype=np.float64)


def solve_influence(mesh, setup, j, u_h, theta_h, kind):
    """Influence function ``r``: ``a(d, r) = dG/du(u_h)[theta_h, d]``.

    ``kind=D`` seeks ``r`` with zero trace on the outer boundary.  ``j`` only
    identifies the measurement the state belongs to.
    """
    if kind not in (N, D):
        raise ValueError(f"kind must be 'N' or 'D', got {kind!r}")
    del j
    rhs = eit.dG_du_form(mesh, setup, u_h, theta_h)
    problem = NEUMANN if kind == N else DIRICHLET
    system = fem.assemble_state(mesh, setup.conductivity, problem, None if kind == N else 0.0)
    system.rhs = rhs
    return Field(FeSpace(mesh, P1_SCALAR), fem.solve_spd(system))


def equilibrate_flux(mesh, setup, kind, inputs):
    """RT0 flux for the complementary-energy bound of one solve.

    ``inputs``: STATE_N needs ``g`` (or ``j`` to take it from ``setup``);
    STATE_D needs ``u`` (the Dirichlet state, whose boundary values are the
    data); ADJ_N / ADJ_D need ``u`` and ``theta``.
    """
    inputs = dict(inputs)
    if kind == STATE_N and "g" not in inputs:
        inputs["g"] = setup.measurements[inputs["j"]].g if "j" in inputs else None
    if kind == STATE_D and "U_D" not in inputs:
        inputs["U_D"] = inputs["u"]
    system = fem.assemble_hdiv(mesh, setup.conductivity, kind, inputs)
    return Field(FeSpace(mesh, RT0), fem.solve_spd(system))


def _shift_terms(mesh, conductivity, u, theta):
    # per element: k M(theta) grad u, and div(theta) * u at the vertices
    kvals = fem.element_conductivity(mesh, conductivity)
    th = _coeffs(theta).reshape(2, -1).T[mesh.triangles]
    dth = np.einsum("tic,tid->tcd", th, mesh.grads)
    div = dth[:, 0, 0] + dth[:, 1, 1]
    m = dth + dth.transpose(0, 2, 1)
    m[:, 0, 0] -= div
    m[:, 1, 1] -= div
    gu = np.einsum("ti,tid->td", _coeffs(u)[mesh.triangles], mesh.grads)
    shift_vec = kvals[:, None] * np.einsum("tcd,td->tc", m, gu)
    shift_loc = div[:, None] * _coeffs(u)[mesh.triangles]
    return np.ascontiguousarray(shift_vec), np.ascontiguousarray(shift_loc)


def bound_energy_error(mesh, setup, kind, fields):
    """Guaranteed energy-error bound ``(bound, per-element squared contributions)``.

    ``fields``: ``flux`` (RT0) and ``u`` (P1 state); adjoint kinds also need
    ``r`` (P1 influence function) and ``theta``.
    """
    conductivity = getattr(setup, "conductivity", setup)
    kvals = fem.element_conductivity(mesh, conductivity)
    flux_loc = fem.rt0_local(fields["flux"])
    if kind in (STATE_N, STATE_D):
        w = _coeffs(fields["u"])
        shift_vec = np.zeros((mesh.n_triangles, 2))
        shift_loc = np.zeros((mesh.n_triangles, 3))
    elif kind in (ADJ_N, ADJ_D):
        w = _coeffs(fields["r"])
        shift_vec, shift_loc = _shift_terms(mesh, conductivity, fields["u"], fields["theta"])
    else:
        raise ValueError(f"unknown kind {kind!r}")
    contrib = _kernels.flux_bound_local(mesh.coords, mesh.areas, mesh.grads,
                                        np.ascontiguousarray(mesh.edge_signs), kvals, flux_loc,
                                        np.ascontiguousarray(w[mesh.triangles]), shift_vec, shift_loc)
    contrib = np.maximum(contrib, 0.0)
    return float(np.sqrt(contrib.sum())), contrib


@dataclass(eq=False)
class CertBound:
    """Bounds per measurement, their combination and the refinement indicator."""

    eN: np.ndarray
    rN: np.ndarray
    eD: np.ndarray
    rD: np.ndarray
    E_bar: float
    directional: float
    eta: np.ndarray

    @property
    def certified(self):
        return certified(self)


def combined_bound(bounds, directional, contributions=None, n_elements=None):
    """Assemble ``E_bar`` and the element indicator.

    ``bounds`` is a sequence of ``(eN, rN, eD, rD)`` per measurement;
    ``contributions`` the matching ``(cN, dN, cD, dD)`` squared element
    contributions (state N, adjoint N, state D, adjoint D).
    """
    b = np.asarray(bounds, dtype=np.float64).reshape(-1, 4)
    if np.any(b < 0):
        raise ValueError("bounds must be nonnegative")
    eN, rN, eD, rD = b.T
    E_bar = float(np.sum(eN * rN + eD * rD))
    if contributions is None:
        eta = np.zeros(0 if n_elements is None else n_elements)
    else:
        eta2 = 0.0
        for (cN, dN, cD, dD), (en, rn, ed, rd) in zip(contributions, b):
            eta2 = eta2 + cN * rn ** 2 + dN * en ** 2 + cD * rd ** 2 + dD * ed ** 2
        eta = np.sqrt(np.asarray(eta2, dtype=np.float64))
    return CertBound(eN, rN, eD, rD, E_bar, float(directional), eta)


def certified(bound):
    """``<d_h J, theta_h> + E_bar < 0`` (strict)."""
    return bool(bound.directional + bound.E_bar < 0.0)


def measurement_bounds(mesh, setup, j, pair, theta):
    """All four bounds and contributions for measurement ``j``."""
    u_N, u_D = pair.u_N, pair.u_D
    r_N = solve_influence(mesh, setup, j, u_N, theta, N)
    r_D = solve_influence(mesh, setup, j, u_D, theta, D)
    sN = equilibrate_flux(mesh, setup, STATE_N, {"j": j})
    sD = equilibrate_flux(mesh, setup, STATE_D, {"u": u_D})
    xN = equilibrate_flux(mesh, setup, ADJ_N, {"u": u_N, "theta": theta})
    xD = equilibrate_flux(mesh, setup, ADJ_D, {"u": u_D, "theta": theta})
    eN, cN = bound_energy_error(mesh, setup, STATE_N, {"flux": sN, "u": u_N})
    eD, cD = bound_energy_error(mesh, setup, STATE_D, {"flux": sD, "u": u_D})
    rN, dN = bound_energy_error(mesh, setup, ADJ_N, {"flux": xN, "u": u_N, "r": r_N, "theta": theta})
    rD, dD = bound_energy_error(mesh, setup, ADJ_D, {"flux": xD, "u": u_D, "r": r_D, "theta": theta})
    return (eN, rN, eD, rD), (cN, dN, cD, dD), (r_N, r_D)


def certify_direction(mesh, setup, pairs, theta, directional):
    """Full certification data for a descent field on ``mesh``."""
    bounds, contribs = [], []
    for j, pair in enumerate(pairs):
        b, c, _ = measurement_bounds(mesh, setup, j, pair, theta)
        bounds.append(b)
        contribs.append(c)
    return combined_bound(bounds, directional, contribs)


def mark_for_refinement(eta, fraction=DORFLER_DEFAULT):
    """Smallest greedy set with ``sum eta^2 >= fraction * total`` (Dorfler)."""
    eta = np.asarray(eta, dtype=np.float64)
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must lie in (0, 1]")
    if np.any(eta < 0):
        raise ValueError("indicators must be nonnegative")
    sq = eta ** 2
    total = sq.sum()
    if total == 0.0:
        return np.empty(0, dtype=np.int64)
    if fraction >= 1.0:
        return np.flatnonzero(eta > 0)
    order = np.argsort(-sq, kind="stable")
    csum = np.cumsum(sq[order])
    k = int(np.searchsorted(csum, fraction * total * (1.0 - 1e-12))) + 1
    return np.sort(order[:min(k, len(order))])
