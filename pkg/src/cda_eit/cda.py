"""Certified descent driver.

Each outer iteration solves the states, builds the descent field, and checks
that the computed directional derivative stays negative after adding the
guaranteed error bound.  If not, the state mesh is refined where the
indicator is large and the iteration restarts; once certified, an Armijo
backtracking step moves the mesh(es).
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import certify, descent, eit, fem
from .mesh import ElementInversionError, INTERFACE, as_root, move_vertices, rebase, refine, refine_uniform

log = logging.getLogger(__name__)

ONE_MESH = "ONE_MESH"
TWO_MESH = "TWO_MESH"

CERTIFIED_STOP = "CERTIFIED_STOP"
DOF_CAP = "DOF_CAP"
MAX_ITERS = "MAX_ITERS"
MAX_BACKTRACKS = "MAX_BACKTRACKS"


class ArmijoError(RuntimeError):
    """No admissible step within the backtracking budget (MAX_BACKTRACKS)."""


@dataclass
class CdaConfig:
    """Driver parameters.

    ``mu0`` bounds the relative element distortion of the trial step: the
    first Armijo trial is ``mu0 / max_K |grad theta|_K``.
    """

    tol: float = 1e-6
    alpha: float = 0.1
    mu0: float = 0.4
    backtrack: float = 0.5
    max_backtracks: int = 25
    dorfler: float = certify.DORFLER_DEFAULT
    strategy: str = TWO_MESH
    fine_levels: int = 1
    max_dofs: int = 200_000
    max_iters: int = 100
    max_retries: int = 8
    coarse_ratio: float = 4.0

    def validate(self):
        checks = [
            (self.tol > 0, "tol must be positive"),
            (0 < self.alpha < 1, "alpha must lie in (0, 1)"),
            (self.mu0 > 0, "mu0 must be positive"),
            (0 < self.backtrack < 1, "backtrack factor must lie in (0, 1)"),
            (self.max_backtracks >= 1, "max_backtracks must be >= 1"),
            (0 < self.dorfler <= 1, "dorfler fraction must lie in (0, 1]"),
            (self.strategy in (ONE_MESH, TWO_MESH), f"unknown strategy {self.strategy!r}"),
            (self.fine_levels >= 0, "fine_levels must be >= 0"),
            (self.max_dofs > 0, "max_dofs must be positive"),
            (self.max_iters >= 1, "max_iters must be >= 1"),
            (self.max_retries >= 0, "max_retries must be >= 0"),
            (self.coarse_ratio >= 1, "coarse_ratio must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        return self


@dataclass
class IterationRecord:
    iter: int
    J: float
    directional: float
    Ebar: float
    mu: float
    dofs: int
    retries: int
    seconds: float
    J_new: float = float("nan")

    def as_dict(self):
        return asdict(self)


@dataclass(eq=False)
class CdaResult:
    mesh: object
    records: list
    stop_reason: str
    coarse_mesh: object = None
    pairs: list = field(default_factory=list)
    theta: object = None

    def __iter__(self):
        return iter((self.mesh, self.records, self.stop_reason))


# ---------------------------------------------------------------------------
# line search


def armijo_search(objective, J0, directional, mu_init, config):
    """Backtrack from ``mu_init`` until ``J(mu) <= J0 + alpha mu directional``.

    ``objective(mu)`` returns the trial value or raises
    :class:`~cda_eit.mesh.ElementInversionError`, which counts as a rejection.
    Returns ``(mu, J(mu), trial_result)`` where ``trial_result`` is whatever
    ``objective`` attached as second return value (if it returns a tuple).
    """
    if not directional < 0:
        raise ValueError("Armijo search needs a negative directional derivative")
    mu = float(mu_init)
    for _ in range(config.max_backtracks + 1):
        try:
            out = objective(mu)
        except ElementInversionError:
            mu *= config.backtrack
            continue
        val, extra = out if isinstance(out, tuple) else (out, None)
        if val <= J0 + config.alpha * mu * directional:
            return mu, val, extra
        mu *= config.backtrack
    raise ArmijoError(f"no admissible step after {config.max_backtracks} backtracks")


def initial_step(mesh, theta, fraction):
    """Trial step ``fraction / max_K |grad theta|_K`` (Frobenius norm per element).

    The deformation ``x + mu theta`` then changes no element's Jacobian by
    more than ``fraction`` in norm, independently of the mesh size.
    """
    nodal = np.asarray(getattr(theta, "coefficients", theta)).reshape(2, -1).T
    grad = np.einsum("tkc,tkd->tcd", nodal[mesh.triangles], mesh.grads)
    gmax = float(np.sqrt((grad ** 2).sum(axis=(1, 2))).max()) if mesh.n_triangles else 0.0
    if gmax == 0.0:
        return 0.0
    return fraction / gmax


def armijo_step(mesh, setup, theta_h, J0, directional, config, mu_init=None, companions=()):
    """Armijo step for the state mesh; ``companions`` are ``(mesh, theta)`` moved alongside.

    Returns ``(mu, J_new)``; the moved meshes are available via
    :func:`armijo_move`.
    """
    mu, J_new, _ = armijo_move(mesh, setup, theta_h, J0, directional, config, mu_init, companions)
    return mu, J_new


def armijo_move(mesh, setup, theta_h, J0, directional, config, mu_init=None, companions=()):
    if mu_init is None:
        mu_init = initial_step(mesh, theta_h, config.mu0)

    def objective(mu):
        moved = move_vertices(mesh, theta_h, mu)
        others = [move_vertices(m, th, mu) for m, th in companions]
        pairs = eit.solve_all_states(moved, setup)
        return eit.kohn_vogelius(moved, setup, pairs), (moved, others)

    mu, J_new, (moved, others) = armijo_search(objective, J0, directional, mu_init, config)
    return mu, J_new, (moved, others)


# ---------------------------------------------------------------------------
# driver


def _interface_edge(mesh):
    """Mean INTERFACE edge length (inf without interface)."""
    e = mesh.labelled_edges(INTERFACE)
    if len(e) == 0:
        return np.inf
    d = mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]
    return float(np.hypot(d[:, 0], d[:, 1]).mean())


def _coarse_needs_refinement(coarse, fine, ratio):
    # mean lengths: a single locally refined spot must not refine the whole coarse mesh
    return _interface_edge(coarse) > ratio * (1.0 + 1e-9) * _interface_edge(fine)


def _restrict(P, L_fine, coarse):
    nvf = P.shape[0]
    Lc = np.concatenate([P.T @ L_fine[:nvf], P.T @ L_fine[nvf:]])
    Lc.reshape(2, -1)[:, coarse.outer_vertex_mask] = 0.0
    return Lc


def run_cda(mesh, setup, config=None, fine_mesh=None, callback=None):
    """Certified descent from the initial shape encoded in ``mesh``.

    With ``TWO_MESH`` the descent field lives on ``mesh`` (coarse) while
    states, bounds and adaptation use a nested fine mesh (``fine_mesh`` or
    ``fine_levels`` uniform refinements of ``mesh``).  ``fine_levels = 0``
    makes both meshes coincide, i.e. the one-mesh algorithm.

    Returns a :class:`CdaResult` (unpacks as ``mesh, records, stop_reason``).
    """
    config = (config or CdaConfig()).validate()
    coarse = as_root(mesh)
    two = config.strategy == TWO_MESH and (fine_mesh is not None or config.fine_levels > 0)
    fine = None
    if two:
        fine = fine_mesh if fine_mesh is not None else refine_uniform(coarse, config.fine_levels)
        if fine.origin_uid != coarse.uid:
            raise ValueError("fine mesh must be a recorded refinement of the coarse mesh")

    records = []
    pairs, theta_state = [], None
    reason = MAX_ITERS
    for ell in range(config.max_iters):
        t0 = time.perf_counter()
        retries = 0
        while True:
            state_mesh = fine if two else coarse
            if state_mesh.n_vertices > config.max_dofs:
                reason = DOF_CAP
                break
            pairs = eit.solve_all_states(state_mesh, setup)
            J = eit.kohn_vogelius(state_mesh, setup, pairs)
            L = eit.shape_gradient_vector(state_mesh, setup, pairs)
            if two:
                P = fem.prolongation_matrix(coarse, fine)
                res = descent.solve_descent(coarse, _restrict(P, L, coarse))
                theta_state = fem.prolong(res.theta_h, fine)
            else:
                res = descent.solve_descent(coarse, L)
                theta_state = res.theta_h
            bound = certify.certify_direction(state_mesh, setup, pairs, theta_state, res.directional)
            log.debug("iter %d retry %d: dofs=%d J=%.6e directional=%.6e Ebar=%.6e", ell, retries,
                      state_mesh.n_vertices, J, res.directional, bound.E_bar)
            if bound.certified:
                break
            if retries >= config.max_retries:
                reason = DOF_CAP
                break
            retries += 1
            marks = certify.mark_for_refinement(bound.eta, config.dorfler)
            if two:
                fine = refine(fine, marks)
                if _coarse_needs_refinement(coarse, fine, config.coarse_ratio):
                    c1 = refine_uniform(coarse)
                    fine = rebase(fine, c1)
                    coarse = as_root(c1)
            else:
                coarse = as_root(refine(coarse, marks))
        if reason == DOF_CAP:
            break

        companions = [(coarse, res.theta_h)] if two else []
        try:
            mu_init = initial_step(coarse, res.theta_h, config.mu0)
            mu, J_new, (moved, others) = armijo_move(state_mesh, setup, theta_state, J, res.directional,
                                                     config, mu_init, companions)
        except ArmijoError:
            reason = MAX_BACKTRACKS
            break
        if two:
            fine, coarse = moved, others[0]
        else:
            coarse = moved
        rec = IterationRecord(ell, J, res.directional, bound.E_bar, mu, state_mesh.n_vertices, retries,
                              time.perf_counter() - t0, J_new)
        records.append(rec)
        if callback is not None:
            callback(rec, fine if two else coarse)
        if abs(res.directional) + bound.E_bar <= config.tol:
            reason = CERTIFIED_STOP
            break

    final = fine if two else coarse
    return CdaResult(final, records, reason, coarse, pairs, theta_state)


# ---------------------------------------------------------------------------
# data synthesis


def synthesize_dirichlet_data(target_mesh, g, conductivity, tol_data, max_levels=6):
    """Neumann solve on uniformly refined target meshes until the certified
    relative error ``bound / |||u_h|||`` drops to ``tol_data``.

    Returns ``(U_D over the OUTER vertices, mesh)``.  Raises ``RuntimeError``
    when ``max_levels`` refinements do not suffice.
    """
    probe = eit.EitSetup(conductivity, [eit.Measurement(g, np.zeros(int(target_mesh.outer_vertex_mask.sum())),
                                                        target_mesh)])
    mesh = target_mesh
    for level in range(max_levels + 1):
        u = fem.solve_spd(fem.assemble_state(mesh, conductivity, fem.NEUMANN, g))
        flux = certify.equilibrate_flux(mesh, probe, fem.STATE_N, {"g": g})
        bound, _ = certify.bound_energy_error(mesh, probe, fem.STATE_N, {"flux": flux, "u": u})
        if bound <= tol_data * fem.energy_norm(mesh, conductivity, u):
            return u[mesh.outer_vertex_mask], mesh
        if level < max_levels:
            mesh = refine_uniform(mesh)
    raise RuntimeError(f"data tolerance {tol_data:g} not reached after {max_levels} refinements")
