"""Experiment drivers behind the CLI commands."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import cda, certify, eit, fem
from ..fem import STATE_D, STATE_N
from ..mesh import INTERFACE, as_root, generate_disk_mesh, move_vertices, refine_uniform
from . import export

log = logging.getLogger(__name__)


class ExperimentFailure(AssertionError):
    """A hard experiment assertion failed (e.g. an effectivity below one)."""


# ---------------------------------------------------------------------------
# shared helpers


def fit_rate(h, err):
    """Least-squares slope of ``log err`` against ``log h``."""
    h, err = np.asarray(h, dtype=np.float64), np.asarray(err, dtype=np.float64)
    if len(h) < 2:
        return float("nan")
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def true_energy_error(mesh, conductivity, u_h, exact):
    """Energy error against ``exact(x, y) -> (u, ux, uy)`` with a degree-5 rule."""
    lam, w = fem.TRI7_POINTS, fem.TRI7_WEIGHTS
    pts = np.einsum("qk,tkd->tqd", lam, mesh.coords)
    ue, ux, uy = exact(pts[..., 0], pts[..., 1])
    loc = np.asarray(getattr(u_h, "coefficients", u_h))[mesh.triangles]
    uh = np.einsum("qk,tk->tq", lam, loc)
    gu = np.einsum("tk,tkd->td", loc, mesh.grads)
    k = fem.element_conductivity(mesh, conductivity)
    integrand = k[:, None] * ((ux - gu[:, None, 0]) ** 2 + (uy - gu[:, None, 1]) ** 2) + (ue - uh) ** 2
    return float(np.sqrt((integrand * w).sum(axis=1) @ mesh.areas))


def _densify(poly, step):
    out = []
    for a, b in zip(poly[:-1], poly[1:]):
        n = max(1, int(np.ceil(np.hypot(*(b - a)) / step)))
        t = np.arange(n)[:, None] / n
        out.append(a + t * (b - a))
    out.append(poly[-1:])
    return np.vstack(out)


def _distance_to_polyline(points, poly, block=4096):
    """Exact distance from each point to the open polyline ``poly``."""
    a, d = poly[:-1], np.diff(poly, axis=0)
    dd = np.maximum((d * d).sum(axis=1), np.finfo(float).tiny)
    out = np.empty(len(points))
    for s in range(0, len(points), block):
        p = points[s:s + block, None, :] - a[None]
        t = np.clip((p * d[None]).sum(axis=2) / dd, 0.0, 1.0)
        r = p - t[..., None] * d[None]
        out[s:s + block] = np.sqrt((r * r).sum(axis=2).min(axis=1))
    return out


def interface_stats(mesh, shapes):
    """Distances between the mesh interface and the exact target curves.

    Returns ``dict(hausdorff, max_vertex_distance, mean_edge)``.  Distances are
    measured to the segments of each polyline, so only the sampling of the
    curve being scanned limits accuracy.
    """
    targets = [s.sample(2000) for s in shapes]
    polys = export.interface_polylines(mesh)
    e = mesh.labelled_edges(INTERFACE)
    mean_edge = float(np.hypot(*(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]).T).mean())

    def to_targets(pts):
        return np.min([_distance_to_polyline(pts, t) for t in targets], axis=0)

    def to_interface(pts):
        return np.min([_distance_to_polyline(pts, p) for p in polys], axis=0)

    curve = np.vstack([_densify(p, mean_edge / 20) for p in polys])
    verts = mesh.vertices[np.unique(e)]
    return {
        "hausdorff": float(max(to_targets(curve).max(), to_interface(np.vstack(targets)).max())),
        "max_vertex_distance": float(to_targets(verts).max()),
        "mean_edge": mean_edge,
    }


def build_setup(cfg):
    """Synthesize Dirichlet data on the target geometry for every flux."""
    target = cfg.geometry.target_mesh()
    measurements = []
    for g in cfg.data.fluxes():
        U_D, dm = cda.synthesize_dirichlet_data(target, g, cfg.data.conductivity, cfg.data.data_tol)
        measurements.append(eit.Measurement(g, U_D, dm))
    return eit.EitSetup(cfg.data.conductivity, measurements)


# ---------------------------------------------------------------------------
# convergence / estimator validation


@dataclass
class LevelReport:
    level: int
    h: float
    dofs: int
    err_N: float
    bound_N: float
    err_D: float
    bound_D: float
    err_rN: float = float("nan")
    bound_rN: float = float("nan")
    err_rD: float = float("nan")
    bound_rD: float = float("nan")
    E_h: float = float("nan")
    E_tilde: float = float("nan")
    E_bar: float = float("nan")

    @property
    def eff_N(self):
        return self.bound_N / self.err_N

    @property
    def eff_D(self):
        return self.bound_D / self.err_D


@dataclass
class ValidationReport:
    levels: list = field(default_factory=list)
    rate_N: float = float("nan")
    rate_bound_N: float = float("nan")
    rate_D: float = float("nan")
    rate_E_bar: float = float("nan")
    seconds: float = 0.0

    @property
    def qoi_levels(self):
        return [lv for lv in self.levels if np.isfinite(lv.E_bar)]

    def table(self):
        head = ("level", "h", "dofs", "err_N", "bound_N", "eff_N", "err_D", "bound_D", "eff_D",
                "E_h", "E_tilde", "E_bar")
        rows = [" ".join(f"{c:>11}" for c in head)]
        for lv in self.levels:
            vals = (lv.level, lv.h, lv.dofs, lv.err_N, lv.bound_N, lv.eff_N, lv.err_D, lv.bound_D, lv.eff_D,
                    lv.E_h, lv.E_tilde, lv.E_bar)
            rows.append(" ".join(f"{v:>11}" if isinstance(v, (int, np.integer)) else f"{v:>11.4e}" for v in vals))
        rows.append(f"rates: N {self.rate_N:.3f}  bound_N {self.rate_bound_N:.3f}  D {self.rate_D:.3f}  "
                    f"E_bar {self.rate_E_bar:.3f}")
        return "\n".join(rows)


def validation_theta(mesh, radius=eit.RHO_E):
    """Smooth test field vanishing on the outer circle."""
    x, y = mesh.vertices.T
    cut = 1.0 - (x * x + y * y) / radius ** 2
    return fem.vec_field(mesh, np.stack([cut * (1.0 + 0.3 * y), cut * (0.5 - 0.2 * x)], axis=1))


def _qoi_level(m, setup, pair, theta, n_ref):
    kc = setup.conductivity
    bounds, _, (rN, rD) = certify.measurement_bounds(m, setup, 0, pair, theta)
    ref = refine_uniform(m, n_ref, project=False)
    P = fem.prolongation_matrix(m, ref)
    pr = eit.solve_states(ref, setup, 0)
    th = fem.prolong(theta, ref)
    PuN, PuD = P @ pair.u_N.coefficients, P @ pair.u_D.coefficients
    rNr = certify.solve_influence(ref, setup, 0, PuN, th, certify.N)
    rDr = certify.solve_influence(ref, setup, 0, PuD, th, certify.D)
    eN, eD = pr.u_N.coefficients - PuN, pr.u_D.coefficients - PuD
    out = {
        "err_rN": fem.energy_norm(ref, kc, rNr.coefficients - P @ rN.coefficients),
        "err_rD": fem.energy_norm(ref, kc, rDr.coefficients - P @ rD.coefficients),
        "bound_rN": bounds[1], "bound_rD": bounds[3],
        "E_tilde": float(eit.dG_du_form(ref, setup, PuN, th) @ eN - eit.dG_du_form(ref, setup, PuD, th) @ eD),
        "E_h": (eit.operator_G(ref, kc, pr.u_N, th) - eit.operator_G(ref, kc, pr.u_D, th))
               - (eit.operator_G(ref, kc, PuN, th) - eit.operator_G(ref, kc, PuD, th)),
        "E_bar": bounds[0] * bounds[1] + bounds[2] * bounds[3],
    }
    return out


def cmd_convergence(cfg):
    """Estimator validation on the analytic disk problem (uniform refinement)."""
    t0 = time.perf_counter()
    c = cfg.convergence
    m = generate_disk_mesh(eit.RHO_E, eit.RHO_I, c.h0, curved_interface=True)
    report = ValidationReport()
    kc = (eit.K_I, eit.K_E)
    for level in range(c.levels):
        setup = eit.validation_setup(m)
        pair = eit.solve_states(m, setup, 0)
        sN = certify.equilibrate_flux(m, setup, STATE_N, {"j": 0})
        sD = certify.equilibrate_flux(m, setup, STATE_D, {"u": pair.u_D})
        bN, _ = certify.bound_energy_error(m, setup, STATE_N, {"flux": sN, "u": pair.u_N})
        bD, _ = certify.bound_energy_error(m, setup, STATE_D, {"flux": sD, "u": pair.u_D})
        err_N = true_energy_error(m, kc, pair.u_N, eit.analytic_xy)
        err_D = true_energy_error(m, kc, pair.u_D, eit.analytic_xy)
        lv = LevelReport(level, m.h, m.n_vertices, err_N, bN, err_D, bD)
        if level < c.qoi_levels:
            for k, v in _qoi_level(m, setup, pair, validation_theta(m), c.reference_levels).items():
                setattr(lv, k, v)
        report.levels.append(lv)
        log.info("level %d: dofs=%d err_N=%.4e eff_N=%.3f", level, m.n_vertices, err_N, lv.eff_N)
        if level + 1 < c.levels:
            m = as_root(refine_uniform(m))
    hs = [lv.h for lv in report.levels]
    report.rate_N = fit_rate(hs, [lv.err_N for lv in report.levels])
    report.rate_bound_N = fit_rate(hs, [lv.bound_N for lv in report.levels])
    report.rate_D = fit_rate(hs, [lv.err_D for lv in report.levels])
    q = report.qoi_levels
    report.rate_E_bar = fit_rate([lv.h for lv in q], [lv.E_bar for lv in q])
    report.seconds = time.perf_counter() - t0
    return report


def check_validation(report):
    """Hard assertions: guaranteed bounds above the analytic errors."""
    bad = [lv.level for lv in report.levels if lv.eff_N < 1.0]
    if bad:
        raise ExperimentFailure(f"Neumann effectivity below one at levels {bad}")
    return True


# ---------------------------------------------------------------------------
# CDA runs


@dataclass
class RunReport:
    records: list
    stop_reason: str
    initial_mesh: object
    final_mesh: object
    hausdorff: float
    max_vertex_distance: float
    mean_edge: float
    seconds: float
    paths: list = field(default_factory=list)

    @property
    def J(self):
        return [r.J for r in self.records]


def _final_fields(mesh, setup, theta):
    pair = eit.solve_states(mesh, setup, 0)
    fields = {"u_N": pair.u_N.coefficients, "u_D": pair.u_D.coefficients}
    coeffs = getattr(theta, "coefficients", None)
    if coeffs is not None and coeffs.size == 2 * mesh.n_vertices:
        fields["theta"] = coeffs
    return fields


def cmd_run(cfg, outdir=None, callback=None):
    """Run the certified descent and export records, meshes and plots."""
    t0 = time.perf_counter()
    setup = build_setup(cfg)
    initial = cfg.geometry.mesh()
    res = cda.run_cda(initial, setup, cfg.cda, callback=callback)
    stats = interface_stats(res.mesh, cfg.geometry.target)
    report = RunReport(res.records, res.stop_reason, initial, res.mesh, stats["hausdorff"],
                       stats["max_vertex_distance"], stats["mean_edge"], 0.0)
    if outdir is not None:
        target = [s.sample() for s in cfg.geometry.target]
        report.paths = export.export_results(res.records, {"initial": initial, "final": res.mesh},
                                             _final_fields(res.mesh, setup, res.theta), outdir, target,
                                             record_timing=cfg.record_timing)
    report.seconds = time.perf_counter() - t0
    return report


def check_run(report):
    """Soundness of a finished run: every accepted step certified, J strictly decreasing."""
    for r in report.records:
        if not r.directional + r.Ebar < 0.0:
            raise ExperimentFailure(f"iteration {r.iter} accepted without certification")
        if not r.J_new < r.J:
            raise ExperimentFailure(f"iteration {r.iter} did not decrease J")
    J = report.J
    bad = [i for i in range(1, len(J)) if not J[i] < J[i - 1]]
    if bad:
        raise ExperimentFailure(f"J not strictly decreasing at iterations {bad}")
    if report.stop_reason not in (cda.CERTIFIED_STOP, cda.DOF_CAP, cda.MAX_ITERS):
        raise ExperimentFailure(f"run stopped with {report.stop_reason}")
    return True


# ---------------------------------------------------------------------------
# gradient check


def random_theta(mesh, rng, domain="disk", outer=eit.RHO_E):
    """Seeded smooth vector field vanishing on the outer boundary."""
    x, y = mesh.vertices.T / outer
    if domain == "disk":
        cut = 1.0 - (x * x + y * y)
    else:
        cut = (1.0 - x * x) * (1.0 - y * y)
    basis = np.stack([np.ones_like(x), x, y, x * y, x * x, y * y], axis=1)
    coef = rng.standard_normal((6, 2))
    vals = cut[:, None] * (basis @ coef)
    vals[mesh.outer_vertex_mask] = 0.0
    return fem.vec_field(mesh, vals)


@dataclass
class GradRow:
    mesh: int
    sample: int
    t: float
    analytic: float
    fd: float

    @property
    def mismatch(self):
        if self.analytic == 0.0 and self.fd == 0.0:
            return 0.0
        return abs(self.fd - self.analytic) / max(abs(self.analytic), np.finfo(float).tiny)


def central_difference(mesh, setup, theta, t):
    Jp = eit.kohn_vogelius(mp := move_vertices(mesh, theta, t), setup, eit.solve_all_states(mp, setup))
    Jm = eit.kohn_vogelius(mm := move_vertices(mesh, theta, -t), setup, eit.solve_all_states(mm, setup))
    return (Jp - Jm) / (2.0 * t)


def cmd_gradcheck(cfg):
    """Central differences of ``J`` against the assembled covector."""
    setup = build_setup(cfg)
    rows = []
    g = cfg.geometry
    for mi, h in enumerate(cfg.gradcheck.meshes):
        mesh = g.mesh(h=h)
        _, L, _ = eit.misfit_and_gradient(mesh, setup)
        zero = fem.vec_field(mesh, np.zeros((mesh.n_vertices, 2)))
        rows.append(GradRow(mi, -1, cfg.gradcheck.steps[0], 0.0, central_difference(mesh, setup, zero, 1.0)))
        for s in range(cfg.gradcheck.samples):
            rng = np.random.default_rng([cfg.seed, mi, s])
            theta = random_theta(mesh, rng, g.domain, g.outer)
            an = float(L @ theta.coefficients)
            for t in cfg.gradcheck.steps:
                rows.append(GradRow(mi, s, t, an, central_difference(mesh, setup, theta, t)))
    return rows


GRADCHECK_STEP = 1e-4
GRADCHECK_RTOL = 1e-4


def check_gradcheck(rows):
    """Relative mismatch at ``t = 1e-4`` must not exceed ``1e-4``."""
    bad = [r for r in rows if r.t == GRADCHECK_STEP and r.mismatch > GRADCHECK_RTOL]
    if bad:
        worst = max(bad, key=lambda r: r.mismatch)
        raise ExperimentFailure(f"{len(bad)} gradient checks above {GRADCHECK_RTOL:g} "
                                f"(worst {worst.mismatch:.2e} on mesh {worst.mesh}, sample {worst.sample})")
    return True


def gradcheck_table(rows):
    out = [f"{'mesh':>4} {'sample':>6} {'t':>8} {'analytic':>14} {'central diff':>14} {'rel mismatch':>12}"]
    for r in rows:
        out.append(f"{r.mesh:>4} {r.sample:>6} {r.t:>8.0e} {r.analytic:>14.6e} {r.fd:>14.6e} {r.mismatch:>12.3e}")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# forward solve


def cmd_forward(cfg, outdir=None):
    """Solve the states on the initial geometry; returns ``(J, paths)``."""
    setup = build_setup(cfg)
    mesh = cfg.geometry.mesh()
    pairs = eit.solve_all_states(mesh, setup)
    J = eit.kohn_vogelius(mesh, setup, pairs)
    paths = []
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        fields = {}
        for j, p in enumerate(pairs):
            fields[f"u_N_{j}"] = p.u_N.coefficients
            fields[f"u_D_{j}"] = p.u_D.coefficients
        paths.append(export.write_vtk(mesh, outdir / "forward.vtk", fields))
    return J, paths
