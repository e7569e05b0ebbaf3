"""End-to-end acceptance checks on the bundled experiment configurations.

Each test prints one ``criterion N: PASS|FAIL`` line (visible even with
output capture) before asserting.  The whole module takes several minutes;
deselect it with ``-m "not acceptance"``.
"""

import time

import numpy as np
import pytest

from cda_eit import cda
from cda_eit.harness import experiments as ex
from cda_eit.harness.config import load_config

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return report


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def convergence():
    return timed(ex.cmd_convergence, load_config("convergence"))


@pytest.fixture(scope="module")
def two_mesh(tmp_path_factory):
    out = tmp_path_factory.mktemp("two_mesh")
    return timed(ex.cmd_run, load_config("circle_two_mesh"), outdir=out)


@pytest.fixture(scope="module")
def one_mesh():
    return timed(ex.cmd_run, load_config("circle_one_mesh"))


@pytest.fixture(scope="module")
def ellipse():
    return timed(ex.cmd_run, load_config("ellipse"))


def test_1_energy_convergence(convergence, verdict):
    rep, secs = convergence
    ok = len(rep.levels) >= 4 and abs(rep.rate_N - 1.0) <= 0.15 and secs < 300
    verdict(1, ok, f"levels {len(rep.levels)}, rate {rep.rate_N:.3f}, {secs:.1f} s")


def test_2_guaranteed_bound(convergence, verdict):
    rep, _ = convergence
    eff = np.array([lv.eff_N for lv in rep.levels])
    verdict(2, bool(np.all(eff >= 1.0) and np.all(eff <= 5.0)),
            "effectivities " + " ".join(f"{e:.3f}" for e in eff))


def test_3_qoi_bound(convergence, verdict):
    rep, _ = convergence
    q = rep.qoi_levels
    ordered = all(lv.E_bar >= abs(lv.E_tilde) for lv in q)
    fine = q[-1]
    gap = abs(abs(fine.E_tilde) - abs(fine.E_h)) / abs(fine.E_h)
    ok = len(q) >= 3 and ordered and gap <= 0.2
    verdict(3, ok, f"levels {len(q)}, Ebar >= |E~| everywhere: {ordered}, finest gap {100 * gap:.1f}%")


def test_4_gradient_check(verdict):
    cfg = load_config("gradcheck")
    rows, secs = timed(ex.cmd_gradcheck, cfg)
    used = [r for r in rows if r.t == ex.GRADCHECK_STEP and r.sample >= 0]
    worst = max(r.mismatch for r in used)
    meshes = len({r.mesh for r in used})
    samples = len({(r.mesh, r.sample) for r in used})
    ok = meshes >= 3 and samples >= 15 and worst <= 1e-4 and secs < 60
    verdict(4, ok, f"{meshes} meshes x {samples // max(meshes, 1)} fields, worst {worst:.2e}, {secs:.1f} s")


def test_5_soundness(two_mesh, verdict):
    rep, secs = two_mesh
    steps = all(r.directional + r.Ebar < 0 and r.J_new < r.J for r in rep.records)
    J = rep.J
    decreasing = all(b < a for a, b in zip(J, J[1:]))
    stop = rep.stop_reason in (cda.CERTIFIED_STOP, cda.DOF_CAP)
    close = rep.hausdorff <= 2 * rep.mean_edge
    ok = steps and decreasing and stop and close and secs < 1200
    verdict(5, ok, f"{len(rep.records)} iterations, stop {rep.stop_reason}, hausdorff {rep.hausdorff:.4f} "
                   f"vs 2 edges {2 * rep.mean_edge:.4f}, {secs:.0f} s")


def test_6_one_vs_two_mesh(one_mesh, two_mesh, verdict):
    one, _ = one_mesh
    two, _ = two_mesh
    verdict(6, one.hausdorff > two.hausdorff,
            f"ONE_MESH {one.hausdorff:.4f} ({one.stop_reason}) vs TWO_MESH {two.hausdorff:.4f}")


def test_7_dof_signature(ellipse, verdict):
    rep, secs = ellipse
    dofs = [r.dofs for r in rep.records]
    third = max(1, len(dofs) // 3)
    early = all(d <= 4 * dofs[0] for d in dofs[:third])
    later = dofs[third - 1:]
    grows = all(b >= a for a, b in zip(later, later[1:])) and later[-1] > later[0]
    ok = len(dofs) >= 3 and early and grows
    verdict(7, ok, f"{len(dofs)} iterations, dofs {dofs[0]} -> {dofs[third - 1]} (first third) -> {dofs[-1]}, "
                   f"stop {rep.stop_reason}, {secs:.0f} s")


def test_8_determinism(two_mesh, tmp_path, verdict):
    first, _ = two_mesh
    second = ex.cmd_run(load_config("circle_two_mesh"), outdir=tmp_path)
    a = next(p for p in first.paths if p.name == "records.csv").read_bytes()
    b = next(p for p in second.paths if p.name == "records.csv").read_bytes()
    verdict(8, a == b and len(a) > 0, f"{len(a)} bytes, identical: {a == b}")
