import numpy as np
import pytest

from cda_eit import eit
from cda_eit.mesh import BACKGROUND, INCLUSION, INTERFACE, OUTER, Mesh, generate_disk_mesh


def conformity_violations(mesh):
    """Independent mesh checker; returns a list of problems (empty if fine).

    Written without reusing any library helper: edges are counted through a
    plain dictionary, orientation through explicit cross products.
    """
    problems = []
    V = np.asarray(mesh.vertices)
    T = np.asarray(mesh.triangles)
    tags = np.asarray(mesh.tags)
    for k, (a, b, c) in enumerate(T):
        cross = (V[b, 0] - V[a, 0]) * (V[c, 1] - V[a, 1]) - (V[b, 1] - V[a, 1]) * (V[c, 0] - V[a, 0])
        if not cross > 0:
            problems.append(f"triangle {k} not counterclockwise")
    owners = {}
    for k, (a, b, c) in enumerate(T):
        for p, q in ((a, b), (b, c), (c, a)):
            owners.setdefault((min(p, q), max(p, q)), []).append(k)
    if any(len(v) > 2 for v in owners.values()):
        problems.append("edge shared by more than two triangles")
    # hanging nodes: a vertex lying strictly inside an edge it does not belong to
    on_boundary = {e for e, v in owners.items() if len(v) == 1}
    labels = {(min(p, q), max(p, q)): int(l) for (p, q), l in zip(mesh.boundary_edges, mesh.boundary_labels)}
    for e, lab in labels.items():
        if e not in owners:
            problems.append(f"labelled edge {e} is not a mesh edge")
            continue
        ts = owners[e]
        if lab == OUTER and len(ts) != 1:
            problems.append(f"OUTER edge {e} bounds {len(ts)} triangles")
        if lab == INTERFACE:
            if len(ts) != 2 or sorted(int(tags[t]) for t in ts) != [BACKGROUND, INCLUSION]:
                problems.append(f"INTERFACE edge {e} does not separate the regions")
    for e in on_boundary:
        if labels.get(e) != OUTER:
            problems.append(f"boundary edge {e} not labelled OUTER")
    for e, ts in owners.items():
        if len(ts) == 2 and tags[ts[0]] != tags[ts[1]] and labels.get(e) != INTERFACE:
            problems.append(f"region change across unlabelled edge {e}")
    for lab in (OUTER, INTERFACE):
        deg = {}
        for e, l in labels.items():
            if l == lab:
                for v in e:
                    deg[v] = deg.get(v, 0) + 1
        if any(d % 2 for d in deg.values()):
            problems.append(f"label {lab} edges do not form closed loops")
    return problems


def assert_conforming(mesh):
    problems = conformity_violations(mesh)
    assert not problems, problems[:5]


def single_triangle(p0=(0.0, 0.0), p1=(1.0, 0.0), p2=(0.0, 1.0)):
    V = np.array([p0, p1, p2], dtype=float)
    return Mesh(V, [[0, 1, 2]], [BACKGROUND], [[0, 1], [1, 2], [0, 2]], [OUTER] * 3)


def unit_square(n=1):
    """Structured unit-square mesh, ``2 n^2`` triangles, all BACKGROUND."""
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    V = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (n + 1) + j

    tris, bnd = [], []
    for i in range(n):
        for j in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris += [(a, b, c), (a, c, d)]
    for i in range(n):
        bnd += [(vid(i, 0), vid(i + 1, 0)), (vid(i, n), vid(i + 1, n)),
                (vid(0, i), vid(0, i + 1)), (vid(n, i), vid(n, i + 1))]
    bnd = [tuple(sorted(e)) for e in bnd]
    return Mesh(V, tris, [BACKGROUND] * len(tris), bnd, [OUTER] * len(bnd))


@pytest.fixture(scope="session")
def disk():
    return generate_disk_mesh(eit.RHO_E, eit.RHO_I, 1.0)


@pytest.fixture(scope="session")
def small_disk():
    return generate_disk_mesh(3.0, 1.5, 0.6)


def smooth_field(mesh, seed=0, outer=None):
    """Seeded smooth displacement vanishing on the outer circle, as (nv, 2)."""
    rng = np.random.default_rng(seed)
    r = outer if outer is not None else mesh.outer_radius
    x, y = mesh.vertices.T / r
    cut = 1.0 - x * x - y * y
    basis = np.stack([np.ones_like(x), x, y, x * y], axis=1)
    vals = cut[:, None] * (basis @ rng.standard_normal((4, 2)))
    vals[mesh.outer_vertex_mask] = 0.0
    return vals
