"""Conforming triangular meshes with region tags.

A :class:`Mesh` is immutable.  Every operation (generation, red-green
refinement, vertex motion) returns a new mesh; derived connectivity is
computed lazily and cached on the instance.

Triangles are tagged ``BACKGROUND`` (0) or ``INCLUSION`` (1).  Labelled
edges are ``OUTER`` (on the body boundary) or ``INTERFACE`` (between the
two regions).  Edges are stored low-index -> high-index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _kernels

BACKGROUND, INCLUSION = 0, 1
OUTER, INTERFACE = 0, 1

# signed area <= INVERSION_RTOL * mean area counts as an inverted element
INVERSION_RTOL = 1e-14

_uids = itertools.count(1)


class MeshError(ValueError):
    """Invalid mesh or invalid mesh operation."""


class ElementInversionError(MeshError):
    """Raised when a vertex motion flips or collapses a triangle."""

    def __init__(self, triangles):
        self.triangles = np.asarray(triangles)
        super().__init__(f"ELEMENT_INVERSION: {self.triangles.size} triangle(s) inverted, "
                         f"first {self.triangles[:5].tolist()}")


class MeshFormatError(MeshError):
    """Malformed mesh file."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulation of the body with inclusion tags and labelled edges.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counterclockwise
    tags : (nt,) int8 array of ``BACKGROUND`` / ``INCLUSION``
    boundary_edges : (nb, 2) int array, each row sorted
    boundary_labels : (nb,) int8 array of ``OUTER`` / ``INTERFACE``
    outer_radius : float or None
        Radius of the (origin-centred) disk body; new outer midpoints created
        by refinement are projected onto this circle.
    interface_radius : float or None
        Same for interface midpoints.  Only set while the interface is still
        the generator circle; cleared as soon as interface vertices move.
    green_parent : (nt, 4) int array or None
        For green (bisection) triangles ``(p0, p1, p2, m)``: the parent
        triangle and the midpoint of its edge ``(p1, p2)``; -1 rows otherwise.
    origin, origin_uid
        Index of the containing triangle in the mesh with uid ``origin_uid``.
    uid : int
        Topology identity, preserved by vertex motion.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    tags: np.ndarray
    boundary_edges: np.ndarray
    boundary_labels: np.ndarray
    outer_radius: float | None = None
    interface_radius: float | None = None
    green_parent: np.ndarray | None = None
    origin: np.ndarray | None = None
    origin_uid: int | None = None
    uid: int = field(default_factory=lambda: next(_uids))

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "vertices", _frozen(self.vertices, np.float64).reshape(-1, 2))
        set_(self, "triangles", _frozen(self.triangles, np.int64).reshape(-1, 3))
        set_(self, "tags", _frozen(self.tags, np.int8))
        set_(self, "boundary_edges", _frozen(self.boundary_edges, np.int64).reshape(-1, 2))
        set_(self, "boundary_labels", _frozen(self.boundary_labels, np.int8))
        if self.green_parent is not None:
            set_(self, "green_parent", _frozen(self.green_parent, np.int64).reshape(-1, 4))
        if self.origin is None:
            set_(self, "origin", _frozen(np.arange(len(self.triangles)), np.int64))
            set_(self, "origin_uid", self.uid)
        else:
            set_(self, "origin", _frozen(self.origin, np.int64))

    def __repr__(self):
        return (f"Mesh(nv={self.n_vertices}, nt={self.n_triangles}, "
                f"inclusion={int(self.tags.sum())}, uid={self.uid})")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_edges(self):
        return len(self.edges)

    @cached_property
    def coords(self):
        """Per-triangle vertex coordinates, shape (nt, 3, 2)."""
        return self.vertices[self.triangles]

    @cached_property
    def _geometry(self):
        return _kernels.geometry(self.coords)

    @property
    def areas(self):
        return self._geometry[0]

    @property
    def grads(self):
        """Barycentric gradients per triangle, shape (nt, 3, 2)."""
        return self._geometry[1]

    @cached_property
    def _edge_data(self):
        t = self.triangles
        # local edge q joins vertices (q+1, q+2), i.e. lies opposite vertex q
        a = t[:, [1, 2, 0]]
        b = t[:, [2, 0, 1]]
        lo = np.minimum(a, b).ravel()
        hi = np.maximum(a, b).ravel()
        keys = lo * self.n_vertices + hi
        ukeys, inv = np.unique(keys, return_inverse=True)
        edges = np.stack([ukeys // self.n_vertices, ukeys % self.n_vertices], axis=1)
        signs = np.where(a < b, 1.0, -1.0)
        return edges, inv.reshape(-1, 3), signs, ukeys

    @property
    def edges(self):
        """Unique edges ``(ne, 2)``, low -> high vertex index."""
        return self._edge_data[0]

    @property
    def tri_edges(self):
        """Global edge index of local edge q (opposite vertex q), shape (nt, 3)."""
        return self._edge_data[1]

    @property
    def edge_signs(self):
        """+1 where the triangle's outward normal agrees with the global edge normal."""
        return self._edge_data[2]

    def edge_ids(self, pairs):
        """Global edge indices of vertex pairs (any order); -1 where absent."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        keys = pairs.min(axis=1) * self.n_vertices + pairs.max(axis=1)
        ukeys = self._edge_data[3]
        pos = np.searchsorted(ukeys, keys)
        pos = np.minimum(pos, len(ukeys) - 1)
        return np.where(ukeys[pos] == keys, pos, -1)

    @cached_property
    def edge_triangle_count(self):
        return np.bincount(self.tri_edges.ravel(), minlength=self.n_edges)

    @cached_property
    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def h(self):
        """Largest edge length."""
        return float(self.edge_lengths.max())

    def labelled_edges(self, label):
        return self.boundary_edges[self.boundary_labels == label]

    @cached_property
    def outer_edge_data(self):
        """``(edge ids, triangle, local index)`` for every OUTER edge, in boundary-list order."""
        ids = self.edge_ids(self.labelled_edges(OUTER))
        te = self.tri_edges.ravel()
        order = np.argsort(te, kind="stable")
        pos = np.searchsorted(te[order], ids)
        flat = order[pos]
        return ids, flat // 3, flat % 3

    @cached_property
    def outer_vertex_mask(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.labelled_edges(OUTER).ravel()] = True
        return mask

    @cached_property
    def interface_vertex_mask(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.labelled_edges(INTERFACE).ravel()] = True
        return mask

    def loops(self, label):
        """Closed vertex loops formed by the edges with ``label``."""
        return _edge_loops(self.labelled_edges(label))


def _edge_loops(edges):
    if len(edges) == 0:
        return []
    nbrs = {}
    for a, b in edges.tolist():
        nbrs.setdefault(a, []).append(b)
        nbrs.setdefault(b, []).append(a)
    seen = set()
    loops = []
    for start in sorted(nbrs):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = start, min(nbrs[start])
        while cur != start:
            loop.append(cur)
            seen.add(cur)
            nxt = [v for v in nbrs[cur] if v != prev]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
        loops.append(np.array(loop))
    return loops


# ---------------------------------------------------------------------------
# validation


def check_mesh(mesh):
    """Raise :class:`MeshError` unless every structural invariant holds.

    Checks positive orientation, edge sharing (1 or 2 triangles), that the
    single-triangle edges are exactly the OUTER edges, that INTERFACE edges
    are exactly the edges separating differently tagged triangles, and that
    both labelled edge sets form closed loops.
    """
    nv = mesh.n_vertices
    t = mesh.triangles
    if t.size and (t.min() < 0 or t.max() >= nv):
        raise MeshError("triangle references a missing vertex")
    if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
        raise MeshError("degenerate triangle with repeated vertex")
    areas = mesh.areas
    bad = np.flatnonzero(areas <= INVERSION_RTOL * np.abs(areas).mean())
    if bad.size:
        raise MeshError(f"non-positive orientation in triangles {bad[:5].tolist()}")
    count = mesh.edge_triangle_count
    if np.any(count > 2):
        raise MeshError("edge shared by more than two triangles")

    # a shared edge must be traversed in opposite directions by its triangles
    signs = mesh.edge_signs.ravel()
    te = mesh.tri_edges.ravel()
    ssum = np.bincount(te, weights=signs, minlength=mesh.n_edges)
    if np.any((count == 2) & (ssum != 0)):
        raise MeshError("inconsistent orientation across a shared edge")

    be = mesh.boundary_edges
    if np.any(be[:, 0] >= be[:, 1]):
        raise MeshError("labelled edges must be stored low -> high")
    ids = mesh.edge_ids(be)
    if np.any(ids < 0):
        raise MeshError("labelled edge is not an edge of the triangulation")
    if len(np.unique(ids)) != len(ids):
        raise MeshError("duplicate labelled edge")

    outer = np.zeros(mesh.n_edges, dtype=bool)
    outer[ids[mesh.boundary_labels == OUTER]] = True
    if not np.array_equal(outer, count == 1):
        raise MeshError("OUTER edges do not match the single-triangle edges (hanging node?)")

    interior = np.flatnonzero(count == 2)
    tri_of = np.zeros((mesh.n_edges, 2), dtype=np.int64)
    order = np.argsort(te, kind="stable")
    sorted_te = te[order]
    first = np.searchsorted(sorted_te, interior)
    tri_of[interior, 0] = order[first] // 3
    tri_of[interior, 1] = order[first + 1] // 3
    differs = np.zeros(mesh.n_edges, dtype=bool)
    differs[interior] = mesh.tags[tri_of[interior, 0]] != mesh.tags[tri_of[interior, 1]]
    iface = np.zeros(mesh.n_edges, dtype=bool)
    iface[ids[mesh.boundary_labels == INTERFACE]] = True
    if not np.array_equal(iface, differs):
        raise MeshError("INTERFACE edges do not match the region-tag jumps")

    for label, name in ((OUTER, "OUTER"), (INTERFACE, "INTERFACE")):
        e = mesh.labelled_edges(label)
        if len(e):
            deg = np.bincount(e.ravel(), minlength=nv)
            if np.any((deg != 0) & (deg != 2)):
                raise MeshError(f"{name} edges do not form closed loops")


def is_valid(mesh):
    try:
        check_mesh(mesh)
    except MeshError:
        return False
    return True


# ---------------------------------------------------------------------------
# generation


def _label_edges(vertices, triangles, tags):
    """Derive OUTER / INTERFACE edges from the triangulation and tags."""
    nv = len(vertices)
    a = triangles[:, [1, 2, 0]].ravel()
    b = triangles[:, [2, 0, 1]].ravel()
    keys = np.minimum(a, b) * nv + np.maximum(a, b)
    owner = np.repeat(np.arange(len(triangles)), 3)
    order = np.argsort(keys, kind="stable")
    keys, owner = keys[order], owner[order]
    ukeys, start, cnt = np.unique(keys, return_index=True, return_counts=True)
    outer = ukeys[cnt == 1]
    two = cnt == 2
    t0 = owner[start[two]]
    t1 = owner[start[two] + 1]
    iface = ukeys[two][tags[t0] != tags[t1]]
    allk = np.concatenate([outer, iface])
    labels = np.concatenate([np.full(len(outer), OUTER), np.full(len(iface), INTERFACE)])
    order = np.argsort(allk, kind="stable")
    allk, labels = allk[order], labels[order]
    edges = np.stack([allk // nv, allk % nv], axis=1)
    return edges, labels.astype(np.int8)


def _orient(vertices, triangles):
    d1 = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
    d2 = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
    neg = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    triangles = triangles.copy()
    triangles[neg, 1], triangles[neg, 2] = triangles[neg, 2], triangles[neg, 1].copy()
    return triangles


def _zip_rings(pts, ia, ib):
    """Stitch two closed concentric rings, always taking the shorter diagonal."""
    m, n = len(ia), len(ib)
    d = np.linalg.norm(pts[ib] - pts[ia[0]], axis=1)
    j0 = int(np.argmin(d))
    ib = np.roll(ib, -j0)
    tris = []
    i = j = 0
    while i < m or j < n:
        a0, a1 = ia[i % m], ia[(i + 1) % m]
        b0, b1 = ib[j % n], ib[(j + 1) % n]
        if j == n or (i < m and np.linalg.norm(pts[a1] - pts[b0]) <= np.linalg.norm(pts[b1] - pts[a0])):
            tris.append((a0, a1, b0))
            i += 1
        else:
            tris.append((a0, b1, b0))
            j += 1
    return tris


def generate_disk_mesh(rho_E, rho_I, h, curved_interface=False):
    """Disk of radius ``rho_E`` with an interface-fitted circle of radius ``rho_I``.

    Vertices lie on concentric rings whose point counts grow with the radius;
    one ring sits exactly at ``rho_I``.  Neighbouring rings are zipped
    together by angle.

    With ``curved_interface=True`` later refinements also project interface
    midpoints onto the circle (used by convergence studies against the
    analytic solution); by default interface midpoints stay on the chords.
    """
    if not (0 < rho_I < rho_E):
        raise MeshError(f"need 0 < rho_I < rho_E, got rho_I={rho_I}, rho_E={rho_E}")
    if not h > 0:
        raise MeshError("h must be positive")
    n_in = max(1, math.ceil(rho_I / h - 1e-9))
    n_out = max(1, math.ceil((rho_E - rho_I) / h - 1e-9))
    radii = np.concatenate([rho_I * np.arange(1, n_in + 1) / n_in,
                            rho_I + (rho_E - rho_I) * np.arange(1, n_out + 1) / n_out])
    radii[n_in - 1] = rho_I
    radii[-1] = rho_E

    pts = [np.zeros((1, 2))]
    rings = []
    start = 1
    for k, r in enumerate(radii):
        n = max(6, int(round(2 * np.pi * r / h)))
        ang = (np.arange(n) + 0.5 * (k % 2)) * (2 * np.pi / n)
        pts.append(np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1))
        rings.append(np.arange(start, start + n))
        start += n
    vertices = np.concatenate(pts)

    tris = []
    idx = rings[0]
    n = len(idx)
    tris += [(0, idx[i], idx[(i + 1) % n]) for i in range(n)]
    for ia, ib in zip(rings[:-1], rings[1:]):
        tris += _zip_rings(vertices, ia, ib)
    triangles = _orient(vertices, np.array(tris, dtype=np.int64))

    centroid = vertices[triangles].mean(axis=1)
    tags = np.where(np.hypot(centroid[:, 0], centroid[:, 1]) < rho_I, INCLUSION, BACKGROUND)
    edges, labels = _label_edges(vertices, triangles, tags)
    mesh = Mesh(vertices, triangles, tags.astype(np.int8), edges, labels,
                outer_radius=float(rho_E),
                interface_radius=float(rho_I) if curved_interface else None)
    check_mesh(mesh)
    return mesh


def circle_polygon(radius, h, center=(0.0, 0.0)):
    n = max(8, int(math.ceil(2 * np.pi * radius / h)))
    ang = np.arange(n) * (2 * np.pi / n)
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)


def ellipse_polygon(center, semi_axes, h, angle=0.0):
    """Closed polyline approximating an ellipse with edges of length about ``h``."""
    a, b = semi_axes
    perim = np.pi * (3 * (a + b) - math.sqrt((3 * a + b) * (a + 3 * b)))
    n = max(8, int(math.ceil(perim / h)))
    t = np.arange(n) * (2 * np.pi / n)
    x, y = a * np.cos(t), b * np.sin(t)
    c, s = math.cos(angle), math.sin(angle)
    return np.stack([center[0] + c * x - s * y, center[1] + s * x + c * y], axis=1)


def _segments_intersect(p, q):
    """Proper or touching intersections between segment sets p (n,2,2) and q (m,2,2)."""
    def cross(o, a, b):
        return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])

    p0, p1 = p[:, None, 0], p[:, None, 1]
    q0, q1 = q[None, :, 0], q[None, :, 1]
    d1 = cross(q0, q1, p0)
    d2 = cross(q0, q1, p1)
    d3 = cross(p0, p1, q0)
    d4 = cross(p0, p1, q1)
    # bounding boxes must overlap too, else collinear disjoint segments count
    boxes = np.ones(d1.shape, dtype=bool)
    for c in range(2):
        boxes &= (np.minimum(p0[..., c], p1[..., c]) <= np.maximum(q0[..., c], q1[..., c]))
        boxes &= (np.minimum(q0[..., c], q1[..., c]) <= np.maximum(p0[..., c], p1[..., c]))
    return (d1 * d2 <= 0) & (d3 * d4 <= 0) & boxes


def _polygon_segments(poly):
    return np.stack([poly, np.roll(poly, -1, axis=0)], axis=1)


def _validate_polygons(polygons, inside):
    polys = []
    for k, poly in enumerate(polygons):
        poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        if len(poly) > 3 and np.allclose(poly[0], poly[-1]):
            poly = poly[:-1]
        if len(poly) < 3:
            raise MeshError(f"polygon {k} has fewer than 3 vertices")
        seg = _polygon_segments(poly)
        hit = _segments_intersect(seg, seg)
        n = len(poly)
        i, j = np.nonzero(hit)
        adjacent = ((j - i) % n == 1) | ((i - j) % n == 1) | (i == j)
        if np.any(~adjacent):
            raise MeshError(f"polygon {k} is self-intersecting")
        if not np.all(inside(poly)):
            raise MeshError(f"polygon {k} touches or crosses the outer boundary")
        area = 0.5 * np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
        if area < 0:
            poly = poly[::-1]
        polys.append(poly)
    for a, b in itertools.combinations(range(len(polys)), 2):
        if np.any(_segments_intersect(_polygon_segments(polys[a]), _polygon_segments(polys[b]))):
            raise MeshError(f"polygons {a} and {b} intersect")
        if points_in_polygon(polys[a][:1], polys[b])[0] or points_in_polygon(polys[b][:1], polys[a])[0]:
            raise MeshError(f"polygons {a} and {b} are nested")
    return polys


def points_in_polygon(points, poly):
    """Even-odd ray casting test, vectorized over points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x, y = points[:, 0:1], points[:, 1:2]
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    crosses = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    return np.count_nonzero(crosses & (x < xint), axis=1) % 2 == 1


def _subdivide(poly, h):
    out = []
    for p, q in zip(poly, np.roll(poly, -1, axis=0)):
        n = max(1, int(math.ceil(np.hypot(*(q - p)) / h - 1e-9)))
        t = np.arange(n)[:, None] / n
        out.append(p + t * (q - p))
    return np.concatenate(out)


def _triangulate(outer, polygons, h, outer_radius=None):
    import triangle

    loops = [outer] + [_subdivide(p, h) for p in polygons]
    verts, segs = [], []
    off = 0
    for loop in loops:
        n = len(loop)
        verts.append(loop)
        segs.append(off + np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1))
        off += n
    max_area = math.sqrt(3) / 4 * h * h
    out = triangle.triangulate({"vertices": np.concatenate(verts), "segments": np.concatenate(segs)},
                               f"pq28Ya{max_area:.12g}Q")
    vertices = out["vertices"]
    triangles = _orient(vertices, out["triangles"].astype(np.int64))
    centroid = vertices[triangles].mean(axis=1)
    tags = np.zeros(len(triangles), dtype=np.int8)
    for poly in polygons:
        tags[points_in_polygon(centroid, poly)] = INCLUSION
    edges, labels = _label_edges(vertices, triangles, tags)
    mesh = Mesh(vertices, triangles, tags, edges, labels, outer_radius=outer_radius)
    check_mesh(mesh)
    return mesh


def generate_square_mesh(half_width, inclusion_polygons, h):
    """Square ``[-w, w]^2`` with interface-fitted polygonal inclusions."""
    if not (half_width > 0 and h > 0):
        raise MeshError("half_width and h must be positive")
    w = float(half_width)
    polys = _validate_polygons(inclusion_polygons, lambda p: np.all(np.abs(p) < w * (1 - 1e-12), axis=1))
    corners = np.array([[-w, -w], [w, -w], [w, w], [-w, w]])
    return _triangulate(_subdivide(corners, h), polys, h)


def generate_disk_polygon_mesh(rho_E, inclusion_polygons, h):
    """Disk of radius ``rho_E`` (origin-centred) with polygonal inclusions."""
    if not (rho_E > 0 and h > 0):
        raise MeshError("rho_E and h must be positive")
    polys = _validate_polygons(inclusion_polygons,
                               lambda p: np.hypot(p[:, 0], p[:, 1]) < rho_E * math.cos(math.pi / max(8, math.ceil(2 * math.pi * rho_E / h))))
    return _triangulate(circle_polygon(rho_E, h), polys, h, outer_radius=float(rho_E))


# ---------------------------------------------------------------------------
# refinement


_MAX_PASSES = 4096


def refine(mesh, marks):
    """Red-green refinement of the marked triangles.

    Green closures of the input are merged back into their parents first,
    so green triangles are never subdivided further.  Marked triangles are
    split into four; closure marks any triangle with two or more bisected
    edges red and bisects the rest (green).

    If the requested split would cut one half of an edge that still carries a
    hanging midpoint (the owning green parent lies on the other side), that
    parent is red-refined in a preliminary pass and the marks are carried over.

    Returns a new mesh; with no marks the input mesh itself is returned.
    """
    marks = np.unique(np.asarray(marks, dtype=np.int64).ravel())
    if marks.size == 0:
        return mesh
    if marks[0] < 0 or marks[-1] >= mesh.n_triangles:
        raise MeshError("mark index out of range")
    stack = [marks]
    for _ in range(_MAX_PASSES):
        plan = _plan(mesh, stack[-1])
        if plan["conflicts"].size:
            stack.append(plan["conflicts"])
            continue
        out, src = _execute(mesh, plan)
        bad = _inverted(out)
        if bad.size:
            mesh = _release_greens(mesh, plan, np.unique(src[bad]))
            continue
        mesh = out
        stack.pop()
        if not stack:
            return mesh
        base_of = plan["base_of"]
        stack = [np.flatnonzero(np.isin(src, base_of[m])) for m in stack]
    raise MeshError("refinement did not converge")  # pragma: no cover


def _inverted(mesh):
    P = mesh.coords
    d1, d2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
    return np.flatnonzero(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] <= 0)


def _release_greens(mesh, plan, bad_base):
    # after vertex motion a hanging midpoint leaves its parent edge, and the
    # merged parent may no longer be refinable; keep such green pairs as
    # ordinary (conforming) triangles instead
    gp = None if mesh.green_parent is None else mesh.green_parent.copy()
    hit = np.zeros(mesh.n_triangles, dtype=bool) if gp is None else \
        np.isin(plan["base_of"], bad_base) & (gp[:, 0] >= 0)
    if not hit.any():
        raise MeshError("refinement produced inverted triangles")
    gp[hit] = -1
    return replace(mesh, green_parent=gp if np.any(gp[:, 0] >= 0) else None, origin=mesh.origin,
                   origin_uid=mesh.origin_uid, uid=mesh.uid)


def _plan(mesh, marks):
    nv = mesh.n_vertices
    nt = mesh.n_triangles
    tris = mesh.triangles
    gp = mesh.green_parent
    is_green = np.zeros(nt, dtype=bool) if gp is None else gp[:, 0] >= 0
    keep = np.flatnonzero(~is_green)

    base_tris = [tris[keep]]
    base_tags = [mesh.tags[keep]]
    base_origin = [mesh.origin[keep]]
    base_of = np.empty(nt, dtype=np.int64)
    base_of[keep] = np.arange(len(keep))
    parents = np.empty((0, 4), dtype=np.int64)
    gidx = np.flatnonzero(is_green)
    ginv = np.empty(0, dtype=np.int64)
    if gidx.size:
        parents, first, ginv = np.unique(gp[gidx], axis=0, return_index=True, return_inverse=True)
        ginv = ginv.ravel()
        base_tris.append(parents[:, :3])
        base_tags.append(mesh.tags[gidx[first]])
        base_origin.append(mesh.origin[gidx[first]])
        base_of[gidx] = len(keep) + ginv
    btri = np.concatenate(base_tris)
    nb = len(btri)

    a = btri[:, [1, 2, 0]]
    b = btri[:, [2, 0, 1]]
    keys = np.minimum(a, b) * nv + np.maximum(a, b)
    ukeys, inv = np.unique(keys.ravel(), return_inverse=True)
    bedge = inv.reshape(nb, 3)

    p1, p2, m = parents[:, 1], parents[:, 2], parents[:, 3]
    hang_keys = np.minimum(p1, p2) * nv + np.maximum(p1, p2)
    split = np.zeros(len(ukeys), dtype=bool)
    split[np.searchsorted(ukeys, hang_keys)] = True
    red = np.zeros(nb, dtype=bool)
    red[base_of[marks]] = True
    while True:
        split[bedge[red].ravel()] = True
        cnt = split[bedge].sum(axis=1)
        new_red = red | (cnt >= 2)
        if np.array_equal(new_red, red):
            break
        red = new_red

    # halves of a hanging edge must not be cut while their green parent is unrefined
    conflicts = np.empty(0, dtype=np.int64)
    if len(parents):
        hit = np.zeros(len(parents), dtype=bool)
        for lo, hi in ((np.minimum(p1, m), np.maximum(p1, m)), (np.minimum(p2, m), np.maximum(p2, m))):
            hk = lo * nv + hi
            pos = np.minimum(np.searchsorted(ukeys, hk), len(ukeys) - 1)
            hit |= (ukeys[pos] == hk) & split[pos]
        if hit.any():
            conflicts = gidx[hit[ginv]]

    return dict(base_of=base_of, btri=btri, btag=np.concatenate(base_tags),
                borig=np.concatenate(base_origin), bedge=bedge, ukeys=ukeys, split=split,
                midpoint=dict(zip(hang_keys.tolist(), m.tolist())), conflicts=conflicts)


def _execute(mesh, plan):
    nv = mesh.n_vertices
    btri, bedge, ukeys, split = plan["btri"], plan["bedge"], plan["ukeys"], plan["split"]
    midpoint = plan["midpoint"]

    bkeys = mesh.boundary_edges[:, 0] * nv + mesh.boundary_edges[:, 1]
    label_of = dict(zip(bkeys.tolist(), mesh.boundary_labels.tolist()))
    mid_index = np.full(len(ukeys), -1, dtype=np.int64)
    new_pts, straight, new_edges, new_labels = [], [], [], []
    dropped = set()
    nxt = nv
    for e in np.flatnonzero(split).tolist():
        key = int(ukeys[e])
        if key in midpoint:
            mid_index[e] = midpoint[key]
            continue
        i, j = divmod(key, nv)
        p = 0.5 * (mesh.vertices[i] + mesh.vertices[j])
        straight.append(p)
        lab = label_of.get(key)
        radius = {OUTER: mesh.outer_radius, INTERFACE: mesh.interface_radius}.get(lab)
        if radius is not None:
            p = p * (radius / np.hypot(p[0], p[1]))
        new_pts.append(p)
        mid_index[e] = nxt
        if lab is not None:
            dropped.add(key)
            new_edges += [(i, nxt), (j, nxt)]
            new_labels += [lab, lab]
        nxt += 1
    vertices = np.concatenate([mesh.vertices, np.array(new_pts).reshape(-1, 2)])

    cnt = split[bedge].sum(axis=1)
    mids = mid_index[bedge]
    v0, v1, v2 = btri[:, 0], btri[:, 1], btri[:, 2]
    m0, m1, m2 = mids[:, 0], mids[:, 1], mids[:, 2]

    pieces = []  # (base index, child order, triangles, green parent rows)
    untouched = np.flatnonzero(cnt == 0)
    pieces.append((untouched, 0, btri[untouched], None))
    r = np.flatnonzero(cnt == 3)
    for c, tri in enumerate(((v0, m2, m1), (m2, v1, m0), (m1, m0, v2), (m0, m1, m2))):
        pieces.append((r, c, np.stack([x[r] for x in tri], axis=1), None))
    g = np.flatnonzero(cnt == 1)
    q = np.argmax(split[bedge[g]], axis=1)
    p0 = btri[g, q]
    p1 = btri[g, (q + 1) % 3]
    p2 = btri[g, (q + 2) % 3]
    m = mids[g, q]
    rows = np.stack([p0, p1, p2, m], axis=1)
    pieces.append((g, 0, np.stack([p0, p1, m], axis=1), rows))
    pieces.append((g, 1, np.stack([p0, m, p2], axis=1), rows))

    src = np.concatenate([p[0] for p in pieces])
    order_key = np.concatenate([p[0] * 4 + p[1] for p in pieces])
    new_tris = np.concatenate([p[2] for p in pieces])
    green = np.concatenate([p[3] if p[3] is not None else np.full((len(p[0]), 4), -1, dtype=np.int64)
                            for p in pieces])
    order = np.argsort(order_key, kind="stable")
    src, new_tris, green = src[order], new_tris[order], green[order]

    # a curved-boundary midpoint can invert a sliver thinner than the edge sagitta
    if new_pts:
        P = vertices[new_tris]
        d1, d2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
        bad = new_tris[d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] <= 0]
        moved = np.unique(bad[bad >= nv])
        if moved.size:
            vertices[moved] = np.array(straight)[moved - nv]

    keep = np.array([k not in dropped for k in bkeys.tolist()], dtype=bool)
    be = [mesh.boundary_edges[keep]]
    bl = [mesh.boundary_labels[keep]]
    if new_edges:
        be.append(np.sort(np.array(new_edges, dtype=np.int64), axis=1))
        bl.append(np.array(new_labels, dtype=np.int8))
    be = np.concatenate(be)
    bl = np.concatenate(bl)
    order = np.argsort(be[:, 0] * len(vertices) + be[:, 1], kind="stable")

    out = Mesh(vertices, new_tris, plan["btag"][src], be[order], bl[order],
               outer_radius=mesh.outer_radius, interface_radius=mesh.interface_radius,
               green_parent=green if np.any(green[:, 0] >= 0) else None,
               origin=plan["borig"][src], origin_uid=mesh.origin_uid)
    return out, src


def refine_uniform(mesh, levels=1, project=True):
    """Refine every triangle ``levels`` times.

    ``project=False`` keeps all new midpoints on the straight edges, so the
    result covers exactly the same polygon (used for reference solutions).
    """
    if not project:
        saved = (mesh.outer_radius, mesh.interface_radius)
        mesh = replace(mesh, outer_radius=None, interface_radius=None, origin=mesh.origin,
                       origin_uid=mesh.origin_uid, uid=mesh.uid)
    for _ in range(levels):
        mesh = refine(mesh, np.arange(mesh.n_triangles))
    if not project:
        mesh = replace(mesh, outer_radius=saved[0], interface_radius=saved[1], origin=mesh.origin,
                       origin_uid=mesh.origin_uid, uid=mesh.uid)
    return mesh


def as_root(mesh):
    """Same mesh, but acting as its own hierarchy root (origin = itself)."""
    return replace(mesh, origin=None, origin_uid=None, uid=mesh.uid)


def rebase(fine, coarse):
    """Re-express ``fine``'s origin map in terms of ``coarse``.

    ``coarse`` must be a refinement of the mesh that ``fine`` currently
    refers to.  Each fine triangle is mapped to the coarse triangle holding
    its centroid; strict nesting is not required.
    """
    if coarse.origin_uid != fine.origin_uid:
        raise MeshError("meshes are not in a common recorded hierarchy")
    best, lam = locate(coarse, fine.coords.mean(axis=1))
    # curved-boundary projection leaves slivers slightly outside the chords
    if np.any(lam.min(axis=1) < -0.25):
        raise MeshError("fine mesh does not lie inside the coarse mesh")
    return replace(fine, origin=best, origin_uid=coarse.uid)


def locate(mesh, points, guess=None, tol=1e-10):
    """Triangle containing each point and its barycentric coordinates.

    Points outside the mesh (e.g. on a curved boundary beyond a chord) get
    the triangle with the largest minimal barycentric coordinate.
    ``guess`` optionally gives a candidate triangle per point.
    """
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    best = np.zeros(n, dtype=np.int64)
    score = np.full(n, -np.inf)
    if guess is not None:
        best = np.asarray(guess, dtype=np.int64).copy()
        score = barycentric(mesh, best, points).min(axis=1)
    todo = np.flatnonzero(score < -tol)
    if todo.size:
        tree = mesh.__dict__.get("_centroid_tree")
        if tree is None:
            tree = cKDTree(mesh.coords.mean(axis=1))
            mesh.__dict__["_centroid_tree"] = tree
        for k in (8, 32, 128, mesh.n_triangles):
            k = min(k, mesh.n_triangles)
            _, cand = tree.query(points[todo], k=k)
            cand = np.asarray(cand).reshape(len(todo), k)
            for c in cand.T:
                sc = barycentric(mesh, c, points[todo]).min(axis=1)
                better = sc > score[todo]
                best[todo[better]] = c[better]
                score[todo[better]] = sc[better]
            todo = todo[score[todo] < -tol]
            if todo.size == 0 or k == mesh.n_triangles:
                break
    return best, barycentric(mesh, best, points)


def barycentric(mesh, tri_ids, points):
    """Barycentric coordinates of ``points`` w.r.t. triangles ``tri_ids``."""
    c = mesh.coords[tri_ids]
    g = mesh.grads[tri_ids]
    d = points - c[:, 0]
    lam12 = np.einsum("tkd,td->tk", g[:, 1:], d)
    return np.column_stack([1.0 - lam12.sum(axis=1), lam12])


# ---------------------------------------------------------------------------
# motion and quality


def displace(mesh, disp):
    """Move every vertex by ``disp`` (nv, 2); raises on element inversion."""
    disp = np.asarray(disp, dtype=np.float64).reshape(-1, 2)
    if disp.shape[0] != mesh.n_vertices:
        raise MeshError("displacement size does not match the mesh")
    if not np.any(disp):
        return mesh
    if np.any(disp[mesh.outer_vertex_mask]):
        raise MeshError("displacement must vanish on OUTER vertices")
    vertices = mesh.vertices + disp
    d1 = vertices[mesh.triangles[:, 1]] - vertices[mesh.triangles[:, 0]]
    d2 = vertices[mesh.triangles[:, 2]] - vertices[mesh.triangles[:, 0]]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    bad = np.flatnonzero(areas <= INVERSION_RTOL * np.abs(mesh.areas).mean())
    if bad.size:
        raise ElementInversionError(bad)
    iface_r = mesh.interface_radius
    if iface_r is not None and np.any(disp[mesh.interface_vertex_mask]):
        iface_r = None
    return replace(mesh, vertices=vertices, interface_radius=iface_r, origin=mesh.origin,
                   origin_uid=mesh.origin_uid, uid=mesh.uid)


def move_vertices(mesh, displacement, mu):
    """Vertex update ``v -> v + mu * theta(v)`` for a P1 vector field ``theta``.

    ``displacement`` is a P1_VEC2 :class:`~cda_eit.fem.Field` or a raw
    coefficient array in the same (component-blocked) layout.
    """
    coeffs = getattr(displacement, "coefficients", displacement)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    nv = mesh.n_vertices
    if coeffs.size != 2 * nv:
        raise MeshError("displacement does not live on this mesh's P1 vector space")
    if mu == 0:
        return mesh
    return displace(mesh, mu * coeffs.reshape(2, nv).T)


def triangle_quality(mesh):
    """``2 * inradius / circumradius`` per triangle (1 for equilateral)."""
    c = mesh.coords
    a = np.linalg.norm(c[:, 1] - c[:, 2], axis=1)
    b = np.linalg.norm(c[:, 2] - c[:, 0], axis=1)
    d = np.linalg.norm(c[:, 0] - c[:, 1], axis=1)
    area = np.abs(mesh.areas)
    return 16.0 * area ** 2 / ((a + b + d) * a * b * d)


def quality(mesh):
    return float(triangle_quality(mesh).min())


# ---------------------------------------------------------------------------
# I/O


def write_mesh(mesh, path):
    path = Path(path)
    lines = ["cda-mesh 1", f"V {mesh.n_vertices}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices.tolist()]
    lines.append(f"T {mesh.n_triangles}")
    lines += [f"{i} {j} {k} {t}" for (i, j, k), t in zip(mesh.triangles.tolist(), mesh.tags.tolist())]
    lines.append(f"B {len(mesh.boundary_edges)}")
    lines += [f"{i} {j} {l}" for (i, j), l in zip(mesh.boundary_edges.tolist(), mesh.boundary_labels.tolist())]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_mesh(path):
    text = Path(path).read_text().splitlines()
    pos = 0

    def take(lineno_hint=None):
        nonlocal pos
        while pos < len(text) and not text[pos].strip():
            pos += 1
        if pos >= len(text):
            raise MeshFormatError("unexpected end of file", pos + 1)
        pos += 1
        return text[pos - 1].split(), pos

    head, ln = take()
    if head != ["cda-mesh", "1"]:
        raise MeshFormatError("expected header 'cda-mesh 1'", ln)

    def block(tag, width, conv):
        head, ln = take()
        if len(head) != 2 or head[0] != tag:
            raise MeshFormatError(f"expected '{tag} <count>'", ln)
        try:
            n = int(head[1])
        except ValueError:
            raise MeshFormatError(f"bad count {head[1]!r}", ln) from None
        rows, where = [], []
        for _ in range(n):
            parts, ln = take()
            if len(parts) != width:
                raise MeshFormatError(f"expected {width} fields, got {len(parts)}", ln)
            try:
                rows.append([conv(p) for p in parts])
            except ValueError:
                raise MeshFormatError(f"cannot parse {' '.join(parts)!r}", ln) from None
            where.append(ln)
        return rows, where

    vrows, _ = block("V", 2, float)
    trows, tlines = block("T", 4, int)
    brows, blines = block("B", 3, int)
    nv = len(vrows)
    vertices = np.array(vrows, dtype=np.float64).reshape(-1, 2)
    tarr = np.array(trows, dtype=np.int64).reshape(-1, 4)
    barr = np.array(brows, dtype=np.int64).reshape(-1, 3)
    for k, row in enumerate(tarr):
        if row[:3].min() < 0 or row[:3].max() >= nv:
            raise MeshFormatError(f"triangle {k} references a missing vertex", tlines[k])
        if row[3] not in (BACKGROUND, INCLUSION):
            raise MeshFormatError(f"triangle {k} has unknown tag {row[3]}", tlines[k])
    for k, row in enumerate(barr):
        if row[:2].min() < 0 or row[:2].max() >= nv:
            raise MeshFormatError(f"edge {k} references a missing vertex", blines[k])
        if row[2] not in (OUTER, INTERFACE):
            raise MeshFormatError(f"edge {k} has unknown label {row[2]}", blines[k])
    c = vertices[tarr[:, :3]]
    areas = 0.5 * ((c[:, 1, 0] - c[:, 0, 0]) * (c[:, 2, 1] - c[:, 0, 1])
                   - (c[:, 1, 1] - c[:, 0, 1]) * (c[:, 2, 0] - c[:, 0, 0]))
    bad = np.flatnonzero(areas <= INVERSION_RTOL * np.abs(areas).mean()) if len(areas) else []
    if len(bad):
        raise MeshFormatError(f"triangle {bad[0]} is inverted or degenerate", tlines[bad[0]])
    return Mesh(vertices, tarr[:, :3], tarr[:, 3].astype(np.int8), barr[:, :2], barr[:, 2].astype(np.int8))


def mesh_io(path, mode, mesh=None):
    """``mode='read'`` returns a mesh; ``mode='write'`` writes ``mesh`` and returns it."""
    if mode == "read":
        return read_mesh(path)
    if mode == "write":
        if mesh is None:
            raise ValueError("write mode needs a mesh")
        write_mesh(mesh, path)
        return mesh
    raise ValueError(f"unknown mode {mode!r}")
