"""Result writers: iteration CSV, legacy ASCII VTK, SVG interface plots.

All writers are deterministic: identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from ..mesh import INTERFACE

CSV_COLUMNS = ("iter", "J", "directional", "Ebar", "mu", "dofs", "retries", "seconds")
VTK_TRIANGLE = 5


def _fmt(x):
    return repr(float(x))


def records_csv(records, record_timing=False):
    """CSV text for a sequence of iteration records.

    Wall-clock time is machine dependent, so the ``seconds`` column is left
    empty unless ``record_timing`` is set; this keeps reruns byte-identical.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([int(r.iter), _fmt(r.J), _fmt(r.directional), _fmt(r.Ebar), _fmt(r.mu),
                    int(r.dofs), int(r.retries), _fmt(r.seconds) if record_timing else ""])
    return buf.getvalue()


def write_records_csv(records, path, record_timing=False):
    path = Path(path)
    path.write_text(records_csv(records, record_timing))
    return path


def vtk_text(mesh, point_data=None, cell_data=None, title="cda-eit"):
    """Legacy ASCII VTK (UNSTRUCTURED_GRID, triangle cells).

    ``point_data`` maps names to nodal arrays of shape (nv,) or (nv, 2);
    vectors are padded to 3 components.  ``cell_data`` maps names to (nt,)
    arrays.  The element tag is always written as cell data.
    """
    nv, nt = mesh.n_vertices, mesh.n_triangles
    out = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    out += [f"{_fmt(x)} {_fmt(y)} 0.0" for x, y in mesh.vertices]
    out.append(f"CELLS {nt} {4 * nt}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    out.append(f"CELL_TYPES {nt}")
    out += [str(VTK_TRIANGLE)] * nt
    cells = {"tag": mesh.tags}
    cells.update(cell_data or {})
    out.append(f"CELL_DATA {nt}")
    for name, vals in cells.items():
        vals = np.asarray(vals).reshape(-1)
        if vals.shape != (nt,):
            raise ValueError(f"cell data {name!r} must have {nt} entries")
        out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        out += [_fmt(v) for v in vals]
    if point_data:
        out.append(f"POINT_DATA {nv}")
        for name, vals in point_data.items():
            vals = np.asarray(getattr(vals, "coefficients", vals), dtype=np.float64)
            if vals.shape == (2 * nv,):  # blocked vector layout
                vals = vals.reshape(2, nv).T
            if vals.shape == (nv,):
                out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                out += [_fmt(v) for v in vals]
            elif vals.shape == (nv, 2):
                out.append(f"VECTORS {name} double")
                out += [f"{_fmt(a)} {_fmt(b)} 0.0" for a, b in vals]
            else:
                raise ValueError(f"point data {name!r} has shape {vals.shape}, mesh has {nv} vertices")
    return "\n".join(out) + "\n"


def write_vtk(mesh, path, point_data=None, cell_data=None):
    path = Path(path)
    path.write_text(vtk_text(mesh, point_data, cell_data))
    return path


def interface_polylines(mesh):
    """Closed INTERFACE loops as (n, 2) coordinate arrays (first point repeated)."""
    return [mesh.vertices[np.append(loop, loop[0])] for loop in mesh.loops(INTERFACE)]


_LAYER_STYLE = {
    "initial": "#1f77b4",
    "target": "#000000",
    "final": "#d62728",
}


def svg_text(layers, outer_radius=None, size=480):
    """SVG with one ``<g>`` per layer, each holding its polylines.

    ``layers`` maps a layer name to a list of (n, 2) point arrays.
    """
    pts = [p for polys in layers.values() for p in polys]
    allp = np.vstack(pts) if pts else np.zeros((1, 2))
    r = outer_radius if outer_radius is not None else float(np.abs(allp).max()) or 1.0
    half = 1.05 * r
    scale = size / (2 * half)

    def xy(p):
        return f"{(p[0] + half) * scale:.4f},{(half - p[1]) * scale:.4f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">']
    if outer_radius is not None:
        c = half * scale
        out.append(f'<circle cx="{c:.4f}" cy="{c:.4f}" r="{outer_radius * scale:.4f}" '
                   'fill="none" stroke="#999999" stroke-width="1"/>')
    for name, polys in layers.items():
        color = _LAYER_STYLE.get(name, "#2ca02c")
        out.append(f'<g id="{name}" fill="none" stroke="{color}" stroke-width="1.5">')
        for p in polys:
            out.append(f'<polyline points="{" ".join(xy(q) for q in np.asarray(p))}"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(layers, path, outer_radius=None):
    path = Path(path)
    path.write_text(svg_text(layers, outer_radius))
    return path


def export_results(records, meshes, fields, outdir, target=None, record_timing=False):
    """Write ``records.csv``, ``interfaces.svg``, ``final.vtk`` and the meshes.

    ``meshes`` maps names (``initial``, ``final``, ...) to meshes; ``fields``
    maps names to nodal arrays on the final mesh; ``target`` is an optional
    list of polylines for the true interface.  Returns the written paths.
    """
    from ..mesh import write_mesh

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [write_records_csv(records, outdir / "records.csv", record_timing)]
    layers = {}
    if "initial" in meshes:
        layers["initial"] = interface_polylines(meshes["initial"])
    layers["target"] = list(target or [])
    if "final" in meshes:
        layers["final"] = interface_polylines(meshes["final"])
    radius = next((m.outer_radius for m in meshes.values() if m.outer_radius is not None), None)
    paths.append(write_svg(layers, outdir / "interfaces.svg", radius))
    if "final" in meshes:
        paths.append(write_vtk(meshes["final"], outdir / "final.vtk", fields))
    for name, m in sorted(meshes.items()):
        p = outdir / f"{name}.mesh"
        write_mesh(m, p)
        paths.append(p)
    return paths
