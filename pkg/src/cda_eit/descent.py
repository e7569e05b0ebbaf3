"""Descent direction from the shape-gradient covector.

Solves ``(theta, dtheta)_X = -<dJ, dtheta>`` with the full H1 product
``int grad theta : grad dtheta + theta . dtheta`` on P1 vector fields that
vanish at OUTER vertices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import P1_VEC2, FeSpace, Field, LinearSystem


@dataclass(eq=False)
class DescentResult:
    theta_h: Field
    directional: float


def _scalar_block(mesh):
    cache = fem.mesh_cache(mesh)
    if "xprod_scalar" not in cache:
        cache["xprod_scalar"] = fem.p1_matrix(mesh, np.ones(mesh.n_triangles), 1.0)
    return cache["xprod_scalar"]


def x_product_matrix(mesh):
    """Block-diagonal H1 Gram matrix on the blocked P1_VEC2 layout (cached)."""
    cache = fem.mesh_cache(mesh)
    if "xprod" not in cache:
        A = _scalar_block(mesh)
        cache["xprod"] = sp.block_diag([A, A], format="csr")
    return cache["xprod"]


def x_norm(mesh, theta):
    c = np.asarray(getattr(theta, "coefficients", theta), dtype=np.float64)
    return float(np.sqrt(max(c @ (x_product_matrix(mesh) @ c), 0.0)))


def solve_descent(mesh, gradient_covector):
    """Descent field ``theta_h`` and ``<d_h J, theta_h> = -|theta_h|_X^2``.

    Both components share one factorization of the scalar H1 block.
    """
    L = np.asarray(gradient_covector, dtype=np.float64)
    nv = mesh.n_vertices
    if L.shape != (2 * nv,):
        raise ValueError(f"covector must have {2 * nv} entries")
    outer = np.flatnonzero(mesh.outer_vertex_mask)
    if np.any(L[outer] != 0) or np.any(L[outer + nv] != 0):
        raise ValueError("covector must vanish at OUTER dofs")
    A = _scalar_block(mesh)
    scalar = FeSpace(mesh, fem.P1_SCALAR)
    theta = np.empty(2 * nv)
    for c in range(2):
        system = LinearSystem(A, -L[c * nv:(c + 1) * nv], outer, 0.0, space=scalar, key=("xprod",))
        theta[c * nv:(c + 1) * nv] = fem.solve_spd(system)
    return DescentResult(Field(FeSpace(mesh, P1_VEC2), theta), float(L @ theta))
