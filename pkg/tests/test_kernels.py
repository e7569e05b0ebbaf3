import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cda_eit import _kernels
from cda_eit._kernels import _numpy
from cda_eit.mesh import generate_disk_mesh, move_vertices

from conftest import smooth_field

_numba = pytest.importorskip("cda_eit._kernels._numba")


def inputs(seed):
    base = generate_disk_mesh(3.0, 1.5, 0.7)
    rng = np.random.default_rng(seed)
    mesh = move_vertices(base, smooth_field(base, seed).T.ravel(), 0.05)
    nt = mesh.n_triangles
    coords = np.ascontiguousarray(mesh.coords)
    areas, grads = _numpy.geometry(coords)
    signs = np.ascontiguousarray(mesh.edge_signs)
    k = np.where(mesh.tags == 1, 10.0, 1.0)

    def r(*shape):
        return np.ascontiguousarray(rng.standard_normal(shape))

    return {
        "geometry": (coords,),
        "p1_local_matrix": (areas, grads, k, 1.0),
        "rt0_local_matrix": (coords, areas, signs, 1.0 / k),
        "shape_gradient_local": (areas, grads, k, r(nt, 3)),
        "dgdu_local": (areas, grads, k, r(nt, 3), r(nt, 3, 2)),
        "adjoint_flux_rhs_local": (coords, areas, grads, signs, r(nt, 3), r(nt, 3, 2)),
        "flux_bound_local": (coords, areas, grads, signs, k, r(nt, 3), r(nt, 3), r(nt, 2), r(nt, 3)),
    }


def as_tuple(x):
    return x if isinstance(x, tuple) else (x,)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_backends_agree(seed):
    args = inputs(seed)
    assert set(args) == set(_kernels.NAMES)
    for name in _kernels.NAMES:
        a = as_tuple(getattr(_numpy, name)(*args[name]))
        b = as_tuple(getattr(_numba, name)(*args[name]))
        assert len(a) == len(b), name
        for x, y in zip(a, b):
            assert x.shape == y.shape, name
            np.testing.assert_allclose(y, x, rtol=1e-12, atol=1e-12 * np.abs(x).max(), err_msg=name)


def test_geometry_oracle():
    coords = np.array([[[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]]])
    for impl in (_numpy, _numba):
        areas, grads = impl.geometry(coords)
        assert areas[0] == 1.0
        # barycentric gradients of the right triangle with legs 2 and 1
        np.testing.assert_allclose(grads[0], [[-0.5, -1.0], [0.5, 0.0], [0.0, 1.0]])


def test_environment_switch():
    code = "from cda_eit import _kernels; print(_kernels.BACKEND)"
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, CDA_EIT_NUMBA=flag)
        out[flag] = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                                   check=True).stdout.strip()
    assert out == {"0": "numpy", "1": "numba"}


def test_end_to_end_backends_agree():
    code = ("from cda_eit import eit; from cda_eit.mesh import generate_disk_mesh\n"
            "m = generate_disk_mesh(5.0, 3.0, 0.7); s = eit.validation_setup(m)\n"
            "J, L, _ = eit.misfit_and_gradient(m, s); print(repr(J), repr(float(abs(L).sum())))")
    vals = []
    for flag in ("0", "1"):
        env = dict(os.environ, CDA_EIT_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        vals.append([float(v) for v in res.stdout.split()])
    np.testing.assert_allclose(vals[0], vals[1], rtol=1e-12)
