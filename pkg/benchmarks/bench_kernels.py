"""Time every element kernel under the numpy and numba backends.

    python3 benchmarks/bench_kernels.py [--h 0.1] [--repeat 5]

Both implementations are imported directly, so one process compares them
regardless of ``CDA_EIT_NUMBA``.  numba is warmed up (JIT compile) before timing.
"""

import argparse
import timeit

import numpy as np

from cda_eit._kernels import NAMES, _numba, _numpy
from cda_eit.mesh import generate_disk_mesh


def kernel_args(mesh, seed=0):
    rng = np.random.default_rng(seed)
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


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--h", type=float, default=0.1, help="mesh size of the test disk")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    mesh = generate_disk_mesh(5.0, 3.0, args.h)
    inputs = kernel_args(mesh)
    print(f"{mesh.n_triangles} triangles, best of {args.repeat}")
    print(f"{'kernel':<24} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8}")
    for name in NAMES:
        a = inputs[name]
        np_fn, nb_fn = getattr(_numpy, name), getattr(_numba, name)
        nb_fn(*a)  # compile
        t_np = min(timeit.repeat(lambda: np_fn(*a), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: nb_fn(*a), number=1, repeat=args.repeat))
        print(f"{name:<24} {1e3 * t_np:>11.2f} {1e3 * t_nb:>11.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
