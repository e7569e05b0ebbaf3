import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cda_eit import descent, eit, fem
from cda_eit.mesh import Mesh, generate_disk_mesh

from conftest import smooth_field


def covector(mesh, seed=0):
    rng = np.random.default_rng(seed)
    L = rng.standard_normal(2 * mesh.n_vertices)
    L.reshape(2, -1)[:, mesh.outer_vertex_mask] = 0.0
    return L


def h1_oracle(mesh):
    # (theta, eta)_X per component: the k = 1 state matrix
    A = fem.state_matrix(mesh, (1.0, 1.0))
    import scipy.sparse as sp
    return sp.block_diag([A, A]).tocsr()


def test_zero_covector(disk):
    res = descent.solve_descent(disk, np.zeros(2 * disk.n_vertices))
    assert np.all(res.theta_h.coefficients == 0) and res.directional == 0.0


def test_directional_is_minus_norm_squared(disk):
    res = descent.solve_descent(disk, covector(disk))
    th = res.theta_h.coefficients
    assert res.directional < 0
    assert res.directional == pytest.approx(-(th @ (h1_oracle(disk) @ th)), rel=1e-10)
    assert res.directional == pytest.approx(-descent.x_norm(disk, res.theta_h) ** 2, rel=1e-10)


def test_variational_identity(disk):
    L = covector(disk, 1)
    th = descent.solve_descent(disk, L).theta_h.coefficients
    X = h1_oracle(disk)
    for seed in range(3):
        d = smooth_field(disk, seed).T.ravel()
        assert th @ (X @ d) == pytest.approx(-(L @ d), rel=1e-9, abs=1e-12 * np.abs(L).sum())


def test_zero_on_outer(disk):
    th = descent.solve_descent(disk, covector(disk, 2)).theta_h.nodal()
    assert np.all(th[disk.outer_vertex_mask] == 0.0)


@settings(max_examples=15, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_scaling(c, seed):
    mesh = generate_disk_mesh(3.0, 1.5, 0.8)
    L = covector(mesh, seed)
    a = descent.solve_descent(mesh, L)
    b = descent.solve_descent(mesh, c * L)
    np.testing.assert_allclose(b.theta_h.coefficients, c * a.theta_h.coefficients, rtol=1e-10,
                               atol=1e-12 * c * np.abs(a.theta_h.coefficients).max())
    assert b.directional == pytest.approx(c * c * a.directional, rel=1e-10)


def test_permutation_invariance(disk):
    rng = np.random.default_rng(7)
    perm = rng.permutation(disk.n_vertices)  # new index of old vertex i is inv[i]
    inv = np.argsort(perm)
    mesh2 = Mesh(disk.vertices[perm], inv[disk.triangles], disk.tags,
                 np.sort(inv[disk.boundary_edges], axis=1), disk.boundary_labels)
    L = covector(disk, 3)
    Lx, Ly = L.reshape(2, -1)
    a = descent.solve_descent(disk, L)
    b = descent.solve_descent(mesh2, np.concatenate([Lx[perm], Ly[perm]]))
    np.testing.assert_allclose(b.theta_h.nodal(), a.theta_h.nodal()[perm], rtol=1e-10,
                               atol=1e-12 * np.abs(a.theta_h.coefficients).max())
    assert b.directional == pytest.approx(a.directional, rel=1e-10)


def test_rejects_outer_entries(disk):
    L = covector(disk)
    L[np.flatnonzero(disk.outer_vertex_mask)[0]] = 1.0
    with pytest.raises(ValueError):
        descent.solve_descent(disk, L)
    with pytest.raises(ValueError):
        descent.solve_descent(disk, np.zeros(disk.n_vertices))


def test_descent_from_physical_gradient_decreases_J():
    mesh = generate_disk_mesh(5.0, 3.0, 0.7)
    setup = eit.validation_setup(mesh)
    J0, L, _ = eit.misfit_and_gradient(mesh, setup)
    res = descent.solve_descent(mesh, L)
    from cda_eit.mesh import move_vertices
    m = move_vertices(mesh, res.theta_h, 1e-3 / np.abs(res.theta_h.coefficients).max())
    assert eit.kohn_vogelius(m, setup, eit.solve_all_states(m, setup)) < J0
