from math import factorial

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from cda_eit import fem
from cda_eit.fem import (ADJ_D, ADJ_N, DIRICHLET, NEUMANN, P1_SCALAR, P1_VEC2, RT0, STATE_D, STATE_N, FeSpace,
                         Field, LinearSystem, SolverError)
from cda_eit.mesh import MeshError, as_root, generate_disk_mesh, refine, refine_uniform

from conftest import single_triangle, unit_square

KC = (10.0, 1.0)


def monomial_integral(a, b):
    # int over the reference triangle of x^a y^b
    return factorial(a) * factorial(b) / factorial(a + b + 2)


# ---------------------------------------------------------------------------
# spaces and fields


def test_space_sizes(disk):
    assert FeSpace(disk, P1_SCALAR).ndofs == disk.n_vertices
    assert FeSpace(disk, P1_VEC2).ndofs == 2 * disk.n_vertices
    assert FeSpace(disk, RT0).ndofs == disk.n_edges
    assert FeSpace(disk, P1_SCALAR).signs is None


def test_rt0_signs_consistent(disk):
    s = FeSpace(disk, RT0).signs
    assert set(np.unique(s)) <= {-1.0, 1.0}
    total = np.bincount(disk.tri_edges.ravel(), weights=s.ravel(), minlength=disk.n_edges)
    shared = disk.edge_triangle_count == 2
    assert np.all(total[shared] == 0)


def test_field_length_checked(disk):
    with pytest.raises(ValueError):
        Field(FeSpace(disk, P1_SCALAR), np.zeros(disk.n_vertices + 1))
    with pytest.raises(ValueError):
        FeSpace(disk, "P2")


def test_vec_field_layouts(disk):
    vals = np.arange(2 * disk.n_vertices, dtype=float).reshape(-1, 2)
    f = fem.vec_field(disk, vals)
    np.testing.assert_array_equal(f.nodal(), vals)
    np.testing.assert_array_equal(f.coefficients[:disk.n_vertices], vals[:, 0])


# ---------------------------------------------------------------------------
# element matrices


def test_reference_stiffness_and_mass():
    m = single_triangle()
    # oracle: P1 basis 1-x-y, x, y on the reference triangle
    grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    K_oracle = 0.5 * grads @ grads.T
    coeffs = [{(0, 0): 1, (1, 0): -1, (0, 1): -1}, {(1, 0): 1}, {(0, 1): 1}]
    M_oracle = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            M_oracle[i, j] = sum(ci * cj * monomial_integral(a1 + a2, b1 + b2)
                                 for (a1, b1), ci in coeffs[i].items() for (a2, b2), cj in coeffs[j].items())
    np.testing.assert_allclose(K_oracle, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)
    np.testing.assert_allclose(M_oracle, np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24, atol=1e-15)
    K = fem.p1_matrix(m, np.ones(1), 0.0).toarray()
    A = fem.state_matrix(m, (1.0, 1.0)).toarray()
    np.testing.assert_allclose(K, K_oracle, atol=1e-15)
    np.testing.assert_allclose(A - K, M_oracle, atol=1e-15)


def _p1_tri7(coords, k):
    lam, w = fem.TRI7_POINTS, fem.TRI7_WEIGHTS
    area = 0.5 * np.cross(np.append(coords[1] - coords[0], 0), np.append(coords[2] - coords[0], 0))[2]
    G = np.linalg.inv(np.column_stack([np.ones(3), coords])).T[:, 1:]  # gradients of the hats
    K = k * area * G @ G.T
    M = area * np.einsum("q,qi,qj->ij", w, lam, lam)
    return K + M


def _rt0_basis(coords, signs, x):
    # phi_q = s_q (x - p_q) / (2 A): unit flux through the edge opposite p_q
    area = 0.5 * ((coords[1, 0] - coords[0, 0]) * (coords[2, 1] - coords[0, 1])
                  - (coords[1, 1] - coords[0, 1]) * (coords[2, 0] - coords[0, 0]))
    return np.stack([signs[q] * (x - coords[q]) / (2 * area) for q in range(3)]), area


def _rt0_tri7(coords, signs, kinv):
    pts = fem.TRI7_POINTS @ coords
    M = np.zeros((3, 3))
    for p, w in zip(pts, fem.TRI7_WEIGHTS):
        phi, area = _rt0_basis(coords, signs, p)
        M += w * area * kinv * phi @ phi.T
    div = np.array([signs[q] / area for q in range(3)])
    return M + area * np.outer(div, div)


def test_element_matrices_match_tri7_rule(disk):
    A = fem.state_matrix(disk, KC)
    H = fem.hdiv_matrix(disk, KC)
    kv = fem.element_conductivity(disk, KC)
    A_or = sp.lil_matrix(A.shape)
    H_or = sp.lil_matrix(H.shape)
    for t in range(disk.n_triangles):
        c = disk.coords[t]
        loc = _p1_tri7(c, kv[t])
        idx = disk.triangles[t]
        for i in range(3):
            for j in range(3):
                A_or[idx[i], idx[j]] += loc[i, j]
        loc = _rt0_tri7(c, disk.edge_signs[t], 1.0 / kv[t])
        e = disk.tri_edges[t]
        for i in range(3):
            for j in range(3):
                H_or[e[i], e[j]] += loc[i, j]
    scale = abs(A).max()
    assert abs(A - A_or.tocsr()).max() <= 1e-13 * scale
    assert abs(H - H_or.tocsr()).max() <= 1e-13 * abs(H).max()


def test_rt0_normal_continuity(disk):
    rng = np.random.default_rng(3)
    coef = rng.standard_normal(disk.n_edges)
    te = disk.tri_edges
    for e in np.flatnonzero(disk.edge_triangle_count == 2)[:40]:
        a, b = disk.vertices[disk.edges[e]]
        mid = 0.5 * (a + b)
        n = np.array([b[1] - a[1], a[0] - b[0]])
        vals = []
        for t in np.flatnonzero((te == e).any(axis=1)):
            phi, _ = _rt0_basis(disk.coords[t], disk.edge_signs[t], mid)
            vals.append((coef[te[t]] @ phi) @ n)
        assert len(vals) == 2
        assert vals[0] == pytest.approx(vals[1], rel=1e-12, abs=1e-12)


def test_assembly_deterministic(disk):
    a = fem.p1_matrix(disk, np.linspace(1, 2, disk.n_triangles))
    b = fem.p1_matrix(disk, np.linspace(1, 2, disk.n_triangles))
    assert (a != b).nnz == 0


def test_nonpositive_conductivity(disk):
    with pytest.raises(fem.ConductivityError):
        fem.assemble_state(disk, (0.0, 1.0), NEUMANN, None)
    with pytest.raises(fem.ConductivityError):
        fem.element_conductivity(disk, (1.0, -2.0))


# ---------------------------------------------------------------------------
# state systems


def test_neumann_zero_flux_zero_solution(disk):
    u = fem.solve_spd(fem.assemble_state(disk, KC, NEUMANN, lambda x, y: 0.0 * x))
    assert np.all(u == 0.0)


def test_dirichlet_constant_maximum_principle():
    m = generate_disk_mesh(2.0, 1.0, 0.15)
    c = 3.0
    u = fem.solve_spd(fem.assemble_state(m, (1.0, 1.0), DIRICHLET, c))
    assert np.all(u > 0) and np.all(u <= c + 1e-13)
    assert np.isclose(u.max(), c)
    inner = ~m.outer_vertex_mask
    assert u[inner].max() < c


@pytest.mark.parametrize("kind", ["callable", "scalar", "nodal", "outer"])
def test_dirichlet_data_forms_agree(disk, kind):
    f = lambda x, y: 0.3 * x - y  # noqa: E731
    ref = fem.solve_spd(fem.assemble_state(disk, KC, DIRICHLET, f))
    nodal = f(*disk.vertices.T)
    data = {"callable": f, "scalar": None, "nodal": nodal, "outer": nodal[disk.outer_vertex_mask]}[kind]
    if kind == "scalar":
        u = fem.solve_spd(fem.assemble_state(disk, KC, DIRICHLET, 2.5))
        assert np.allclose(u[disk.outer_vertex_mask], 2.5)
        return
    np.testing.assert_array_equal(fem.solve_spd(fem.assemble_state(disk, KC, DIRICHLET, data)), ref)


def test_dirichlet_bad_shape(disk):
    with pytest.raises(ValueError):
        fem.assemble_state(disk, KC, DIRICHLET, np.zeros(3))
    with pytest.raises(ValueError):
        fem.assemble_state(disk, KC, "ROBIN", None)


def test_state_residual_contract(disk):
    g = lambda x, y: np.cos(5 * np.arctan2(y, x))  # noqa: E731
    s = fem.assemble_state(disk, KC, NEUMANN, g)
    u = fem.solve_spd(s)
    assert np.linalg.norm(s.rhs - s.matrix @ u) <= 1e-12 * np.linalg.norm(s.rhs)


def test_neumann_load_exact_for_degree_six():
    m = single_triangle((0, 0), (2, 0), (0.5, 1.5))
    g = lambda x, y: x ** 6 - 3 * x ** 2 * y ** 4 + y + 1  # noqa: E731  g * hat has degree 7
    load = fem.neumann_load(m, g)
    oracle = np.zeros(3)
    for a, b in m.boundary_edges:
        p, q = m.vertices[a], m.vertices[b]
        L = np.linalg.norm(q - p)
        oracle[a] += L * quad(lambda t: g(*(p + t * (q - p))) * (1 - t), 0, 1, epsabs=1e-14)[0]
        oracle[b] += L * quad(lambda t: g(*(p + t * (q - p))) * t, 0, 1, epsabs=1e-14)[0]
    np.testing.assert_allclose(load, oracle, rtol=1e-13)


# ---------------------------------------------------------------------------
# solver


def test_solve_identity():
    b = np.array([1.0, -2.0, 3.5])
    np.testing.assert_array_equal(fem.solve_spd(LinearSystem(sp.identity(3), b)), b)


def test_solve_two_by_two():
    x = fem.solve_spd(LinearSystem(np.array([[2.0, 1.0], [1.0, 2.0]]), np.ones(2)))
    np.testing.assert_allclose(x, [1 / 3, 1 / 3], rtol=1e-15)


def test_solve_constraints():
    A = np.array([[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]])
    x = fem.solve_spd(LinearSystem(A, np.zeros(3), [0, 2], [1.0, 1.0]))
    np.testing.assert_allclose(x, [1.0, 1.0, 1.0])


def test_solve_zero_rhs():
    assert np.all(fem.solve_spd(LinearSystem(np.eye(2) * 3, np.zeros(2))) == 0)


@pytest.mark.parametrize("A", [
    np.array([[1.0, 2.0], [2.0, 1.0]]),   # indefinite
    np.array([[-1.0, 0.0], [0.0, 1.0]]),  # negative diagonal
    np.array([[1.0, 0.5], [0.0, 1.0]]),   # unsymmetric
])
def test_solve_rejects_non_spd(A):
    with pytest.raises(SolverError):
        fem.solve_spd(LinearSystem(A, np.ones(2)))


def test_solve_shape_mismatch():
    with pytest.raises(ValueError):
        LinearSystem(np.eye(2), np.ones(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2 ** 31))
def test_solve_random_spd(n, seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    A = B @ B.T + n * np.eye(n)
    b = rng.standard_normal(n)
    x = fem.solve_spd(LinearSystem(A, b))
    assert np.linalg.norm(b - A @ x) <= 1e-12 * np.linalg.norm(b)


# ---------------------------------------------------------------------------
# H(div) systems


def test_hdiv_matrices_symmetric_positive_diagonal(disk):
    u = np.linspace(-1, 1, disk.n_vertices)
    th = np.ones(2 * disk.n_vertices)
    g = lambda x, y: x  # noqa: E731
    for kind, inputs in ((STATE_N, {"g": g}), (STATE_D, {"U_D": u}), (ADJ_N, {"u": u, "theta": th}),
                         (ADJ_D, {"u": u, "theta": th})):
        s = fem.assemble_hdiv(disk, KC, kind, inputs)
        assert abs(s.matrix - s.matrix.T).max() <= 1e-14 * abs(s.matrix).max()
        assert np.all(s.matrix.diagonal() > 0)
        x = fem.solve_spd(s)
        free = np.setdiff1d(np.arange(disk.n_edges), s.constrained)
        r = (s.rhs - s.matrix @ x)[free]
        bnorm = np.linalg.norm((s.rhs - s.matrix[:, s.constrained] @ s.values)[free])
        assert np.linalg.norm(r) <= 1e-12 * max(bnorm, 1e-300)


def test_hdiv_state_n_zero_data(disk):
    assert np.all(fem.solve_spd(fem.assemble_hdiv(disk, KC, STATE_N, {"g": None})) == 0)


def test_hdiv_adjoint_zero_theta(disk):
    u = np.linspace(-1, 1, disk.n_vertices)
    for kind in (ADJ_N, ADJ_D):
        s = fem.assemble_hdiv(disk, KC, kind, {"u": u, "theta": np.zeros(2 * disk.n_vertices)})
        assert np.all(fem.solve_spd(s) == 0)


@pytest.mark.parametrize("kind, inputs", [(STATE_D, {}), (ADJ_N, {"u": 0}), (ADJ_D, {"theta": 0}), ("X", {})])
def test_hdiv_missing_inputs(disk, kind, inputs):
    with pytest.raises(ValueError):
        fem.assemble_hdiv(disk, KC, kind, inputs)


def test_state_n_boundary_dofs_are_edge_integrals(disk):
    g = lambda x, y: x ** 3 - 2 * x * y + 0.5  # noqa: E731  cubic: 4-point Gauss is exact
    s = fem.assemble_hdiv(disk, KC, STATE_N, {"g": g})
    x = fem.solve_spd(s)
    ids, tri, loc = disk.outer_edge_data
    # outward flux through each OUTER edge, oriented by the owning triangle
    flux = x[ids] * disk.edge_signs[tri, loc]
    e = disk.labelled_edges(fem.OUTER)
    for k, (a, b) in enumerate(e):
        p, q = disk.vertices[a], disk.vertices[b]
        L = np.linalg.norm(q - p)
        exact = L * quad(lambda t: g(*(p + t * (q - p))), 0, 1, epsabs=1e-15)[0]
        assert flux[k] == pytest.approx(exact, rel=1e-13, abs=1e-14)
    np.testing.assert_array_equal(flux, fem.edge_integrals(disk, g))


# ---------------------------------------------------------------------------
# norms


def test_energy_norm_constant(disk):
    assert fem.energy_norm(disk, KC, np.ones(disk.n_vertices)) == pytest.approx(np.sqrt(disk.areas.sum()),
                                                                                 rel=1e-13)


def test_energy_norm_zero(disk):
    assert fem.energy_norm(disk, KC, np.zeros(disk.n_vertices)) == 0.0


def test_energy_norm_linear_on_unit_square():
    m = unit_square(4)
    assert fem.energy_norm(m, (1.0, 1.0), m.vertices[:, 0]) == pytest.approx(np.sqrt(4 / 3), rel=1e-13)


def test_energy_product_symmetric(disk):
    rng = np.random.default_rng(1)
    v, w = rng.standard_normal((2, disk.n_vertices))
    assert fem.energy_product(disk, KC, v, w) == pytest.approx(fem.energy_product(disk, KC, w, v), rel=1e-13)
    assert fem.energy_product(disk, KC, v, v) == pytest.approx(fem.energy_norm(disk, KC, v) ** 2, rel=1e-13)


# ---------------------------------------------------------------------------
# transfer


@pytest.fixture(scope="module")
def hierarchy(disk):
    coarse = as_root(disk)
    fine = refine(refine_uniform(coarse, project=False), [0, 3, 11])
    return coarse, fine


def test_prolong_keeps_coarse_vertex_values(hierarchy):
    coarse, fine = hierarchy
    rng = np.random.default_rng(0)
    f = fem.p1_field(coarse, rng.standard_normal(coarse.n_vertices))
    pf = fem.prolong(f, fine)
    tri, _ = fem.locate(fine, coarse.vertices)
    np.testing.assert_allclose(fem.evaluate_p1(fine, pf.coefficients, tri, coarse.vertices), f.coefficients,
                               atol=1e-12)


def test_prolong_constant(hierarchy):
    coarse, fine = hierarchy
    pf = fem.prolong(fem.p1_field(coarse, np.ones(coarse.n_vertices)), fine)
    np.testing.assert_allclose(pf.coefficients, 1.0, rtol=1e-14)


def test_prolong_energy_invariant(hierarchy):
    coarse, fine = hierarchy
    v = np.sin(coarse.vertices[:, 0]) * coarse.vertices[:, 1]
    pv = fem.prolong(fem.p1_field(coarse, v), fine).coefficients
    assert fem.energy_norm(fine, KC, pv) == pytest.approx(fem.energy_norm(coarse, KC, v), rel=1e-10)


def test_prolong_vector_field(hierarchy):
    coarse, fine = hierarchy
    vals = np.column_stack([coarse.vertices[:, 0], -2 * coarse.vertices[:, 1]])
    pf = fem.prolong(fem.vec_field(coarse, vals), fine)
    np.testing.assert_allclose(pf.nodal(), np.column_stack([fine.vertices[:, 0], -2 * fine.vertices[:, 1]]),
                               atol=1e-12)


def test_prolong_requires_hierarchy(disk):
    other = generate_disk_mesh(5.0, 4.0, 0.8)
    with pytest.raises(MeshError):
        fem.prolong(fem.p1_field(disk, np.ones(disk.n_vertices)), other)
    with pytest.raises(ValueError):
        fem.prolong(Field(FeSpace(disk, RT0), np.zeros(disk.n_edges)), refine_uniform(as_root(disk)))


def test_galerkin_orthogonality():
    coarse = as_root(generate_disk_mesh(5.0, 4.0, 1.0))
    ref = refine_uniform(coarse, 2, project=False)
    g = lambda x, y: x - 0.5 * y  # noqa: E731  linear flux: edge quadrature exact on both meshes
    u_h = fem.solve_spd(fem.assemble_state(coarse, KC, NEUMANN, g))
    u_ref = fem.solve_spd(fem.assemble_state(ref, KC, NEUMANN, g))
    P = fem.prolongation_matrix(coarse, ref)
    A = fem.state_matrix(ref, KC)
    e = u_ref - P @ u_h
    defect = P.T @ (A @ e)  # a(e, P phi_i) for every coarse basis function
    basis_norm = np.sqrt(np.asarray((P.multiply(A @ P)).sum(axis=0)).ravel())
    ref_norm = fem.energy_norm(ref, KC, u_ref)
    assert np.all(np.abs(defect) <= 1e-8 * basis_norm * ref_norm)
    assert fem.energy_norm(ref, KC, e) > 1e-3 * ref_norm  # the test is not vacuous
