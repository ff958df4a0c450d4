import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hygrohom.errors import AssemblyError, SolverError
from hygrohom.fem import (StructuredGrid, assemble_consistent_mass, assemble_convection, assemble_diffusion,
                          assemble_lumped_mass, assemble_robin, boundary_mass_vector, l2_distance_spacetime,
                          l2_norm, lumped_mass_vector, solve_general, solve_spd)


def test_grid_counts_and_spacing():
    g = StructuredGrid(4, 3)
    assert g.n_nodes == 20 and g.n_elements == 12
    assert g.nx * g.hx == pytest.approx(1.0) and g.ny * g.hy == pytest.approx(1.0)
    assert len(g.boundary_edges) == 2 * (4 + 3)
    assert boundary_mass_vector(g).sum() == pytest.approx(4.0)


def test_unit_element_stiffness_by_hand():
    K = assemble_diffusion(StructuredGrid(1, 1), 1.0).toarray()
    # nodes 0:(0,0) 1:(1,0) 2:(0,1) 3:(1,1); hand integration of the bilinear basis
    ref = np.array([[4, -1, -1, -2], [-1, 4, -2, -1], [-1, -2, 4, -1], [-2, -1, -1, 4]]) / 6.0
    np.testing.assert_allclose(K, ref, atol=1e-15)
    np.testing.assert_allclose(np.diag(K), 2.0 / 3.0, rtol=1e-15)


def test_stiffness_kills_constants_and_scales():
    g = StructuredGrid(5, 4)
    coeff = np.random.default_rng(0).uniform(0.1, 3.0, g.n_elements)
    K = assemble_diffusion(g, coeff)
    assert np.max(np.abs(K @ np.ones(g.n_nodes))) <= 1e-14
    K2 = assemble_diffusion(g, 2.5 * coeff)
    np.testing.assert_allclose(K2.toarray(), 2.5 * K.toarray(), rtol=1e-14, atol=1e-15)


def test_stiffness_symmetry_exact():
    g = StructuredGrid(6, 6)
    K = assemble_diffusion(g, np.random.default_rng(1).uniform(0.5, 2.0, g.n_elements))
    assert K.symmetric
    assert (K.matrix != K.matrix.T).nnz == 0


def test_nonpositive_coefficient_rejected():
    g = StructuredGrid(2, 2)
    with pytest.raises(AssemblyError):
        assemble_diffusion(g, np.array([1.0, 0.0, 1.0, 1.0]))
    with pytest.raises(AssemblyError):
        assemble_diffusion(g, -1.0)
    with pytest.raises(AssemblyError):
        assemble_diffusion(g, np.tile(np.diag([1.0, -1.0]), (4, 1, 1)))


def test_tensor_coefficient_matches_scalar():
    g = StructuredGrid(3, 3)
    c = np.random.default_rng(2).uniform(0.5, 2.0, g.n_elements)
    Ks = assemble_diffusion(g, c).toarray()
    Kt = assemble_diffusion(g, c[:, None, None] * np.eye(2)).toarray()
    np.testing.assert_allclose(Ks, Kt, rtol=1e-14, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(float, 12, elements=st.floats(1e-3, 1e3)))
def test_stiffness_properties(coeff):
    g = StructuredGrid(4, 3)
    K = assemble_diffusion(g, coeff).toarray()
    scale = coeff.max()
    assert np.array_equal(K, K.T)
    assert np.max(np.abs(K.sum(axis=1))) <= 1e-12 * scale
    assert np.linalg.eigvalsh(K).min() >= -1e-12 * scale


def test_lumped_mass_partition_of_unity():
    g = StructuredGrid(2, 2)
    m = assemble_lumped_mass(g, 1.0)
    assert m.diagonal().sum() == pytest.approx(1.0, rel=1e-15)
    assert np.all(m.diagonal() > 0)
    assert np.all(assemble_lumped_mass(g, 0.0).diagonal() == 0.0)


def test_lumped_mass_linear_weight_exact():
    g = StructuredGrid(7, 5)
    xc = g.centroids()
    w = 1.0 + 2.0 * xc[:, 0] + 3.0 * xc[:, 1]
    assert abs(lumped_mass_vector(g, w).sum() - 3.5) <= 1e-12 * 3.5


def test_lumped_equals_consistent_row_sums():
    g = StructuredGrid(4, 4)
    w = np.random.default_rng(3).uniform(0, 1, g.n_elements)
    M = assemble_consistent_mass(g, w).toarray()
    np.testing.assert_allclose(M.sum(axis=1), lumped_mass_vector(g, w), rtol=1e-14)


def test_negative_mass_weight_rejected():
    with pytest.raises(AssemblyError):
        lumped_mass_vector(StructuredGrid(1, 1), -1.0)


def test_robin_zero_coefficient():
    g = StructuredGrid(3, 3)
    R, load = assemble_robin(g, 0.0, 5.0)
    assert R.matrix.nnz == 0 or np.all(R.diagonal() == 0)
    assert np.all(load == 0)


def test_robin_equilibrium_and_support():
    g = StructuredGrid(4, 4)
    R, load = assemble_robin(g, 2.0, -0.7)
    u = np.full(g.n_nodes, -0.7)
    assert np.max(np.abs(R @ u - load)) <= 1e-15
    interior = np.setdiff1d(np.arange(g.n_nodes), g.boundary_nodes())
    assert np.all(R.diagonal()[interior] == 0)
    v = np.random.default_rng(4).normal(size=g.n_nodes)
    assert v @ (R @ v) >= 0


def test_robin_two_point_bvp():
    k, beta, g0, g1 = 0.8, 1.7, 2.0, -1.0
    g = StructuredGrid(8, 1)
    amb = np.where(g.edge_sides == "left", g0, g1)
    R, load = assemble_robin(g, beta, amb, sides=("left", "right"))
    K = assemble_diffusion(g, k)
    u = np.linalg.solve((K + R).toarray(), load)
    # -k B + beta (A - g0) = 0,  k B + beta (A + B - g1) = 0
    A_, B_ = np.linalg.solve([[beta, -k], [beta, k + beta]], [beta * g0, beta * g1])
    exact = A_ + B_ * g.coordinates()[:, 0]
    assert np.max(np.abs(u - exact)) <= 1e-10 * np.max(np.abs(exact))


def test_patch_test_linear_field():
    k, beta = 1.3, 0.9
    g = StructuredGrid(6, 5)
    grad = np.array([2.0, -3.0])

    def lin(xy):
        return 1.0 + xy[..., 0] * grad[0] + xy[..., 1] * grad[1]

    xy = g.coordinates()
    normals = g.edge_normals()
    dn = normals @ grad
    ends = lin(xy[g.boundary_edges])
    amb = ends + (k * dn / beta)[:, None]
    R, load = assemble_robin(g, beta, amb)
    K = assemble_diffusion(g, k)
    u = solve_spd(K + R, load, rel_tol=1e-13)
    assert np.max(np.abs(u - lin(xy))) <= 1e-9


def test_convection_zero_and_linear():
    g = StructuredGrid(3, 4)
    assert assemble_convection(g, np.zeros((g.n_elements, 2))).matrix.count_nonzero() == 0
    v = np.random.default_rng(5).normal(size=(g.n_elements, 2))
    C1 = assemble_convection(g, v).toarray()
    C2 = assemble_convection(g, 2 * v).toarray()
    np.testing.assert_allclose(C2, 2 * C1, rtol=1e-15, atol=0)
    assert not assemble_convection(g, v).symmetric


def test_convection_divergence_free_tangent_velocity():
    # v = curl(psi_h) of a Q1 stream function vanishing on the boundary
    g = StructuredGrid(6, 6)
    psi = np.random.default_rng(6).normal(size=g.n_nodes)
    psi[g.boundary_nodes()] = 0.0
    grad = g.element_gradients(psi)
    v = np.stack([grad[..., 1], -grad[..., 0]], axis=-1)
    C = assemble_convection(g, v)
    assert np.max(np.abs(C @ np.full(g.n_nodes, 3.0))) <= 1e-13


def test_convection_bad_shape():
    with pytest.raises(AssemblyError):
        assemble_convection(StructuredGrid(2, 2), np.zeros((3, 2)))


def test_periodic_assembly_row_sums():
    g = StructuredGrid(4, 4)
    dof, n = g.periodic_dofs()
    K = assemble_diffusion(g, np.random.default_rng(7).uniform(1, 2, g.n_elements), dof, n)
    assert K.shape == (16, 16)
    assert np.max(np.abs(K @ np.ones(n))) <= 1e-14


# --------------------------------------------------------------------------
# solvers


def test_identity_solve():
    b = np.arange(1.0, 6.0)
    np.testing.assert_allclose(solve_spd(sp.identity(5, format="csr"), b), b)
    np.testing.assert_allclose(solve_general(sp.identity(5, format="csr"), b), b)


def test_two_by_two_hand_solve():
    A = sp.csr_matrix([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(solve_spd(A, [3.0, 3.0]), [1.0, 1.0], rtol=1e-10)
    np.testing.assert_allclose(solve_general(A, [3.0, 3.0]), [1.0, 1.0], rtol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_random_spd_residual(seed):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(50, 50))
    A = Q @ Q.T + 50 * np.eye(50)
    b = rng.normal(size=50)
    for tol in (1e-6, 1e-10):
        x = solve_spd(sp.csr_matrix(A), b, rel_tol=tol)
        assert np.linalg.norm(A @ x - b) <= tol * np.linalg.norm(b)


@pytest.mark.parametrize("seed", range(5))
def test_random_nonsymmetric_residual(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(50, 50)) + 20 * np.eye(50)
    b = rng.normal(size=50)
    x = solve_general(sp.csr_matrix(A), b, rel_tol=1e-10)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_solver_deterministic():
    g = StructuredGrid(10, 10)
    A = assemble_diffusion(g, 1.0) + assemble_robin(g, 1.0, 0.0)[0]
    b = np.random.default_rng(8).normal(size=g.n_nodes)
    assert np.array_equal(solve_spd(A, b), solve_spd(A, b))


def test_nonconvergence_carries_history():
    g = StructuredGrid(20, 20)
    A = assemble_diffusion(g, 1.0) + assemble_robin(g, 1e-3, 0.0)[0]
    b = np.random.default_rng(9).normal(size=g.n_nodes)
    with pytest.raises(SolverError) as exc:
        solve_spd(A, b, rel_tol=1e-12, maxiter=2)
    assert len(exc.value.residual_history) >= 1
    assert exc.value.residual_history[-1] > 1e-12


def test_tolerance_range_enforced():
    A = sp.identity(3, format="csr")
    for tol in (0.0, 1e-3):
        with pytest.raises(ValueError):
            solve_spd(A, np.ones(3), rel_tol=tol)
        with pytest.raises(ValueError):
            solve_general(A, np.ones(3), rel_tol=tol)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        solve_spd(sp.identity(3, format="csr"), np.ones(4))


# --------------------------------------------------------------------------
# norms


def test_l2_norm_values():
    g = StructuredGrid(8, 8)
    assert l2_norm(g, np.zeros(g.n_nodes)) == 0.0
    assert l2_norm(g, np.ones(g.n_nodes)) == pytest.approx(1.0, rel=1e-14)
    x = g.coordinates()[:, 0]
    assert l2_norm(g, x) ** 2 == pytest.approx(1.0 / 3.0, rel=1e-13)


def test_l2_norm_positive_for_nonzero():
    g = StructuredGrid(3, 3)
    u = np.zeros(g.n_nodes)
    u[5] = 1e-3
    assert l2_norm(g, u) > 0


def test_l2_dimension_mismatch():
    g = StructuredGrid(2, 2)
    with pytest.raises(ValueError):
        l2_norm(g, np.ones(4))
    with pytest.raises(ValueError):
        l2_distance_spacetime(g, np.ones((3, 9)), np.ones((4, 9)), 0.1)


def test_spacetime_distance_of_constant_offset():
    g = StructuredGrid(4, 4)
    a = np.zeros((11, g.n_nodes))
    b = a + 0.5
    assert l2_distance_spacetime(g, a, b, 0.1) == pytest.approx(0.5 * np.sqrt(1.0), rel=1e-13)
    assert l2_distance_spacetime(g, a, a, 0.1) == 0.0
