import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hygrohom.cell import (ContrastTable, build_contrast_table, build_tables, cell_residual, contrast_nodes,
                           corrector_reconstruction, effective_b, effective_sigma, effective_tensor,
                           hydraulic_contrast_range, query_effective_A, query_effective_Lambda, solve_corrector,
                           solve_correctors, tensor_from_correctors, voigt_reuss_bounds)
from hygrohom.errors import ConfigurationError, ExtrapolationError
from hygrohom.materials import eval_b, eval_sigma
from hygrohom.microstructure import UnitCellGeometry, random_raster, rasterize, volume_fraction

LAMINATE = rasterize(UnitCellGeometry("laminate", normal_axis="x", cement_fraction=0.5), 8)
DISK = rasterize(UnitCellGeometry("disk_inclusion", radius=0.25), 8)
CHECKER = rasterize(UnitCellGeometry("checkerboard"), 2)


def test_contrast_one_gives_zero_corrector():
    corr = solve_correctors(DISK, (2.0, 2.0), 16)
    assert np.all(corr.values == 0.0)
    np.testing.assert_allclose(tensor_from_correctors(corr), 2.0 * np.eye(2), atol=1e-14)


def test_laminate_corrector_matches_1d_oracle():
    a_c, a_a = 3.0, 0.5
    n = 32
    w1 = solve_corrector(LAMINATE, (a_c, a_a), 1, n)
    # a (1 + w') = harmonic mean; piecewise-linear periodic profile with zero mean
    ah = 2 * a_c * a_a / (a_c + a_a)
    s_c, s_a = ah / a_c - 1.0, ah / a_a - 1.0
    assert s_c == pytest.approx((a_a - a_c) / (a_a + a_c))
    y = np.linspace(0, 1, n + 1)
    prof = np.where(y <= 0.5, s_c * y, 0.5 * s_c + s_a * (y - 0.5))
    prof -= np.mean(prof[:-1])  # nodal mean over one period
    w = w1.reshape(n + 1, n + 1)  # [iy, ix]
    np.testing.assert_allclose(w, np.broadcast_to(prof, (n + 1, n + 1)), atol=1e-10)


def test_laminate_second_corrector_vanishes():
    w2 = solve_corrector(LAMINATE, (3.0, 0.5), 2, 16)
    assert np.max(np.abs(w2)) <= 1e-12


def test_corrector_periodic_zero_mean_small_residual():
    corr = solve_correctors(random_raster(4, seed=3), (5.0, 1.0), 32)
    n = 32
    for d in (1, 2):
        w = corr.direction(d).reshape(n + 1, n + 1)
        assert np.array_equal(w[0], w[-1]) and np.array_equal(w[:, 0], w[:, -1])
    assert np.max(np.abs(corr.mean())) <= 1e-12
    assert cell_residual(corr) <= 1e-10


def test_uniform_tensor_exact():
    uni = rasterize(UnitCellGeometry("uniform"), 4)
    A = effective_tensor(uni, (1.7, 0.3), 16)
    assert np.max(np.abs(A - 1.7 * np.eye(2))) <= 1e-10


def test_laminate_tensor_formula():
    a_c, a_a = 4.0, 1.0
    A = effective_tensor(LAMINATE, (a_c, a_a), 32)
    ref = np.diag([2 * a_c * a_a / (a_c + a_a), (a_c + a_a) / 2])
    np.testing.assert_allclose(A, ref, rtol=1e-8, atol=1e-12)


def test_checkerboard_near_duality_value():
    A = effective_tensor(CHECKER, (10.0, 1.0), 64)
    assert abs(A[0, 0] / np.sqrt(10) - 1) < 0.05
    assert abs(A[0, 0] - A[1, 1]) <= 1e-6 * A[0, 0]


def test_disk_tensor_isotropic():
    raster = rasterize(UnitCellGeometry("disk_inclusion", radius=0.3), 16)
    A = effective_tensor(raster, (1.0, 7.0), 32)
    assert abs(A[0, 0] - A[1, 1]) <= 1e-6 * A[0, 0]
    assert abs(A[0, 1]) <= 1e-10 * A[0, 0]


def test_nonpositive_phase_coefficient():
    with pytest.raises(ConfigurationError):
        effective_tensor(DISK, (0.0, 1.0), 16)


def test_bad_direction():
    with pytest.raises(ValueError):
        solve_corrector(DISK, (1.0, 2.0), 3, 16)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), logc=st.floats(-1.0, 1.0))
def test_random_raster_symmetry_and_bounds(seed, logc):
    raster = random_raster(4, seed=seed)
    c = 10.0 ** logc
    A = effective_tensor(raster, (c, 1.0), 16)
    assert abs(A[0, 1] - A[1, 0]) <= 1e-10 * np.abs(A).max()
    lo, hi = voigt_reuss_bounds(raster, (c, 1.0))
    ev = np.linalg.eigvalsh(0.5 * (A + A.T))
    assert ev.min() >= lo * (1 - 1e-10) and ev.max() <= hi * (1 + 1e-10)


def test_scaling_both_phases():
    raster = random_raster(4, seed=4)
    A1 = effective_tensor(raster, (3.0, 1.0), 16)
    A2 = effective_tensor(raster, (7.5, 2.5), 16)
    np.testing.assert_allclose(A2, 2.5 * A1, rtol=1e-10, atol=1e-14)


def test_corrector_reconstruction_zero_for_contrast_one():
    corr = solve_correctors(DISK, (1.0, 1.0), 16)
    pts = np.random.default_rng(0).random((10, 2))
    assert np.all(corrector_reconstruction(corr, np.ones((10, 2)), 0.25, pts) == 0.0)


def test_corrector_reconstruction_laminate():
    a_c, a_a, n = 3.0, 0.5, 32
    corr = solve_correctors(LAMINATE, (a_c, a_a), n)
    eps = 0.25
    pts = eps * (np.array([[7.0, 3.0], [20.0, 30.0]]) / n + np.array([[1.0, 2.0], [3.0, 0.0]]))
    val = corrector_reconstruction(corr, np.array([[1.0, 0.0], [2.0, 5.0]]), eps, pts)
    # the second direction vanishes, the first follows the nodal profile (nodes coincide here)
    w1 = corr.direction(1)
    y = np.mod(pts / eps, 1.0) * n
    node = [corr.grid.node(int(round(yy[0])), int(round(yy[1]))) for yy in y]
    np.testing.assert_allclose(val, eps * np.array([1.0, 2.0]) * w1[node], atol=1e-12)


# --------------------------------------------------------------------------
# contrast tables


@pytest.fixture(scope="module")
def disk_table():
    return build_contrast_table(DISK, contrast_nodes(0.1, 10.0), 32, (0.1, 10.0))


def test_contrast_nodes_log_spaced():
    c = contrast_nodes(0.5, 2.0)
    assert np.any(c == 1.0)
    assert c[0] <= 0.5 and c[-1] >= 2.0
    np.testing.assert_allclose(np.diff(np.log10(c)), 1 / 33, rtol=1e-9)


def test_single_node_table_identity():
    t = build_contrast_table(DISK, [1.0], 16)
    np.testing.assert_allclose(t(1.0), np.eye(2), atol=1e-10)


def test_table_nodes_match_direct(disk_table):
    for j in (0, 17, 40, len(disk_table.nodes) - 1):
        c = disk_table.nodes[j]
        np.testing.assert_array_equal(disk_table.tensors[j], effective_tensor(DISK, (c, 1.0), 32))
        np.testing.assert_allclose(disk_table(c), disk_table.tensors[j], rtol=1e-12, atol=1e-14 * c)


def test_table_identity_at_unit_contrast(disk_table):
    np.testing.assert_allclose(disk_table(1.0), np.eye(2), atol=1e-10)


def test_off_node_query(disk_table):
    direct = effective_tensor(DISK, (3.7, 1.0), 32)
    got = disk_table(3.7)
    assert np.linalg.norm(got - direct) <= 1e-3 * np.linalg.norm(direct)


def test_table_refuses_extrapolation(disk_table):
    with pytest.raises(ExtrapolationError):
        disk_table(20.0)
    with pytest.raises(ExtrapolationError):
        disk_table(0.01)


def test_table_must_cover_required_range():
    with pytest.raises(ConfigurationError):
        build_contrast_table(DISK, [1.0, 2.0], 16, required_range=(0.5, 2.0))


def test_table_save_load_csv(tmp_path, disk_table):
    path = tmp_path / "t.json"
    disk_table.save(path)
    back = ContrastTable.load(path, raster=DISK)
    np.testing.assert_array_equal(back.tensors, disk_table.tensors)
    np.testing.assert_array_equal(back(2.5), disk_table(2.5))
    with pytest.raises(ConfigurationError):
        ContrastTable.load(path, raster=LAMINATE)
    disk_table.to_csv(tmp_path / "t.csv")
    rows = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
    assert rows.shape == (len(disk_table.nodes), 5)


def test_table_rejects_unsorted_nodes():
    with pytest.raises(ConfigurationError):
        ContrastTable("x", 4, np.array([2.0, 1.0]), np.zeros((2, 2, 2)))


@pytest.fixture(scope="module")
def tables():
    from hygrohom.materials import default_laws
    return build_tables(DISK, default_laws(), 32)


@pytest.mark.parametrize("which", [0, 1], ids=["hydraulic", "thermal"])
def test_table_property_suite(tables, which):
    t = tables[which]
    np.testing.assert_allclose(t(1.0), np.eye(2), atol=1e-10)
    for c, K in zip(t.nodes, t.tensors):
        assert abs(K[0, 1] - K[1, 0]) <= 1e-10 * np.abs(K).max()
        assert abs(K[0, 0] - K[1, 1]) <= 1e-6 * K[0, 0]
        lo, hi = voigt_reuss_bounds(DISK, (c, 1.0))
        ev = np.linalg.eigvalsh(K)
        assert ev.min() >= lo * (1 - 1e-10) and ev.max() <= hi * (1 + 1e-10)


def test_hydraulic_table_covers_bounds(tables, laws):
    lo, hi = hydraulic_contrast_range(laws)
    assert tables[0].c_min <= lo and tables[0].c_max >= hi


def test_query_A_unit_laws(tables, laws, constants):
    one = lambda x, *rest: np.ones_like(np.asarray(x, dtype=float))  # noqa: E731
    L = laws.replace(k_rel=one, mu=one, k_c=lambda r: laws.k_a * one(r))
    A = query_effective_A(tables[0], L, constants.replace(rho_w=1.0), -0.3, 1.0, 0.2)
    np.testing.assert_allclose(A, laws.k_a * np.eye(2), atol=1e-12)


def test_query_A_vs_direct_solve(tables, laws, constants):
    g = np.random.default_rng(5)
    for p, th, r in zip(g.uniform(-1, 0, 4), g.uniform(0.5, 2, 4), g.uniform(0, 3, 4)):
        scale = constants.rho_w * laws.k_rel(laws.saturation(p)) / laws.mu(th)
        direct = effective_tensor(DISK, (scale * laws.k_c(r), scale * laws.k_a), 32)
        got = query_effective_A(tables[0], laws, constants, p, th, r)
        assert np.linalg.norm(got - direct) <= 1e-3 * np.linalg.norm(direct)


def test_query_Lambda_vs_direct_solve(tables, laws):
    g = np.random.default_rng(6)
    for p, th, r in zip(g.uniform(-1, 0, 4), g.uniform(0.5, 2, 4), g.uniform(0, 3, 4)):
        direct = effective_tensor(DISK, (laws.lambda_c(p, th, r), laws.lambda_a(p, th)), 32)
        got = query_effective_Lambda(tables[1], laws, p, th, r)
        assert np.linalg.norm(got - direct) <= 1e-3 * np.linalg.norm(direct)


def test_query_vectorised_shape(tables, laws, constants):
    p = np.full(7, -0.2)
    assert query_effective_A(tables[0], laws, constants, p, 1.0, 0.0).shape == (7, 2, 2)
    assert query_effective_Lambda(tables[1], laws, p, 1.0, 0.0).shape == (7, 2, 2)


def test_effective_b_single_phase(laws, constants):
    p, r = np.linspace(-1, 0, 5), 0.4
    np.testing.assert_allclose(effective_b(1.0, laws, constants, p, r),
                               constants.rho_w * laws.phi_c(r) * laws.saturation(p), rtol=1e-15)


def test_effective_b_identical_phases(laws, constants):
    L = laws.replace(phi_c=lambda r: laws.phi_a + 0 * np.asarray(r, dtype=float))
    p = np.linspace(-1, 0, 5)
    np.testing.assert_allclose(effective_b(0.5, L, constants, p, 1.0),
                               constants.rho_w * laws.phi_a * laws.saturation(p), rtol=1e-15)


@pytest.mark.parametrize("m", [16, 32, 64])
def test_effective_b_vs_raster_average(laws, constants, m):
    raster = rasterize(UnitCellGeometry("disk_inclusion", radius=0.25), m)
    p, r = -0.4, 0.7
    per_cell = np.where(raster.values == 1, eval_b("c", p, r, laws, constants), eval_b("a", p, r, laws, constants))
    avg = per_cell.mean()
    exact_chi = 1.0 - np.pi / 16
    assert abs(effective_b(exact_chi, laws, constants, p, r) - avg) <= 2.0 / m * abs(avg)
    sig = np.where(raster.values == 1, eval_sigma("c", r, laws, constants), eval_sigma("a", r, laws, constants))
    assert effective_sigma(volume_fraction(raster), laws, constants, r) == pytest.approx(sig.mean(), rel=1e-14)
