import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from porous_city import fem, mesh as M, scenario

import oracles
from conftest import ALL_WALL

REF = M.build_mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]], [2, 2, 2])


def perturbed_square(n=6, seed=0):
    """Unit square with jittered interior nodes, so nothing is aligned by accident."""
    m = M.rectangle_mesh(1.0, 1.0, n, side_tags=ALL_WALL)
    rng = np.random.default_rng(seed)
    nodes = m.nodes.copy()
    interior = np.ones(m.n_nodes, dtype=bool)
    interior[np.unique(m.boundary_edges)] = False
    nodes[interior] += rng.uniform(-0.2, 0.2, (interior.sum(), 2)) / n
    return M.build_mesh(nodes, m.triangles, m.boundary_edges, m.edge_tags)


def test_pattern_sorted_and_symmetric(unit_square):
    p = unit_square.pattern
    for i in range(unit_square.n_nodes):
        cols = p.indices[p.indptr[i]:p.indptr[i + 1]]
        assert np.all(np.diff(cols) > 0)
    A = fem.assemble_stiffness(unit_square).to_scipy()
    S = (A != 0).astype(int)
    assert (S - S.T).nnz == 0


def test_reference_mass_and_stiffness():
    Mref = fem.assemble_mass(REF).to_dense()
    np.testing.assert_allclose(Mref, 0.5 / 12 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]), atol=1e-15)
    Kref = fem.assemble_stiffness(REF).to_dense()
    np.testing.assert_allclose(Kref, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]], atol=1e-15)
    np.testing.assert_allclose(fem.lump(fem.assemble_mass(REF)), 0.5 / 3, atol=1e-15)


def test_mass_matches_quadrature_oracle():
    m = perturbed_square()
    c = 0.3 + m.nodes[:, 0] ** 2 + 0.5 * m.nodes[:, 1]
    np.testing.assert_allclose(fem.assemble_mass(m, c).to_dense(),
                               oracles.loop_mass(m.nodes, m.triangles, c), atol=1e-14)


def test_stiffness_and_convection_match_loop_oracle():
    m = perturbed_square()
    c = 1.0 + m.nodes[:, 1]
    np.testing.assert_allclose(fem.assemble_stiffness(m, c).to_dense(),
                               oracles.loop_stiffness(m.nodes, m.triangles, c), atol=1e-12)
    v = np.column_stack([np.sin(m.nodes[:, 1]), 1.0 - m.nodes[:, 0]])
    np.testing.assert_allclose(fem.assemble_convection(m, v).to_dense(),
                               oracles.loop_convection(m.nodes, m.triangles, v), atol=1e-13)


def test_mass_row_sums_and_total_of_porosity(cfg):
    m, zones = scenario.load_mesh(cfg.replace(mesh=dataclasses.replace(cfg.mesh, h=2.0)))
    ones = fem.lump(fem.assemble_mass(m))
    np.testing.assert_allclose(ones, fem.node_area(m) / 3, rtol=1e-12)
    eps = scenario.build_porosity(m, zones, cfg)
    total = float(fem.assemble_mass(m, eps).data.sum())
    oracle = oracles.integral(m.nodes, m.triangles,
                              _p1_interpolant(m, eps))
    assert total == pytest.approx(oracle, rel=1e-10)
    assert math.fsum(fem.lumped_mass(m, eps)) == pytest.approx(total, rel=1e-12)


def _p1_interpolant(m, f):
    """Callable evaluating the P1 field f by locating the triangle (brute force, small meshes)."""
    tri = m.triangles
    x0 = m.nodes[tri[:, 0]]
    J = np.stack([m.nodes[tri[:, 1]] - x0, m.nodes[tri[:, 2]] - x0], axis=2)
    Jinv = np.linalg.inv(J)

    def ev(x, y):
        r = np.einsum("tij,tj->ti", Jinv, np.array([x, y]) - x0)
        lam = np.column_stack([1 - r.sum(1), r])
        k = int(np.argmax(lam.min(1)))
        return float(lam[k] @ f[tri[k]])
    return ev


def test_stiffness_null_space_and_energy_convergence():
    errs = []
    for n in (8, 16, 32):
        m = M.rectangle_mesh(1, 1, n, side_tags=ALL_WALL)
        K = fem.assemble_stiffness(m)
        assert np.abs(K.matvec(np.full(m.n_nodes, 3.7))).max() <= 1e-12 * np.abs(K.data).max()
        u = np.sin(np.pi * m.nodes[:, 0]) * np.sin(np.pi * m.nodes[:, 1])
        errs.append(abs(u @ K.matvec(u) - np.pi ** 2 / 2))
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(rates > 1.8)


def test_convection_cases(unit_square):
    m = unit_square
    assert np.all(fem.assemble_convection(m, (0.0, 0.0)).data == 0)
    Cx = fem.assemble_convection(m, (1.0, 0.0))
    assert np.abs(Cx.matvec(np.full(m.n_nodes, 2.0))).max() < 1e-14
    # (Cx x)_i = ∫ λ_i = node area / 3
    np.testing.assert_allclose(Cx.matvec(m.nodes[:, 0]), fem.node_area(m) / 3, atol=1e-14)


def test_convection_skew_for_constant_tangent_field():
    m = M.rectangle_mesh(1, 1, 10, side_tags=ALL_WALL)
    C = fem.assemble_convection(m, (0.7, -0.3))
    interior = np.ones(m.n_nodes, dtype=bool)
    interior[np.unique(m.boundary_edges)] = False
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = np.zeros(m.n_nodes)
        x[interior] = rng.standard_normal(interior.sum())
        assert abs(x @ C.matvec(x)) <= 1e-8 * (x @ x)


def test_boundary_flux():
    m = M.rectangle_mesh(1, 1, 4, side_tags={"left": "inlet"})
    B = fem.assemble_boundary_flux(m, (-1.0, 0.0), "inlet")
    assert B.data.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(fem.assemble_boundary_flux(m, (0.0, 1.0), "inlet").data == 0)
    assert np.all(fem.assemble_boundary_flux(m, (1.0, 1.0), "outlet").data == 0)


def test_lump_rejects_non_positive():
    with pytest.raises(fem.NonPositiveLumpedEntry):
        fem.lump(fem.SparseMatrix.from_dense([[1.0, -2.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(fem.lump(fem.SparseMatrix.identity(4)), np.ones(4))


def test_solver_small_cases():
    I = fem.SparseMatrix.identity(5)
    b = np.arange(1.0, 6.0)
    np.testing.assert_array_equal(fem.solve(I, b), b)
    A = fem.SparseMatrix.from_dense([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(fem.solve(A, np.ones(2), rel_tol=1e-14), [1 / 3, 1 / 3], atol=1e-14)
    N = fem.SparseMatrix.from_dense([[3.0, 1.0, 0.0], [-1.0, 2.0, 0.5], [0.0, 0.3, 1.0]])
    x = fem.solve(N, np.array([1.0, 2.0, 3.0]), symmetric=False, rel_tol=1e-13)
    np.testing.assert_allclose(N.to_dense() @ x, [1, 2, 3], atol=1e-12)


def test_solver_failures():
    A = fem.SparseMatrix.from_dense([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(fem.Breakdown):
        fem.solve(A, np.ones(2))
    m = M.rectangle_mesh(1, 1, 12)
    K = fem.assemble_stiffness(m) + fem.assemble_mass(m)
    with pytest.raises(fem.MaxIterExceeded):
        fem.solve(K, np.ones(m.n_nodes), rel_tol=1e-14, max_iter=2)


def test_apply_dirichlet_solves_laplace():
    m = M.rectangle_mesh(1, 1, 6)
    K = fem.assemble_stiffness(m)
    bn = np.unique(m.boundary_edges)
    exact = 1.0 + 2.0 * m.nodes[:, 0] - m.nodes[:, 1]
    A, b = fem.apply_dirichlet(K, np.zeros(m.n_nodes), bn, exact[bn])
    np.testing.assert_allclose(fem.solve(A, b, rel_tol=1e-13), exact, atol=1e-11)


def test_assembly_bit_identical():
    m = perturbed_square(seed=5)
    c = np.cos(m.nodes[:, 0])
    for f in (fem.assemble_mass, fem.assemble_stiffness):
        assert f(m, c).data.tobytes() == f(m, c).data.tobytes()


def test_integrals_and_recovered_gradient(unit_square):
    m = unit_square
    f = 2.0 - 3.0 * m.nodes[:, 0] + m.nodes[:, 1]
    assert fem.integrate(m, f) == pytest.approx(2.0 - 1.5 + 0.5, abs=1e-14)
    np.testing.assert_allclose(fem.recovered_gradient(m, f), np.tile([-3.0, 1.0], (m.n_nodes, 1)), atol=1e-12)
    v = np.column_stack([m.nodes[:, 0], -m.nodes[:, 1]])
    assert fem.divergence_l2(m, v) < 1e-14
    b = fem.load_vector(m, f)
    assert b.sum() == pytest.approx(fem.integrate(m, f), abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_mass_positive_definite(seed):
    m = perturbed_square(4, seed % 7)
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.1, 2.0, m.n_nodes)
    x = rng.standard_normal(m.n_nodes)
    assert x @ fem.assemble_mass(m, c).matvec(x) > 0
