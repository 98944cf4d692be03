import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from porous_city import eikonal as E, fem, mesh as M


def test_travel_cost_cases(cfg):
    urban = np.array([True, True, False, False])
    rho = np.array([0.0, cfg.traffic.rho_max, 0.0, 5000.0])
    f = E.travel_cost(rho, urban, cfg)
    assert f[0] == 45.0
    assert f[1] == pytest.approx(cfg.routing.f_min_fraction * 45.0)
    assert f[1] > 0
    assert f[2] == 1.0 and f[3] == 1.0


def test_zero_source_gives_zero_psi():
    m = M.rectangle_mesh(1, 1, 8)
    psi = E.solve_screened_poisson(m, np.ones(m.n_nodes), np.zeros(m.n_nodes), 0.1)
    assert np.all(psi == 0)
    with pytest.raises(E.AllZeroPsi):
        E.recover_potential(psi, 0.1)


def test_psi_positive_and_radially_decreasing():
    m = M.rectangle_mesh(2, 2, 24, origin=(-1, -1))
    G = E.attraction_source(m, (0.0, 0.0), 1.0, 0.05)
    psi = E.solve_screened_poisson(m, np.ones(m.n_nodes), G, 0.2)
    assert np.all(psi > 0)
    r = np.hypot(m.nodes[:, 0], m.nodes[:, 1])
    # the structured mesh has no obtuse angles, so the discrete maximum principle
    # orders ψ along each grid ray out of the centre
    for d in ((1, 0), (0, 1), (1, 1)):
        on = np.abs(m.nodes[:, 0] * d[1] - m.nodes[:, 1] * d[0]) < 1e-12
        on &= (m.nodes @ np.array(d, float)) >= -1e-12
        order = np.argsort(r[on])
        assert np.all(np.diff(psi[on][order]) < 0)


def test_larger_eta_smoother_potential():
    # Once η reaches the domain size the Neumann boundary flattens ψ and the
    # potential gradient shrinks as η grows.  (For η far below the domain size
    # the point-source profile |∇φ| = K1(r/η)/K0(r/η) grows with η instead.)
    m = M.rectangle_mesh(1, 1, 32)
    G = E.attraction_source(m, (0.5, 0.5), 1.0, 0.2)
    sup = []
    for eta in (0.4, 0.8, 1.6, 3.2):
        phi = E.recover_potential(E.solve_screened_poisson(m, np.ones(m.n_nodes), G, eta), eta)
        g = fem.element_gradient(m, phi)
        sup.append(np.hypot(g[:, 0], g[:, 1]).max())
    assert np.all(np.diff(sup) < 0)


def test_large_eta_solve_accurate():
    m = M.rectangle_mesh(1, 1, 64)
    G = E.attraction_source(m, (0.0, 0.0), 1.0, 0.2)
    f = np.ones(m.n_nodes)
    psi, info = E.solve_screened_poisson(m, f, G, 5.0, return_info=True)
    assert info.residual <= 1e-8  # the default solver tolerance; LU sits at the round-off floor
    assert np.all(psi > 0)


def test_recover_potential_cases():
    np.testing.assert_array_equal(E.recover_potential(np.ones(4), 0.3), np.zeros(4))
    assert E.recover_potential(np.array([math.exp(-1)]), 0.5)[0] == pytest.approx(0.5, abs=1e-15)
    psi = np.array([0.2, 0.9, 0.5, 1e-320, 0.0])
    phi = E.recover_potential(psi, 1.0)
    assert np.argmin(phi) == np.argmax(psi)
    assert np.all(np.isfinite(phi))


def test_desired_speed_cases():
    m = M.rectangle_mesh(1, 1, 6)
    ud = E.desired_speed(np.ones(m.n_nodes), m.nodes[:, 0].copy(), m)
    np.testing.assert_allclose(ud, np.tile([-1.0, 0.0], (m.n_nodes, 1)), atol=1e-12)
    assert np.all(E.desired_speed(np.full(m.n_nodes, 7.0), np.full(m.n_nodes, 3.0), m) == 0)


def _routing(m, G, eta, f):
    psi = E.solve_screened_poisson(m, f, G, eta)
    phi = E.recover_potential(psi, eta)
    return phi, E.desired_speed(f, phi, m)


def test_speed_magnitude_and_downhill():
    m = M.rectangle_mesh(1, 1, 16)
    f = 1.0 + m.nodes[:, 0]
    phi, ud = _routing(m, E.attraction_source(m, (0.3, 0.6), 1.0, 0.1), 0.1, f)
    g = fem.recovered_gradient(m, phi)
    moving = np.hypot(g[:, 0], g[:, 1]) > 1e-8
    np.testing.assert_allclose(np.hypot(ud[moving, 0], ud[moving, 1]), f[moving], rtol=1e-12)
    assert np.all(np.einsum("nd,nd->n", ud, g) <= 0)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 100.0))
def test_source_scaling_leaves_direction(scale):
    m = M.rectangle_mesh(1, 1, 10)
    f = np.ones(m.n_nodes)
    G = E.attraction_source(m, (0.2, 0.7), 1.0, 0.15)
    _, u1 = _routing(m, G, 0.15, f)
    _, u2 = _routing(m, scale * G, 0.15, f)
    n1, n2 = np.hypot(*u1.T), np.hypot(*u2.T)
    ok = (n1 > 0) & (n2 > 0)
    np.testing.assert_allclose(u1[ok] / n1[ok, None], u2[ok] / n2[ok, None], atol=1e-9)


def test_router_on_city(coarse_city, coarse_cfg):
    m, zones, fields = coarse_city
    router = E.Router(m, fields, coarse_cfg)
    r = router(np.zeros(m.n_nodes))
    assert np.all(r.psi > 0)
    speed = np.hypot(r.u_d[:, 0], r.u_d[:, 1])
    assert speed.max() <= coarse_cfg.traffic.U_max + 1e-9
    # rural travel cost is 1, so rural desired speeds stay tiny next to urban ones
    assert speed[fields.rural].max() <= 1.0 + 1e-12
    slow = dataclasses.replace(coarse_cfg.traffic, U_max=30.0)
    r30 = E.Router(m, fields, coarse_cfg.replace(traffic=slow))(np.zeros(m.n_nodes))
    assert np.hypot(*r30.u_d.T).max() <= 30.0 + 1e-9
