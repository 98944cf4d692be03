import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from porous_city import mesh as M, scenario as S, traffic as T

import oracles

OPEN = {"left": "outlet", "right": "outlet", "bottom": "outlet", "top": "outlet"}


def make_fields(m, eps=0.6, K=1e3, kappa=0.0, q=0.0):
    n = m.n_nodes
    full = lambda v: np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).copy()
    ones = np.ones(n, dtype=bool)
    eps = full(eps)
    return S.ScenarioFields(eps=eps, K=full(K), kappa=full(kappa), q=full(q), urban=ones,
                            rural=~ones, attraction=np.array([0.5, 0.5]), eta=0.1)


def tcfg(cfg, **kw):
    return cfg.replace(traffic=dataclasses.replace(cfg.traffic, **kw))


@pytest.fixture
def square():
    return M.rectangle_mesh(1, 1, 8, side_tags=OPEN)


def test_density_rhs_zero_without_terms(cfg, square):
    c = tcfg(cfg, nu=0.0)
    model = T.TrafficModel(square, make_fields(square), c)
    rho = np.random.default_rng(0).uniform(0, 100, square.n_nodes)
    assert np.all(model.density_rhs(rho, np.zeros((square.n_nodes, 2))) == 0)


def test_parking_decay_matches_exponential(cfg, square):
    kappa = 3.0
    model = T.TrafficModel(square, make_fields(square, kappa=kappa), cfg)
    errs = []
    for dt in (0.02, 0.01):
        st0 = T.TrafficState(0.0, np.full(square.n_nodes, 200.0), np.zeros((square.n_nodes, 2)))
        new, _ = model.step(st0, np.zeros((square.n_nodes, 2)), dt, check_cfl=False)
        np.testing.assert_allclose(new.rho, 200.0 * oracles.ssp_rk3_polynomial(-kappa * dt), rtol=1e-13)
        errs.append(abs(new.rho[0] - 200.0 * np.exp(-kappa * dt)))
    # local error of a third-order method is O(Δt⁴), well inside O(Δt³)
    assert errs[0] / errs[1] > 2 ** 3.5


def test_solid_phase_demand_budget(cfg, square):
    eps, q = 0.6, 50.0
    model = T.TrafficModel(square, make_fields(square, eps=eps, q=q), tcfg(cfg, nu=0.0))
    st0 = T.TrafficState(0.0, np.full(square.n_nodes, 10.0), np.zeros((square.n_nodes, 2)))
    dt = model.stable_dt(st0.u)
    new, rep = model.step(st0, np.zeros((square.n_nodes, 2)), dt)
    growth = model.mass(new.rho) - model.mass(st0.rho)
    assert growth == pytest.approx(dt * (1 - eps) * q * square.total_area, rel=1e-12)
    assert rep.budget_residual <= 1e-9


def test_momentum_rhs_cases(cfg, square):
    model = T.TrafficModel(square, make_fields(square, K=2.0), cfg)
    n = square.n_nodes
    ud = np.tile([3.0, -4.0], (n, 1))
    rho = np.full(n, 50.0)
    a0 = model.momentum_rhs(rho, np.zeros((n, 2)), ud)
    np.testing.assert_allclose(a0, ud / cfg.traffic.tau, rtol=1e-14)
    a1 = model.momentum_rhs(rho, ud.copy(), ud)
    eps, t = 0.6, cfg.traffic
    drag = eps * t.mu / (50.0 * 2.0) + eps * cfg.medium.C_F / np.sqrt(2.0) * 5.0
    np.testing.assert_allclose(a1, -drag * ud, rtol=1e-12, atol=1e-9)


def test_single_step_relaxation_hand_oracle(cfg, square):
    c = tcfg(cfg, mu=0.0, nu=0.0)
    c = c.replace(medium=dataclasses.replace(c.medium, C_F=0.0))
    model = T.TrafficModel(square, make_fields(square, K=1e12), c)
    n = square.n_nodes
    ud = np.tile([10.0, 5.0], (n, 1))
    dt = 1e-3
    st0 = T.TrafficState(0.0, np.full(n, 100.0), np.zeros((n, 2)))
    new, _ = model.step(st0, ud, dt, check_cfl=False)
    z = dt / cfg.traffic.tau
    np.testing.assert_allclose(new.u, ud * (1 - oracles.ssp_rk3_polynomial(-z)), rtol=1e-12)
    # the leading term is the forward-Euler value Δt u_d/τ
    np.testing.assert_allclose(new.u, dt * ud / cfg.traffic.tau, rtol=z)


def test_zero_state_is_fixed_point(cfg):
    m = M.rectangle_mesh(1, 1, 6)
    model = T.TrafficModel(m, make_fields(m, kappa=1.0), cfg)
    s = T.TrafficState(0.0, np.zeros(m.n_nodes), np.zeros((m.n_nodes, 2)))
    for _ in range(5):
        s, rep = model.step(s, np.zeros((m.n_nodes, 2)), model.stable_dt(s.u))
    assert np.all(s.rho == 0) and np.all(s.u == 0)


@pytest.mark.parametrize("lam", [-1.0, -7.5, 0.3])
def test_ssp_polynomial(lam):
    for dt in np.linspace(0.01, 0.5, 5):
        y1 = T.ssp_rk3(lambda y: lam * y, 1.0, dt)
        assert y1 == pytest.approx(oracles.ssp_rk3_polynomial(lam * dt), abs=1e-12)


def test_walls_enforced_every_step(cfg):
    m = M.rectangle_mesh(1, 1, 8)
    model = T.TrafficModel(m, make_fields(m, kappa=0.5), cfg)
    rng = np.random.default_rng(1)
    s = T.TrafficState(0.0, rng.uniform(10, 100, m.n_nodes), model.project_walls(rng.normal(0, 5, (m.n_nodes, 2))))
    ud = rng.normal(0, 20, (m.n_nodes, 2))
    for _ in range(10):
        s, rep = model.step(s, ud, model.stable_dt(s.u))
        assert rep.wall_normal_max <= 1e-10
        assert model.wall_normal_max(s.u) <= 1e-10


def test_mass_budget_with_sources_and_parking(cfg):
    m = M.rectangle_mesh(1, 1, 10, side_tags={"left": "inlet", "right": "outlet"})
    eps = 0.4 + 0.5 * m.nodes[:, 0]
    f = make_fields(m, eps=eps, kappa=2.0 * np.exp(-m.nodes[:, 1]), q=30.0)
    model = T.TrafficModel(m, f, cfg)
    rng = np.random.default_rng(2)
    s = T.TrafficState(0.0, rng.uniform(0, 500, m.n_nodes), np.zeros((m.n_nodes, 2)))
    ud = np.tile([20.0, 5.0], (m.n_nodes, 1))
    for _ in range(20):
        s, rep = model.step(s, ud, model.stable_dt(s.u))
        assert rep.budget_residual <= 1e-6 * (rep.mass_after + 1.0)


def test_cfl_violation(cfg, square):
    model = T.TrafficModel(square, make_fields(square), cfg)
    s = T.TrafficState(0.0, np.ones(square.n_nodes), np.zeros((square.n_nodes, 2)))
    with pytest.raises(T.CFLViolation):
        model.step(s, np.zeros((square.n_nodes, 2)), 10 * model.stable_dt(s.u, safety=1.0))
    with pytest.raises(ValueError):
        model.step(s, np.zeros((square.n_nodes, 2)), 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_density_nonnegative(seed):
    cfg = S.default_config()
    m = M.rectangle_mesh(1, 1, 6)
    rng = np.random.default_rng(seed)
    model = T.TrafficModel(m, make_fields(m, kappa=rng.uniform(0, 5)), cfg)
    rho = rng.uniform(0, 1000, m.n_nodes) * (rng.uniform(size=m.n_nodes) > 0.5)
    s = T.TrafficState(0.0, rho, model.project_walls(rng.normal(0, 30, (m.n_nodes, 2))))
    s, _ = model.step(s, rng.normal(0, 45, (m.n_nodes, 2)), model.stable_dt(s.u))
    assert np.all(s.rho >= 0) and np.all(np.isfinite(s.u))


def test_run_traffic_zero_horizon(coarse_city, coarse_cfg):
    m, zones, fields = coarse_city
    run = T.run_traffic(m, zones, fields, coarse_cfg.with_overrides(T=0))
    assert run.times == [0.0] and len(run.states) == 1 and run.steps == 0


def test_run_traffic_invariants_and_determinism(coarse_city, coarse_cfg):
    m, zones, fields = coarse_city
    a = T.run_traffic(m, zones, fields, coarse_cfg)
    b = T.run_traffic(m, zones, fields, coarse_cfg)
    assert a.states[-1].rho.tobytes() == b.states[-1].rho.tobytes()
    assert a.states[-1].u.tobytes() == b.states[-1].u.tobytes()
    assert a.max_budget_residual <= 1e-6
    assert a.max_wall_normal <= 1e-10
    assert a.max_speed_ratio <= 1.05
    assert np.all(np.diff(a.totals) <= 1e-9 * a.totals[0])
    assert a.times[-1] == pytest.approx(coarse_cfg.run.T)
