"""Nonconservative macroscopic traffic model on a porous city.

Density and velocity are advanced together with the three-stage SSP
Runge-Kutta scheme (Shu-Osher form).  Spatial terms use P1 Galerkin
operators with lumped mass; the wall slip condition is imposed by
projecting nodal velocities after every stage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import fem
from .eikonal import Router, RoutingField
from .mesh import Mesh, ZoneMap
from .scenario import ScenarioConfig, ScenarioFields, initial_density


class CFLViolation(ValueError):
    pass


class NonFiniteState(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class TrafficState:
    t: float
    rho: np.ndarray
    u: np.ndarray


def ssp_rk3(rhs: Callable, y, dt: float, post: Callable | None = None):
    """One step of SSP-RK3 as convex combinations of forward-Euler stages.

    ``post(stage, y)`` is applied after each stage (limiting/projection) and
    must return the corrected value.
    """
    post = post or (lambda k, v: v)
    y1 = post(1, y + dt * rhs(y))
    y2 = post(2, 0.75 * y + 0.25 * (y1 + dt * rhs(y1)))
    return post(3, y / 3.0 + (2.0 / 3.0) * (y2 + dt * rhs(y2)))


# RK weights of the three stage evaluations, and of a clamp applied after each stage
RK_WEIGHTS = (1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0)
CLAMP_WEIGHTS = (1.0 / 6.0, 2.0 / 3.0, 1.0)


@dataclass
class StepReport:
    dt: float
    mass_before: float
    mass_after: float
    source: float  # Δt-weighted ∫(1-ε)q
    parking: float  # Δt-weighted ∫εκρ
    outflow: float  # Δt-weighted boundary convective flux
    clamp_mass: float
    clamped_nodes: int
    wall_normal_max: float

    @property
    def budget_residual(self) -> float:
        expected = self.source - self.parking - self.outflow + self.clamp_mass
        return abs((self.mass_after - self.mass_before) - expected)


class TrafficModel:
    """Precomputed operators and right-hand sides of the traffic system."""

    def __init__(self, mesh: Mesh, fields: ScenarioFields, cfg: ScenarioConfig):
        self.mesh, self.fields, self.cfg = mesh, fields, cfg
        t = cfg.traffic
        eps = fields.eps
        self.eps = eps
        self.m1 = fem.lumped_mass(mesh, 1.0)
        self.m_eps = fem.lumped_mass(mesh, eps)
        self.Cx = fem.assemble_convection(mesh, (1.0, 0.0))
        self.Cy = fem.assemble_convection(mesh, (0.0, 1.0))
        self.K_rho = fem.assemble_stiffness(mesh, eps * t.nu)
        self.K_u = fem.assemble_stiffness(mesh, t.mu / eps)
        self.source = self.m1 * (1.0 - eps) * fields.q
        self.react = self.m1 * eps * fields.kappa
        self.darcy = eps * t.mu / fields.K  # divided by ρ at evaluation
        self.forch = eps * cfg.medium.C_F / np.sqrt(fields.K)
        self.wall_nodes, self.wall_normals = mesh.node_normals("wall")
        self.c2 = cfg.c2

        pat = mesh.pattern
        n = mesh.n_nodes
        rows = self.Cx.row_ids()
        keys = rows * n + pat.indices
        self._rows = rows
        self._offdiag = rows != pat.indices
        self._transpose = np.searchsorted(keys, pat.indices * n + rows)

    # ---- pieces of the right-hand side

    def transport_operator(self, u: np.ndarray) -> fem.SparseMatrix:
        """L = -(convection + diffusion) plus discrete upwinding.

        The added artificial diffusion d_ij = max(-l_ij, 0, -l_ji) is
        symmetric with zero row sums, so it conserves mass while making
        every off-diagonal entry of L non-negative.
        """
        k = -(self.Cx.data * u[self.Cx.indices, 0] + self.Cy.data * u[self.Cy.indices, 1]) - self.K_rho.data
        kt = k[self._transpose]
        d = np.where(self._offdiag, np.maximum(np.maximum(-k, -kt), 0.0), 0.0)
        dsum = fem.kernels.scatter_add(self._rows, d, self.mesh.n_nodes)
        data = k + d
        data[self.mesh.pattern.diag_slots] -= dsum
        return fem.SparseMatrix(self.Cx.indptr, self.Cx.indices, data)

    def density_terms(self, rho: np.ndarray, u: np.ndarray):
        """Nodal (source, transport, reaction) load vectors; transport = -Lρ."""
        L = self.transport_operator(u)
        return self.source, -L.matvec(rho), self.react * rho

    def density_rhs(self, rho: np.ndarray, u: np.ndarray) -> np.ndarray:
        src, trans, reac = self.density_terms(rho, u)
        return (src - trans - reac) / self.m_eps

    def divergence(self, u: np.ndarray) -> np.ndarray:
        return (self.Cx.matvec(u[:, 0]) + self.Cy.matvec(u[:, 1])) / self.m1

    def momentum_rhs(self, rho: np.ndarray, u: np.ndarray, u_d: np.ndarray) -> np.ndarray:
        """Acceleration a of the vehicles (excluding the transport term)."""
        t = self.cfg.traffic
        rf = np.maximum(rho, t.rho_floor)
        a = (u_d - u) / t.tau
        if t.pressure_term:
            a = a + (self.c2 * rho * self.divergence(u))[:, None]  # same scalar on both components
        visc = -(self.K_u @ u) / self.m1[:, None]
        a = a + (self.eps / rf)[:, None] * visc
        speed = np.hypot(u[:, 0], u[:, 1])
        a = a - ((self.darcy / rf) + self.forch * speed)[:, None] * u
        return a

    def advection(self, u: np.ndarray) -> np.ndarray:
        C = fem.assemble_convection(self.mesh, u)
        return (C @ u) / (self.eps * self.m1)[:, None]

    def velocity_rhs(self, rho, u, u_d):
        return self.momentum_rhs(rho, u, u_d) - self.advection(u)

    # ---- constraints

    def project_walls(self, u: np.ndarray) -> np.ndarray:
        if len(self.wall_nodes) == 0:
            return u
        u = u.copy()
        n = self.wall_normals
        un = np.einsum("kd,kd->k", u[self.wall_nodes], n)
        u[self.wall_nodes] -= un[:, None] * n
        return u

    def wall_normal_max(self, u: np.ndarray) -> float:
        if len(self.wall_nodes) == 0:
            return 0.0
        return float(np.max(np.abs(np.einsum("kd,kd->k", u[self.wall_nodes], self.wall_normals))))

    def mass(self, rho: np.ndarray) -> float:
        return float(self.m_eps @ rho)

    def stable_dt(self, u: np.ndarray, safety: float | None = None) -> float:
        t = self.cfg.traffic
        safety = t.cfl_safety if safety is None else safety
        h = self.mesh.h_min
        speed = float(np.max(np.hypot(u[:, 0], u[:, 1]))) if len(u) else 0.0
        c = math.sqrt(self.c2)
        adv = h / (speed + c + t.U_max)
        dmax = max(t.nu, t.mu)
        dif = h * h * float(np.min(self.eps)) / (2.0 * dmax) if dmax > 0 else math.inf
        rate = 1.0 / t.tau + float(np.max(self.darcy / t.rho_floor + self.forch * max(speed, t.U_max)))
        rea = 2.5 / rate
        # forward-Euler positivity of the upwinded density update
        L = self.transport_operator(u)
        pos_rate = np.maximum(-L.data[self.mesh.pattern.diag_slots], 0.0) + self.react
        pos = float(np.min(self.m_eps / np.maximum(pos_rate, 1e-300)))
        return safety * min(adv, dif, rea, pos)

    # ---- time stepping

    def step(self, state: TrafficState, u_d: np.ndarray, dt: float, check_cfl: bool = True):
        """One SSP-RK3 step; returns (new_state, StepReport)."""
        if dt <= 0:
            raise ValueError("time step must be positive")
        if check_cfl:
            limit = self.stable_dt(state.u, safety=1.0)
            if dt > limit * (1.0 + 1e-12):
                raise CFLViolation(f"dt = {dt:.4e} h exceeds the stability limit {limit:.4e} h")
        n = self.mesh.n_nodes
        sums = []
        clamps = [0.0, 0.0, 0.0]
        clamped = np.zeros(n, dtype=bool)

        def rhs(y):
            rho, u = y[:, 0], y[:, 1:]
            src, trans, reac = self.density_terms(rho, u)
            sums.append((math.fsum(src), math.fsum(reac), math.fsum(trans)))
            out = np.empty_like(y)
            out[:, 0] = (src - trans - reac) / self.m_eps
            out[:, 1:] = self.velocity_rhs(rho, u, u_d)
            return out

        def post(k, y):
            neg = y[:, 0] < 0.0
            if neg.any():
                clamps[k - 1] = -float(self.m_eps[neg] @ y[neg, 0])
                clamped[neg] = True
                y[neg, 0] = 0.0
            y[:, 1:] = self.project_walls(y[:, 1:])
            return y

        y0 = np.column_stack([state.rho, state.u])
        y = ssp_rk3(rhs, y0, dt, post)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(f"non-finite traffic state at t = {state.t + dt:.4f} h")
        new = TrafficState(state.t + dt, np.ascontiguousarray(y[:, 0]), np.ascontiguousarray(y[:, 1:]))
        w = RK_WEIGHTS
        rep = StepReport(
            dt=dt, mass_before=self.mass(state.rho), mass_after=self.mass(new.rho),
            source=dt * sum(wk * s[0] for wk, s in zip(w, sums)),
            parking=dt * sum(wk * s[1] for wk, s in zip(w, sums)),
            outflow=dt * sum(wk * s[2] for wk, s in zip(w, sums)),
            clamp_mass=sum(cw * c for cw, c in zip(CLAMP_WEIGHTS, clamps)),
            clamped_nodes=int(clamped.sum()), wall_normal_max=self.wall_normal_max(new.u))
        return new, rep


@dataclass
class TrafficRun:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    desired: list = field(default_factory=list)
    accel: list = field(default_factory=list)
    step_times: list = field(default_factory=list)
    totals: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    steps: int = 0
    clamp_events: int = 0
    n_nodes: int = 0
    routing_solves: int = 0
    evacuation_time: float | None = None
    stopped_early: bool = False
    max_speed_ratio: float = 0.0

    @property
    def clamp_fraction(self) -> float:
        return self.clamp_events / max(1, self.steps * self.n_nodes)

    @property
    def max_budget_residual(self) -> float:
        return max((r.budget_residual / (r.mass_after + 1.0) for r in self.reports), default=0.0)

    @property
    def max_wall_normal(self) -> float:
        return max((r.wall_normal_max for r in self.reports), default=0.0)


def _output_times(T: float, every: float) -> np.ndarray:
    n = int(math.floor(T / every + 1e-9))
    ts = every * np.arange(n + 1)
    if T - ts[-1] > 1e-9 * max(T, 1.0):
        ts = np.append(ts, T)
    return ts


def run_traffic(mesh: Mesh, zones: ZoneMap, fields: ScenarioFields, cfg: ScenarioConfig,
                progress: Callable | None = None) -> TrafficRun:
    model = TrafficModel(mesh, fields, cfg)
    router = Router(mesh, fields, cfg)
    rho0 = initial_density(mesh, zones, cfg)
    state = TrafficState(0.0, rho0, np.zeros((mesh.n_nodes, 2)))
    run = TrafficRun(n_nodes=mesh.n_nodes)
    T = cfg.run.T
    outs = _output_times(T, cfg.run.output_every) if T > 0 else np.array([0.0])
    m0 = model.mass(rho0)
    evac_level = cfg.run.evacuation_fraction * m0
    routing: RoutingField = router(state.rho)

    def record(s: TrafficState, r: RoutingField):
        run.times.append(s.t)
        run.states.append(s)
        run.desired.append(r.u_d)
        run.accel.append(model.momentum_rhs(s.rho, s.u, r.u_d))

    record(state, routing)
    run.step_times.append(0.0)
    run.totals.append(m0)
    k_out = 1
    ud_max = max(float(np.max(np.hypot(routing.u_d[:, 0], routing.u_d[:, 1]))), 1e-300)
    while k_out < len(outs):
        if run.steps > 0 and run.steps % cfg.routing.refresh_every == 0:
            routing = router(state.rho)
            ud_max = max(ud_max, float(np.max(np.hypot(routing.u_d[:, 0], routing.u_d[:, 1]))))
        dt = model.stable_dt(state.u)
        target = outs[k_out]
        if state.t + dt >= target - 1e-12 * max(1.0, target):
            dt = target - state.t
        prev = run.totals[-1]
        state, rep = model.step(state, routing.u_d, dt)
        if abs(state.t - target) <= 1e-12 * max(1.0, target):
            state = TrafficState(float(target), state.rho, state.u)
        run.steps += 1
        run.reports.append(rep)
        run.clamp_events += rep.clamped_nodes
        run.step_times.append(state.t)
        run.totals.append(rep.mass_after)
        speed = float(np.max(np.hypot(state.u[:, 0], state.u[:, 1])))
        run.max_speed_ratio = max(run.max_speed_ratio, speed / ud_max)
        if run.evacuation_time is None and rep.mass_after <= evac_level < prev:
            s = (prev - evac_level) / (prev - rep.mass_after)
            run.evacuation_time = state.t - dt + s * dt
        if state.t >= target - 1e-12 * max(1.0, target):
            record(state, routing)
            k_out += 1
            if progress is not None:
                progress(state.t, rep.mass_after)
        if rep.mass_after < cfg.run.vehicle_epsilon:
            if run.times[-1] != state.t:
                record(state, routing)
            run.stopped_early = True
            break
    run.routing_solves = router.solves
    return run
