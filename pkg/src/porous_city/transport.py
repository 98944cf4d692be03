"""Pollutant transport: GLS-stabilized P1 with backward Euler in time.

Per step the linear system

    (M/Δt + C + R - B_in + M_σ + SL) φ^{n+1} = M φ^n / Δt + f + sl

is solved, with M the ε-weighted mass, C convection, R the εμ_φ stiffness,
B_in the inlet flux, M_σ the εσ mass, and SL/sl the streamline residual
terms weighted by ζ_K = min(h_K / (2‖v‖_K), Δt).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import fem
from .fem import scalar_coeff
from .mesh import Mesh, ZoneMap
from .scenario import ScenarioConfig


@dataclass(frozen=True, eq=False)
class TransportState:
    t: float
    phi: np.ndarray
    iterations: int = 0
    residual: float = 0.0


def _velocity(mesh: Mesh, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = np.broadcast_to(v, (mesh.n_nodes, 2)).copy()
    return v


def stabilization_parameter(mesh: Mesh, v: np.ndarray, dt: float | None, diffusivity=None) -> np.ndarray:
    """ζ_K = h_K/(2‖v‖_K + 1e-12), blended with the diffusive limit h_K²/(4 d_K)
    as 1/ζ² = 1/ζ_adv² + 1/ζ_diff², then capped at Δt.

    The P1 residual has no second-derivative part, so an O(h) ζ would cap the
    method at first order on diffusion-dominated elements; the blend keeps it
    O(h²) there and unchanged where advection dominates.
    """
    v = _velocity(mesh, v)
    vK = v[mesh.triangles].mean(axis=1)
    h = mesh.element_diameter
    zeta = h / (2.0 * np.hypot(vK[:, 0], vK[:, 1]) + 1e-12)
    if diffusivity is not None:
        dK = scalar_coeff(mesh, diffusivity)[mesh.triangles].mean(axis=1)
        zd = np.full_like(zeta, np.inf)
        pos = dK > 0
        zd[pos] = h[pos] ** 2 / (4.0 * dK[pos])
        zeta = 1.0 / np.sqrt(zeta ** -2 + zd ** -2)
    if dt is not None:
        zeta = np.minimum(zeta, dt)
    return zeta


@dataclass(eq=False)
class GlsOperator:
    matrix: fem.SparseMatrix
    mass: fem.SparseMatrix | None  # ε-weighted mass (None for steady problems)
    zeta: np.ndarray
    vgrad: np.ndarray  # (n_t, 3): v_K·∇λ_i per element
    dt: float | None


def assemble_gls_operator(mesh: Mesh, v, eps, mu_phi: float, sigma: float, dt: float | None,
                          stabilization: bool = True, inlet_flux: bool = True) -> GlsOperator:
    """Left-hand side of the transport system; ``dt=None`` drops the time term."""
    v = _velocity(mesh, v)
    eps = fem.scalar_coeff(mesh, eps)
    A = fem.assemble_convection(mesh, v) + fem.assemble_stiffness(mesh, eps * mu_phi)
    if inlet_flux:
        A = A - fem.assemble_boundary_flux(mesh, v, "inlet")
    if sigma:
        A = A + fem.assemble_mass(mesh, eps * sigma)
    M = None
    if dt is not None:
        M = fem.assemble_mass(mesh, eps)
        A = A + M * (1.0 / dt)
    vK = v[mesh.triangles].mean(axis=1)
    vgrad = np.einsum("td,tad->ta", vK, mesh.grads)
    if stabilization:
        zeta = stabilization_parameter(mesh, v, dt, eps * mu_phi)
    else:
        zeta = np.zeros(mesh.n_triangles)
    if stabilization:
        epsK = eps[mesh.triangles].mean(axis=1)
        w = (zeta * mesh.areas)[:, None, None]
        # (v·∇λ_j + εσλ_j, ζ v·∇λ_i)_K with λ_j integrated to |K|/3
        sl = w * (vgrad[:, :, None] * vgrad[:, None, :]
                  + (epsK * sigma / 3.0)[:, None, None] * vgrad[:, :, None])
        A = A + fem._matrix(mesh, sl)
    return GlsOperator(A, M, zeta, vgrad, dt)


def gls_rhs(mesh: Mesh, op: GlsOperator, phi_n, EC) -> np.ndarray:
    """M φ^n/Δt + ∫ EC λ_i + Σ_K ζ_K ∫_K EC v·∇λ_i."""
    EC = fem.scalar_coeff(mesh, EC)
    b = fem.load_vector(mesh, EC)
    if np.any(op.zeta):
        ecK = EC[mesh.triangles].mean(axis=1)
        b = b + fem.scatter_elements(mesh, (op.zeta * mesh.areas * ecK)[:, None] * op.vgrad)
    if op.mass is not None and phi_n is not None:
        b = b + op.mass.matvec(phi_n) / op.dt
    return b


def assemble_gls_step(mesh: Mesh, v, eps, cfg: ScenarioConfig, dt: float, phi_n, EC):
    """Matrix and right-hand side of one backward-Euler transport step."""
    tc = cfg.transport
    op = assemble_gls_operator(mesh, v, eps, tc.mu_phi, tc.sigma, dt, tc.stabilization)
    return op.matrix, gls_rhs(mesh, op, phi_n, EC)


def step_transport(state: TransportState, system, dt: float, rel_tol: float = 1e-8) -> TransportState:
    A, b = system
    phi, info = fem.solve(A, b, symmetric=False, rel_tol=rel_tol, x0=state.phi, return_info=True)
    return TransportState(state.t + dt, phi, info.iterations, info.residual)


def solve_steady(mesh: Mesh, v, eps, mu_phi: float, sigma: float, source, dirichlet_nodes=None,
                 dirichlet_values=0.0, stabilization: bool = True, rel_tol: float = 1e-12) -> np.ndarray:
    """Steady GLS solution with nodal source and optional Dirichlet nodes."""
    op = assemble_gls_operator(mesh, v, eps, mu_phi, sigma, None, stabilization, inlet_flux=False)
    b = gls_rhs(mesh, op, None, source)
    A = op.matrix
    if dirichlet_nodes is not None and len(dirichlet_nodes):
        A, b = fem.apply_dirichlet(A, b, dirichlet_nodes, dirichlet_values)
    return fem.solve(A, b, symmetric=False, rel_tol=rel_tol)


def interpolate_series(times: np.ndarray, values: Sequence[np.ndarray], t: float) -> np.ndarray:
    """Piecewise-linear interpolation in time, held constant outside the range."""
    times = np.asarray(times, dtype=np.float64)
    if t <= times[0]:
        return values[0]
    if t >= times[-1]:
        return values[-1]
    k = int(np.searchsorted(times, t, side="right")) - 1
    s = (t - times[k]) / (times[k + 1] - times[k])
    return (1.0 - s) * values[k] + s * values[k + 1]


@dataclass
class TransportRun:
    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    step_times: list = field(default_factory=list)
    zone_means: dict = field(default_factory=dict)
    iterations: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    min_ratio: float = 0.0  # min φ / max φ over the run (undershoot monitor)
    assemblies: int = 0


def _step_times(T: float, dt: float) -> np.ndarray:
    n = int(math.ceil(T / dt - 1e-9))
    ts = dt * np.arange(n + 1)
    ts[-1] = T
    return ts


def run_transport(mesh: Mesh, zones: ZoneMap, wind_v: np.ndarray, ec_times, ec_fields,
                  eps, cfg: ScenarioConfig, progress: Callable | None = None) -> TransportRun:
    from .diagnostics import spatial_mean

    tc = cfg.transport
    T = cfg.run.T
    run = TransportRun()
    names = zones.names + ["city"]
    groups = [z.triangles for z in zones.zones] + [zones.city.triangles]
    for nm in names:
        run.zone_means[nm] = []

    def record_means(t, phi):
        run.step_times.append(t)
        for nm, tris in zip(names, groups):
            run.zone_means[nm].append(spatial_mean(mesh, phi, tris) if len(tris) else 0.0)

    phi = np.full(mesh.n_nodes, tc.phi0, dtype=np.float64)
    state = TransportState(0.0, phi)
    record_means(0.0, phi)
    run.times.append(0.0)
    run.snapshots.append(phi)
    if T <= 0:
        return run
    ts = _step_times(T, tc.dt)
    every = cfg.run.output_every
    op = None
    last_dt = None
    peak = 0.0
    min_phi = 0.0
    for k in range(1, len(ts)):
        dt = float(ts[k] - ts[k - 1])
        if abs(dt - tc.dt) <= 1e-9 * tc.dt:
            dt = tc.dt  # grid round-off would otherwise force a reassembly
        if op is None or tc.reassemble or dt != last_dt:
            op = assemble_gls_operator(mesh, wind_v, eps, tc.mu_phi, tc.sigma, dt, tc.stabilization)
            run.assemblies += 1
            last_dt = dt
        ec = interpolate_series(ec_times, ec_fields, float(ts[k]))
        b = gls_rhs(mesh, op, state.phi, ec)
        new = step_transport(state, (op.matrix, b), dt, tc.rel_tol)
        state = TransportState(float(ts[k]), new.phi, new.iterations, new.residual)
        run.iterations.append(state.iterations)
        run.residuals.append(state.residual)
        peak = max(peak, float(state.phi.max()))
        min_phi = min(min_phi, float(state.phi.min()))
        record_means(state.t, state.phi)
        if abs(state.t / every - round(state.t / every)) < 1e-9 or k == len(ts) - 1:
            run.times.append(state.t)
            run.snapshots.append(state.phi)
            if progress is not None:
                progress(state.t)
    run.min_ratio = min_phi / peak if peak > 0 else 0.0
    return run
