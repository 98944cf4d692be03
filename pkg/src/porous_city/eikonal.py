"""Travel cost, linearized eikonal routing and desired speed.

The potential φ solves ‖∇φ‖ = 1/f approximately through ψ = exp(-φ/η),
which satisfies the screened Poisson problem η²Δψ - ψ/f² = G with natural
boundary conditions.  Drivers follow u_d = -f ∇φ/‖∇φ‖.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .mesh import Mesh
from .scenario import ScenarioConfig, ScenarioFields

PSI_MIN = 1e-300


class AllZeroPsi(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class RoutingField:
    f: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    u_d: np.ndarray
    iterations: int = 0


def travel_cost(rho: np.ndarray, urban: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """f = U_max(1 - 1_u ρ/ρ_max - 1_r) + 1_r, floored at f_min on urban nodes."""
    t = cfg.traffic
    u = np.asarray(urban, dtype=bool)
    ind_u = u.astype(np.float64)
    ind_r = 1.0 - ind_u
    f = t.U_max * (1.0 - ind_u * np.asarray(rho) / t.rho_max - ind_r) + ind_r
    f_min = cfg.routing.f_min_fraction * t.U_max
    return np.where(u, np.maximum(f, f_min), f)


def attraction_source(mesh: Mesh, center, g0: float, spread: float) -> np.ndarray:
    """G = -g0 exp(-‖x - x_c‖²/(2 s²)); negative so that ψ > 0."""
    d2 = (mesh.nodes[:, 0] - center[0]) ** 2 + (mesh.nodes[:, 1] - center[1]) ** 2
    return -g0 * np.exp(-d2 / (2.0 * spread ** 2))


def solve_screened_poisson(mesh: Mesh, f: np.ndarray, G: np.ndarray, eta: float,
                           stiffness: fem.SparseMatrix | None = None, x0=None,
                           rel_tol: float = 1e-13, return_info: bool = False):
    """P1 solution of η²∫∇ψ·∇v + ∫ψv/f² = -∫Gv (mass terms lumped)."""
    K = fem.assemble_stiffness(mesh, 1.0) if stiffness is None else stiffness
    area = fem.node_area(mesh) / 3.0
    A = K * (eta * eta)
    A.data[mesh.pattern.diag_slots] += area / np.asarray(f, dtype=np.float64) ** 2
    b = -area * np.asarray(G, dtype=np.float64)
    try:
        psi, info = fem.solve(A, b, symmetric=True, rel_tol=rel_tol, x0=x0, return_info=True)
    except fem.SolverFailure as exc:
        # large η/h stalls Jacobi-CG at its round-off floor; fall back to LU
        psi = fem.Factorized(A).solve(b)
        r = b - A.matvec(psi)
        info = fem.SolveInfo(exc.iterations, float(np.linalg.norm(r) / max(np.linalg.norm(b), 1e-300)))
    return (psi, info) if return_info else psi


def recover_potential(psi: np.ndarray, eta: float) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64)
    if not np.any(psi > PSI_MIN):
        raise AllZeroPsi("ψ vanishes everywhere; the attraction source is zero")
    return -eta * np.log(np.maximum(psi, PSI_MIN))


def desired_speed(f: np.ndarray, phi: np.ndarray, mesh: Mesh, grad_eps: float = 1e-8) -> np.ndarray:
    g = fem.recovered_gradient(mesh, phi)
    norm = np.hypot(g[:, 0], g[:, 1])
    ud = np.zeros_like(g)
    ok = norm > grad_eps
    ud[ok] = -(np.asarray(f)[ok] / norm[ok])[:, None] * g[ok]
    return ud


class Router:
    """Repeated routing on one mesh; caches the stiffness matrix and source."""

    def __init__(self, mesh: Mesh, fields: ScenarioFields, cfg: ScenarioConfig):
        self.mesh, self.fields, self.cfg = mesh, fields, cfg
        self.K = fem.assemble_stiffness(mesh, 1.0)
        self.G = attraction_source(mesh, fields.attraction, cfg.routing.g0, cfg.routing.s_G)
        self._psi = None
        self.solves = 0

    def __call__(self, rho: np.ndarray) -> RoutingField:
        f = travel_cost(rho, self.fields.urban, self.cfg)
        psi, info = solve_screened_poisson(self.mesh, f, self.G, self.fields.eta, self.K,
                                           x0=self._psi, return_info=True)
        self._psi = psi
        self.solves += 1
        phi = recover_potential(psi, self.fields.eta)
        ud = desired_speed(f, phi, self.mesh, self.cfg.routing.grad_eps)
        return RoutingField(f, np.maximum(psi, PSI_MIN), phi, ud, info.iterations)
