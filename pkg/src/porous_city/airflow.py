"""Incompressible porous-media air flow by pressure projection.

Each step: a tentative velocity without the pressure term (advection and
viscosity explicit, Darcy/Forchheimer drag implicit per node), a
pressure Poisson solve driven by the divergence of the tentative field
(P = 0 on the outlet, natural elsewhere), and a gradient correction.  The
inlet value and the wall slip condition are re-imposed after each sub-step.
P is a kinematic pressure internally; reported values are multiplied by ρ_a.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import fem
from .mesh import Mesh
from .scenario import ScenarioConfig, ScenarioFields


class NonFiniteState(ArithmeticError):
    pass


class SnapshotError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class WindState:
    t: float
    v: np.ndarray
    P: np.ndarray
    steps: int = 0
    converged: bool = False
    status: str = "running"


@dataclass
class WindDiagnostics:
    div_star: list = field(default_factory=list)
    div: list = field(default_factory=list)
    change: list = field(default_factory=list)
    wall_normal_max: float = 0.0
    inlet_error_max: float = 0.0


class AirflowModel:
    def __init__(self, mesh: Mesh, eps, K, cfg: ScenarioConfig, v_in=None):
        self.mesh, self.cfg = mesh, cfg
        a = cfg.air
        n = mesh.n_nodes
        self.eps = fem.scalar_coeff(mesh, eps)
        self.K = fem.scalar_coeff(mesh, K)
        self.rho_a = a.rho_a
        self.m1 = fem.lumped_mass(mesh, 1.0)
        self.K_visc = fem.assemble_stiffness(mesh, a.mu_a / self.eps)
        self.Cx = fem.assemble_convection(mesh, (1.0, 0.0))
        self.Cy = fem.assemble_convection(mesh, (0.0, 1.0))
        self.darcy = self.eps * a.mu_a / (a.rho_a * self.K)
        self.forch = self.eps * cfg.medium.C_F / np.sqrt(self.K)
        self.inlet_nodes = mesh.tag_nodes("inlet")
        v_in = a.v_in if v_in is None else v_in
        if callable(v_in):
            self.v_in_values = np.asarray(v_in(mesh.nodes[self.inlet_nodes]), dtype=np.float64).reshape(-1, 2)
        else:
            self.v_in_values = np.broadcast_to(np.asarray(v_in, dtype=np.float64), (len(self.inlet_nodes), 2)).copy()
        self.wall_nodes, self.wall_normals = mesh.node_normals("wall")
        # walls shared with the inlet keep the Dirichlet value
        keep = ~np.isin(self.wall_nodes, self.inlet_nodes)
        self.wall_nodes, self.wall_normals = self.wall_nodes[keep], self.wall_normals[keep]
        out = mesh.tag_nodes("outlet")
        self.p_fixed = out if len(out) else np.array([0], dtype=np.int64)
        self.p_free = np.ones(n, dtype=bool)
        self.p_free[self.p_fixed] = False
        self.W = self._correction_weights()
        self.Kp = self._pressure_operator()
        try:
            self._Kp_lu = fem.Factorized(self.Kp)
        except RuntimeError:
            # structured meshes can carry spurious pressure modes; the right-hand
            # side stays in the range, so a Krylov solve still converges
            self._Kp_lu = None
        self._p = np.zeros(n)

    def _correction_weights(self) -> np.ndarray:
        """Per-node 2x2 map applied to the gradient in the correction step:
        ε/m_i times the identity, the tangential projector on walls, zero on
        the inlet where the velocity is prescribed."""
        n = self.mesh.n_nodes
        W = np.zeros((n, 2, 2))
        W[:, 0, 0] = W[:, 1, 1] = 1.0
        nn = self.wall_normals
        W[self.wall_nodes] -= nn[:, :, None] * nn[:, None, :]
        W[self.inlet_nodes] = 0.0
        return W * (self.eps / self.m1)[:, None, None]

    def _pressure_operator(self) -> fem.SparseMatrix:
        """L = D W G with D = [Cx Cy] the weak divergence and G = [Cx; Cy]
        the weak gradient, so the corrected field has zero weak divergence on
        every row where p is not prescribed.  Prescribed rows become identity."""
        from scipy import sparse

        C = [self.Cx.to_scipy(), self.Cy.to_scipy()]
        L = None
        for d in range(2):
            for e in range(2):
                w = self.W[:, d, e]
                if not np.any(w):
                    continue
                term = C[d] @ sparse.diags(w) @ C[e]
                L = term if L is None else L + term
        # a node whose whole patch is inlet has an empty row: its pressure never
        # reaches the velocity, so it is pinned like the outlet
        dead = self.p_free & (L.diagonal() == 0.0)
        if dead.any():
            self.p_free[dead] = False
            self.p_fixed = np.flatnonzero(~self.p_free)
        free = sparse.diags(self.p_free.astype(np.float64))
        L = (free @ L @ free + sparse.diags((~self.p_free).astype(np.float64))).tocsr()
        L.sum_duplicates()
        L.sort_indices()
        return fem.SparseMatrix(L.indptr.astype(np.int64), L.indices.astype(np.int64), L.data.astype(np.float64))

    def weak_gradient(self, p: np.ndarray) -> np.ndarray:
        return np.column_stack([self.Cx.matvec(p), self.Cy.matvec(p)])

    # ---- sub-steps

    def impose(self, v: np.ndarray) -> np.ndarray:
        v = v.copy()
        if len(self.wall_nodes):
            n = self.wall_normals
            vn = np.einsum("kd,kd->k", v[self.wall_nodes], n)
            v[self.wall_nodes] -= vn[:, None] * n
        v[self.inlet_nodes] = self.v_in_values
        return v

    def tentative_velocity(self, v: np.ndarray, dt: float) -> np.ndarray:
        adv = (fem.assemble_convection(self.mesh, v) @ v) / (self.eps * self.m1)[:, None]
        visc = -(self.eps / self.rho_a)[:, None] * (self.K_visc @ v) / self.m1[:, None]
        speed = np.hypot(v[:, 0], v[:, 1])
        # drag is pointwise and taken implicitly (Forchheimer speed lagged)
        drag = 1.0 + dt * (self.darcy + self.forch * speed)
        vs = (v + dt * (-adv + visc)) / drag[:, None]
        if not np.all(np.isfinite(vs)):
            raise NonFiniteState("non-finite tentative velocity")
        return self.impose(vs)

    def pressure_rhs(self, v_star: np.ndarray, dt: float) -> np.ndarray:
        """(1/Δt) ∫ div(v*) λ_i."""
        return (self.Cx.matvec(v_star[:, 0]) + self.Cy.matvec(v_star[:, 1])) / dt

    def pressure_poisson(self, v_star: np.ndarray, dt: float) -> np.ndarray:
        """Kinematic pressure p with D W G p = D v*/Δt on free rows, p = 0 on the outlet."""
        b = self.pressure_rhs(v_star, dt)
        b[self.p_fixed] = 0.0
        if not np.any(b):
            self._p = np.zeros(self.mesh.n_nodes)
            return self._p.copy()
        if self._Kp_lu is not None:
            p = self._Kp_lu.solve(b)
        else:
            p = fem.solve(self.Kp, b, symmetric=False, rel_tol=1e-10, x0=self._p)
        self._p = p
        return p.copy()

    def correct_velocity(self, v_star: np.ndarray, p: np.ndarray, dt: float) -> np.ndarray:
        g = np.einsum("nde,ne->nd", self.W, self.weak_gradient(p))
        return self.impose(v_star - dt * g)

    def discrete_divergence(self, v: np.ndarray, free_only: bool = True) -> float:
        """L² norm of the lumped projection of the weak divergence ∫ div(v) λ_i,
        by default over the rows where the pressure is unknown."""
        d = self.Cx.matvec(v[:, 0]) + self.Cy.matvec(v[:, 1])
        if free_only:
            d = d[self.p_free]
            m = self.m1[self.p_free]
        else:
            m = self.m1
        return float(math.sqrt(math.fsum(d * d / m)))

    def stable_dt(self, speed: float) -> float:
        a = self.cfg.air
        h = self.mesh.h_min
        nu = a.mu_a / a.rho_a
        eps_min = float(np.min(self.eps))
        s = max(speed, 1e-12)
        bounds = [h / s, 2.0 * nu / (s * s) if nu > 0 else math.inf]
        if nu > 0:
            bounds.append(h * h * eps_min / (2.0 * nu))
        return a.cfl_safety * min(bounds)

    def step(self, v: np.ndarray, dt: float, diag: WindDiagnostics | None = None,
             p_prev: np.ndarray | None = None):
        """One projection step; returns (v^{n+1}, p^{n+1}).

        With ``p_prev`` the tentative velocity includes -Δt ε ∇p_prev and the
        Poisson solve yields the pressure increment.
        """
        vs = self.tentative_velocity(v, dt)
        if p_prev is not None:
            vs = self.impose(vs - dt * np.einsum("nde,ne->nd", self.W, self.weak_gradient(p_prev)))
        dp = self.pressure_poisson(vs, dt)
        vn = self.correct_velocity(vs, dp, dt)
        p = dp if p_prev is None else p_prev + dp
        if not np.all(np.isfinite(vn)):
            raise NonFiniteState("non-finite corrected velocity")
        if diag is not None:
            diag.div_star.append(self.discrete_divergence(vs))
            diag.div.append(self.discrete_divergence(vn))
            if len(self.wall_nodes):
                wn = np.abs(np.einsum("kd,kd->k", vn[self.wall_nodes], self.wall_normals)).max()
                diag.wall_normal_max = max(diag.wall_normal_max, float(wn))
            if len(self.inlet_nodes):
                diag.inlet_error_max = max(diag.inlet_error_max,
                                           float(np.abs(vn[self.inlet_nodes] - self.v_in_values).max()))
        return vn, p


def run_to_steady(mesh: Mesh, fields: ScenarioFields | None, cfg: ScenarioConfig, v_in=None,
                  eps=None, K=None, dt: float | None = None, max_steps: int | None = None,
                  steady_tol: float | None = None, diag: WindDiagnostics | None = None,
                  progress: Callable | None = None) -> WindState:
    """March from rest until max‖v^{n+1} - v^n‖/Δt < steady_tol."""
    eps = fields.eps if eps is None else eps
    K = fields.K if K is None else K
    model = AirflowModel(mesh, eps, K, cfg, v_in)
    a = cfg.air
    max_steps = a.max_steps if max_steps is None else max_steps
    tol = a.steady_tol if steady_tol is None else steady_tol
    vmax_in = float(np.max(np.hypot(model.v_in_values[:, 0], model.v_in_values[:, 1]))) if len(model.v_in_values) else 0.0
    n = mesh.n_nodes
    v = model.impose(np.zeros((n, 2)))
    p = np.zeros(n)
    t = 0.0
    fixed_dt = dt
    for k in range(1, max_steps + 1):
        speed = max(float(np.max(np.hypot(v[:, 0], v[:, 1]))), 2.0 * vmax_in, 1e-12)
        h = fixed_dt if fixed_dt is not None else model.stable_dt(speed)
        vn, p = model.step(v, h, diag, p if a.incremental else None)
        change = float(np.max(np.hypot(*(vn - v).T))) / h
        v, t = vn, t + h
        if diag is not None:
            diag.change.append(change)
        if progress is not None and k % 500 == 0:
            progress(k, t, change)
        if change < tol:
            return WindState(t, v, a.rho_a * p, k, True, "converged")
    return WindState(t, v, a.rho_a * p, max_steps, False, "max_steps")


# ---------------------------------------------------------------- snapshot cache

_MAGIC = b"PCWIND\x00\x01"
_VERSION = 1
_HEADER = struct.Struct("<8sI I 16s 16s d Q Q")


def wind_cache_key(mesh: Mesh, fields: ScenarioFields, cfg: ScenarioConfig) -> str:
    h = hashlib.sha256()
    h.update(mesh.identity.encode())
    h.update(np.ascontiguousarray(fields.eps, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(fields.K, dtype="<f8").tobytes())
    h.update(repr((cfg.air, cfg.medium.C_F)).encode())
    return h.hexdigest()[:16]


def write_wind_snapshot(path: str | Path, mesh: Mesh, state: WindState, key: str = "") -> None:
    """Layout (little endian): magic[8], version u32, flags u32 (bit 0 converged),
    mesh id [16], cache key [16], t f64, steps u64, node count u64, then
    2 x f64 velocity per node, then f64 pressure per node."""
    n = mesh.n_nodes
    head = _HEADER.pack(_MAGIC, _VERSION, int(state.converged), mesh.identity.encode()[:16].ljust(16, b"\0"),
                        key.encode()[:16].ljust(16, b"\0"), float(state.t), int(state.steps), n)
    body = np.ascontiguousarray(state.v, dtype="<f8").tobytes() + np.ascontiguousarray(state.P, dtype="<f8").tobytes()
    Path(path).write_bytes(head + body)


def read_wind_snapshot(path: str | Path, mesh: Mesh, key: str | None = None) -> WindState:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise SnapshotError("snapshot too short")
    magic, version, flags, mid, ckey, t, steps, n = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise SnapshotError("not a wind snapshot of a supported version")
    if mid.rstrip(b"\0").decode() != mesh.identity or n != mesh.n_nodes:
        raise SnapshotError("snapshot belongs to a different mesh")
    if key is not None and ckey.rstrip(b"\0").decode() != key:
        raise SnapshotError("snapshot was computed with different parameters")
    if len(raw) != _HEADER.size + 24 * n:
        raise SnapshotError("snapshot size does not match its node count")
    off = _HEADER.size
    v = np.frombuffer(raw, dtype="<f8", count=2 * n, offset=off).reshape(n, 2).astype(np.float64)
    P = np.frombuffer(raw, dtype="<f8", count=n, offset=off + 16 * n).astype(np.float64)
    converged = bool(flags & 1)
    return WindState(t, v, P, steps, converged, "converged" if converged else "max_steps")


def mean_speed(mesh: Mesh, v: np.ndarray, triangles=None) -> float:
    s = np.hypot(v[:, 0], v[:, 1])
    area = mesh.areas if triangles is None else mesh.areas[triangles]
    return fem.integrate(mesh, s, triangles) / float(area.sum())
