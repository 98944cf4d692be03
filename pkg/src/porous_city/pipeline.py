"""End-to-end scenario: mesh, fields, traffic, emissions, wind, transport, output.

Stages run in that fixed order.  The steady wind depends only on the mesh,
porosity, permeability and air parameters, so it is cached on disk and
replayed bit-exactly.
"""
from __future__ import annotations

import json
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, airflow, diagnostics, emissions, scenario, traffic, transport
from .scenario import ScenarioConfig

STAGES = ("mesh", "fields", "traffic", "emissions", "wind", "transport", "output")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ScenarioResult:
    cfg: ScenarioConfig
    label: str
    mesh: object = None
    zones: object = None
    fields: object = None
    traffic: traffic.TrafficRun | None = None
    ec_times: np.ndarray | None = None
    ec_fields: list = field(default_factory=list)
    wind: airflow.WindState | None = None
    wind_cached: bool = False
    wind_diagnostics: airflow.WindDiagnostics | None = None  # None when the wind came from the cache
    transport: transport.TransportRun | None = None
    averages: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @property
    def urban_wind_speed(self) -> float:
        return airflow.mean_speed(self.mesh, self.wind.v, self.zones.city.triangles)


def default_label(cfg: ScenarioConfig) -> str:
    if cfg.run.label:
        return cfg.run.label
    lab = cfg.run.city_kind
    if cfg.traffic.U_max != scenario.TrafficConfig().U_max:
        lab += f"-U{cfg.traffic.U_max:g}"
    return lab


def effective_threads(cfg: ScenarioConfig) -> int:
    env = os.environ.get("POROUS_CITY_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise scenario.ConfigError("POROUS_CITY_THREADS", f"not an integer: {env!r}") from None
        if n < 1:
            raise scenario.ConfigError("POROUS_CITY_THREADS", "must be >= 1")
        return n
    return cfg.run.threads


def summary_zones(zones) -> list[tuple[str, np.ndarray]]:
    """Zones reported in the summary table: the whole urban area, then the
    selected zones in declaration order."""
    out = [("urban", zones.city.triangles)]
    out += [(zones.zones[i].name, zones.zones[i].triangles) for i in zones.selected]
    return out


def compute_wind(mesh, fields, cfg: ScenarioConfig, cache_dir: Path | None, progress=None,
                 diag: airflow.WindDiagnostics | None = None):
    """Steady wind, read from / written to ``cache_dir`` when given."""
    key = airflow.wind_cache_key(mesh, fields, cfg)
    path = cache_dir / f"wind_{key}.bin" if cache_dir is not None else None
    if path is not None and path.exists():
        try:
            return airflow.read_wind_snapshot(path, mesh, key), True
        except airflow.SnapshotError:
            pass
    state = airflow.run_to_steady(mesh, fields, cfg, diag=diag, progress=progress)
    if path is not None and state.converged:
        path.parent.mkdir(parents=True, exist_ok=True)
        airflow.write_wind_snapshot(path, mesh, state, key)
    return state, False


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path | None = None, label: str | None = None,
                 wind_cache: Path | str | None | bool = True, write: bool = True,
                 log: Callable[[str], None] | None = None) -> ScenarioResult:
    """Run every stage; outputs go to ``out_dir`` (default ``cfg.output.dir``).

    ``wind_cache`` may be a directory, True (``<out_dir>/cache``) or
    False/None to always recompute.
    """
    label = label or default_label(cfg)
    out = Path(out_dir if out_dir is not None else cfg.output.dir)
    if wind_cache is True:
        cache = out / "cache" if cfg.output.wind_cache else None
    elif wind_cache:
        cache = Path(wind_cache)
    else:
        cache = None
    res = ScenarioResult(cfg, label)
    say = log or (lambda s: None)

    def stage(name, fn):
        t0 = time.perf_counter()
        say(f"[{label}] {name} ...")
        try:
            r = fn()
        except (scenario.ConfigError, StageError):
            raise
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            raise StageError(name, exc) from exc
        res.timings[name] = time.perf_counter() - t0
        return r

    res.mesh, res.zones = stage("mesh", lambda: scenario.load_mesh(cfg))
    res.fields = stage("fields", lambda: scenario.build_fields(res.mesh, res.zones, cfg))
    res.traffic = stage("traffic", lambda: traffic.run_traffic(res.mesh, res.zones, res.fields, cfg))
    if any(not np.all(np.isfinite(s.rho)) for s in res.traffic.states):
        raise StageError("traffic", ArithmeticError("non-finite density"))

    def emit():
        return emissions.emission_series(res.traffic, cfg.emissions.coefficients, cfg.emissions.u_eps)

    res.ec_times, ems = stage("emissions", emit)
    res.ec_fields = [e.EC for e in ems]

    if cfg.run.T > 0:
        def wind():
            diag = airflow.WindDiagnostics()
            w, cached = compute_wind(res.mesh, res.fields, cfg, cache, diag=diag)
            res.wind_diagnostics = None if cached else diag
            if not w.converged:
                raise ArithmeticError(f"wind did not reach steady state in {w.steps} steps")
            return w, cached
        res.wind, res.wind_cached = stage("wind", wind)
        v = res.wind.v
    else:
        v = np.zeros((res.mesh.n_nodes, 2))

    res.transport = stage("transport", lambda: transport.run_transport(
        res.mesh, res.zones, v, res.ec_times, res.ec_fields, res.fields.eps, cfg))
    tr = res.transport
    if len(tr.step_times) >= 2:
        times = np.asarray(tr.step_times)
        for name, tris in summary_zones(res.zones):
            means = tr.zone_means["city" if name == "urban" else name]
            res.averages[name] = diagnostics.time_mean(times, means)
    if write:
        stage("output", lambda: _write_outputs(res, out))
        res.manifest = build_manifest(res)
        mpath = out / f"{label}_manifest.json"
        mpath.write_text(json.dumps(res.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return res


def _near(t: float, every: float) -> bool:
    r = t / every
    return abs(r - round(r)) < 1e-9


def _write_outputs(res: ScenarioResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    mesh, label, cfg = res.mesh, res.label, res.cfg
    tr, tf = res.traffic, res.transport
    files = []
    # zone series: every transport step, zone declaration order then the city aggregate
    csv_path = out / f"{label}_zones.csv"
    diagnostics.write_csv(csv_path, tf.step_times, tf.zone_means)
    files.append(csv_path)
    if res.wind is not None and cfg.output.vtk:
        p = out / f"{label}_wind.vtk"
        diagnostics.write_vtk(p, mesh, {"v": res.wind.v, "P": res.wind.P, "eps": res.fields.eps,
                                        "K": res.fields.K}, title=f"{label} steady wind")
        files.append(p)
    if cfg.output.vtk:
        phi_at = dict(zip(np.round(tf.times, 9), tf.snapshots))
        k = 0
        for t, s, ec in zip(tr.times, tr.states, res.ec_fields):
            if not _near(t, cfg.output.vtk_every) and t != tr.times[-1]:
                continue
            data = {"rho": s.rho, "u": s.u, "EC": ec}
            phi = phi_at.get(round(t, 9))
            if phi is not None:
                data["phi"] = phi
            p = out / f"{label}_t{k:04d}.vtk"
            diagnostics.write_vtk(p, mesh, data, title=f"{label} t={t:.6g} h")
            files.append(p)
            k += 1
    if res.averages:
        p = out / "summary.csv"
        diagnostics.upsert_summary(p, label, res.averages)
        files.append(p)
    res.outputs = [str(f) for f in files]


def build_manifest(res: ScenarioResult) -> dict:
    import scipy

    cfg, tr = res.cfg, res.traffic
    return {
        "label": res.label,
        "config_hash": cfg.hash(),
        "mesh_identity": res.mesh.identity,
        "mesh": {"nodes": res.mesh.n_nodes, "triangles": res.mesh.n_triangles},
        "versions": {"porous_city": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "threads": effective_threads(cfg),
        "stage_seconds": {k: round(v, 3) for k, v in res.timings.items()},
        "outputs": res.outputs,
        "convergence": {
            "wind_converged": None if res.wind is None else bool(res.wind.converged),
            "wind_steps": None if res.wind is None else int(res.wind.steps),
            "wind_from_cache": res.wind_cached,
            "wind_wall_normal_max": None if res.wind_diagnostics is None else res.wind_diagnostics.wall_normal_max,
            "traffic_wall_normal_max": tr.max_wall_normal,
            "traffic_steps": tr.steps,
            "traffic_clamp_fraction": tr.clamp_fraction,
            "traffic_max_budget_residual": tr.max_budget_residual,
            "evacuation_time_h": tr.evacuation_time,
            "transport_max_iterations": max(res.transport.iterations, default=0),
            "transport_min_ratio": res.transport.min_ratio,
        },
        "averages": res.averages,
    }
