"""Scenario configuration (TOML) and the coefficient fields derived from it.

Every physics key in a scenario file carries an inline unit comment such as
``U_max = 45.0  # [km/h]``; ``[-]`` marks dimensionless values.  Unknown keys
are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .mesh import CityGeometry, Mesh, ZoneMap, read_msh, synthetic_city_mesh, zone_map_from_mesh

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

GAMMA1 = 3.6  # km/h per m/s
GAMMA2 = 1e-3 / 3.6 ** 2  # km/h² -> m/s²


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


class EmptyUrbanZone(ValueError):
    pass


class NegativePeak(ValueError):
    pass


# ------------------------------------------------------------------ config tree


@dataclass(frozen=True)
class RunConfig:
    city_kind: str = "dense"
    label: str = ""
    T: float = 2.0
    output_every: float = 0.05
    threads: int = 1
    seed: int = 0
    vehicle_epsilon: float = 1.0
    evacuation_fraction: float = 0.05


@dataclass(frozen=True)
class SelectedZone:
    name: str
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class MeshConfig:
    source: str = "synthetic"
    width: float = 40.0
    height: float = 30.0
    h: float = 1.0
    city_radius: float = 11.0
    center: tuple[float, float] = (20.0, 15.0)
    obstacles: tuple[tuple[float, float, float], ...] = ()
    selected: tuple[SelectedZone, ...] = ()


@dataclass(frozen=True)
class PorosityConfig:
    center_dense: float = 0.38
    center_disperse: float = 0.68
    layout: float = 0.82
    rural: float = 1.0
    selected: float = 1.0


@dataclass(frozen=True)
class MediumConfig:
    K_ref: float = 0.3
    K_max: float = 1.0e6
    C_F: float = 0.1


@dataclass(frozen=True)
class InitialDensity:
    mode: str = "ring"
    center: tuple[float, float] | None = None
    r0: float = 7.0
    spread: float = 1.5
    peak: float = 3000.0


@dataclass(frozen=True)
class TrafficConfig:
    U_max: float = 45.0
    rho_max: float = 8000.0
    theta: float = 1.0
    nu: float = 1.0
    tau: float = 0.005
    mu: float = 2.0
    kappa0: float = 3.0
    s_kappa: float = 6.0
    attraction_center: tuple[float, float] | None = None
    q: float = 0.0
    rho_floor: float = 1.0
    pressure_term: bool = True
    cfl_safety: float = 0.4
    initial: InitialDensity = InitialDensity()


@dataclass(frozen=True)
class RoutingConfig:
    eta: float = 0.0  # 0 selects 0.1 * domain diameter
    g0: float = 1.0
    s_G: float = 2.0
    f_min_fraction: float = 0.05
    grad_eps: float = 1e-8
    refresh_every: int = 10


@dataclass(frozen=True)
class Coefficients:
    f: tuple[float, float, float, float, float, float]
    provenance: str


@dataclass(frozen=True)
class EmissionsConfig:
    species: str = "co2"
    u_eps: float = 1e-3
    tables: dict = field(default_factory=dict)

    @property
    def coefficients(self) -> Coefficients:
        return self.tables[self.species]


@dataclass(frozen=True)
class AirConfig:
    rho_a: float = 1.0
    mu_a: float = 1.0
    v_in: tuple[float, float] = (5.0, -5.0)
    steady_tol: float = 1e-4
    max_steps: int = 200_000
    cfl_safety: float = 0.4
    incremental: bool = True  # tentative step carries the previous pressure gradient


@dataclass(frozen=True)
class TransportConfig:
    mu_phi: float = 0.5
    sigma: float = 0.1
    dt: float = 0.01
    phi0: float = 0.0
    zeta2: float = 0.0
    stabilization: bool = True
    rel_tol: float = 1e-8
    reassemble: bool = False


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    vtk: bool = True
    vtk_every: float = 0.5
    wind_cache: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    run: RunConfig = RunConfig()
    mesh: MeshConfig = MeshConfig()
    porosity: PorosityConfig = PorosityConfig()
    medium: MediumConfig = MediumConfig()
    traffic: TrafficConfig = TrafficConfig()
    routing: RoutingConfig = RoutingConfig()
    emissions: EmissionsConfig = EmissionsConfig()
    air: AirConfig = AirConfig()
    transport: TransportConfig = TransportConfig()
    output: OutputConfig = OutputConfig()

    @property
    def eps_center(self) -> float:
        p = self.porosity
        return p.center_dense if self.run.city_kind == "dense" else p.center_disperse

    @property
    def c2(self) -> float:
        return self.traffic.theta / self.traffic.rho_max

    def replace(self, **sections) -> "ScenarioConfig":
        return dataclasses.replace(self, **sections)

    def with_overrides(self, city_kind: str | None = None, U_max: float | None = None,
                       label: str | None = None, T: float | None = None) -> "ScenarioConfig":
        run, traffic = self.run, self.traffic
        if city_kind is not None:
            run = dataclasses.replace(run, city_kind=city_kind)
        if label is not None:
            run = dataclasses.replace(run, label=label)
        if T is not None:
            run = dataclasses.replace(run, T=float(T))
        if U_max is not None:
            traffic = dataclasses.replace(traffic, U_max=float(U_max))
        cfg = dataclasses.replace(self, run=run, traffic=traffic)
        validate_config(cfg)
        return cfg

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def geometry(self) -> CityGeometry:
        m = self.mesh
        return CityGeometry(width=m.width, height=m.height, city_radius=m.city_radius,
                            center=tuple(m.center), obstacles=tuple(tuple(o) for o in m.obstacles),
                            selected=tuple((s.name, s.center[0], s.center[1], s.radius) for s in m.selected),
                            h=m.h)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# ------------------------------------------------------------------ loading

# integer counters and switches that carry no physical unit
_UNITLESS_KEYS = {"threads", "seed", "refresh_every", "max_steps"}
_NUMERIC = re.compile(r"^[\s\[]*[-+.\d]")


def _coerce(value, ftype, key: str):
    if ftype is float or ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if ftype is int or ftype == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if ftype is bool or ftype == "bool":
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if ftype is str or ftype == "str":
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise ConfigError(key, f"unsupported type {ftype}")


def _point(value, key, n=2):
    if not isinstance(value, list) or len(value) != n or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ConfigError(key, f"expected a list of {n} numbers, got {value!r}")
    return tuple(float(v) for v in value)


_SPECIAL = {
    ("mesh", "center"): lambda v, k: _point(v, k),
    ("mesh", "obstacles"): lambda v, k: tuple(_point(o, f"{k}[{i}]", 3) for i, o in enumerate(_as_list(v, k))),
    ("traffic", "attraction_center"): lambda v, k: _point(v, k),
    ("initial", "center"): lambda v, k: _point(v, k),
    ("air", "v_in"): lambda v, k: _point(v, k),
}


def _as_list(v, k):
    if not isinstance(v, list):
        raise ConfigError(k, f"expected a list, got {v!r}")
    return v


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    section = path.rsplit(".", 1)[-1]
    for key, value in data.items():
        kp = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(kp, "unknown key")
        ftype = fields[key].type
        sub = {"run": RunConfig, "mesh": MeshConfig, "porosity": PorosityConfig,
               "medium": MediumConfig, "traffic": TrafficConfig, "routing": RoutingConfig,
               "air": AirConfig, "transport": TransportConfig, "output": OutputConfig,
               "initial": InitialDensity}
        if (section, key) in _SPECIAL:
            kwargs[key] = _SPECIAL[(section, key)](value, kp)
        elif cls is MeshConfig and key == "selected":
            kwargs[key] = tuple(_selected(z, f"{kp}[{i}]") for i, z in enumerate(_as_list(value, kp)))
        elif cls is EmissionsConfig and key not in ("species", "u_eps"):
            raise ConfigError(kp, "unknown key")
        elif key in sub and cls in (ScenarioConfig, TrafficConfig):
            kwargs[key] = _build(sub[key], value, kp)
        elif cls is ScenarioConfig and key == "emissions":
            kwargs[key] = _emissions(value, kp)
        else:
            kwargs[key] = _coerce(value, ftype, kp)
    return cls(**kwargs)


def _selected(z, kp) -> SelectedZone:
    if not isinstance(z, dict):
        raise ConfigError(kp, "expected a table")
    for k in z:
        if k not in ("name", "center", "radius"):
            raise ConfigError(f"{kp}.{k}", "unknown key")
    for k in ("name", "center", "radius"):
        if k not in z:
            raise ConfigError(f"{kp}.{k}", "missing key")
    return SelectedZone(_coerce(z["name"], str, f"{kp}.name"), _point(z["center"], f"{kp}.center"),
                        _coerce(z["radius"], float, f"{kp}.radius"))


def _emissions(data, kp) -> EmissionsConfig:
    if not isinstance(data, dict):
        raise ConfigError(kp, "expected a table")
    species = data.get("species", "co2")
    if not isinstance(species, str):
        raise ConfigError(f"{kp}.species", "expected a string")
    tables = {}
    scalars = {}
    for k, v in data.items():
        if k in ("species",):
            continue
        if k == "u_eps":
            scalars["u_eps"] = _coerce(v, float, f"{kp}.u_eps")
            continue
        if not isinstance(v, dict):
            raise ConfigError(f"{kp}.{k}", "unknown key")
        tables[k] = _coefficients(v, f"{kp}.{k}")
    if species not in tables:
        raise ConfigError(f"{kp}.{species}", "missing coefficient table (f = [f1..f6], provenance)")
    return EmissionsConfig(species=species, tables=tables, **scalars)


def _coefficients(v: dict, kp: str) -> Coefficients:
    for k in v:
        if k not in ("f", "provenance"):
            raise ConfigError(f"{kp}.{k}", "unknown key")
    if "f" not in v:
        raise ConfigError(f"{kp}.f", "missing key")
    if "provenance" not in v or not str(v["provenance"]).strip():
        raise ConfigError(f"{kp}.provenance", "missing or empty provenance")
    f = v["f"]
    if not isinstance(f, list) or len(f) != 6 or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in f):
        raise ConfigError(f"{kp}.f", "expected six numbers f1..f6")
    return Coefficients(tuple(float(x) for x in f), str(v["provenance"]))


def check_unit_comments(text: str) -> None:
    """Every numeric assignment must end with a ``# [unit]`` comment."""
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            section = line.strip("[]").strip()
            continue
        if "=" not in line:
            continue
        key, _, rest = line.partition("=")
        key = key.strip()
        value = rest.split("#", 1)[0]
        if key in _UNITLESS_KEYS or not _NUMERIC.match(value):
            continue
        if not re.search(r"#\s*\[[^\]]+\]", rest):
            where = f"{section}.{key}" if section else key
            raise ConfigError(where, f"line {lineno}: physics key lacks an inline unit comment '# [unit]'")


def validate_config(cfg: ScenarioConfig) -> None:
    """Check the invariants of a configuration; raises :class:`ConfigError`."""
    p, t, r = cfg.porosity, cfg.traffic, cfg.run

    def need(cond, key, msg):
        if not cond:
            raise ConfigError(key, msg)

    need(r.city_kind in ("dense", "disperse"), "run.city_kind", "must be 'dense' or 'disperse'")
    for name in ("center_dense", "center_disperse", "layout", "rural", "selected"):
        v = getattr(p, name)
        need(0.0 < v <= 1.0, f"porosity.{name}", f"must lie in (0, 1], got {v}")
    need(p.rural == 1.0, "porosity.rural", "rural porosity must be 1.0")
    for name in ("center_dense", "center_disperse"):
        need(getattr(p, name) <= p.layout <= p.rural, f"porosity.{name}",
             "requires center <= layout <= rural")
    need(t.rho_max > 0, "traffic.rho_max", "must be positive")
    need(t.U_max > 0, "traffic.U_max", "must be positive")
    need(t.tau > 0, "traffic.tau", "must be positive")
    need(t.rho_floor > 0, "traffic.rho_floor", "must be positive")
    need(0 < t.cfl_safety <= 1, "traffic.cfl_safety", "must lie in (0, 1]")
    for key, v in (("traffic.nu", t.nu), ("traffic.mu", t.mu), ("traffic.kappa0", t.kappa0),
                   ("traffic.theta", t.theta), ("traffic.q", t.q),
                   ("medium.C_F", cfg.medium.C_F), ("air.mu_a", cfg.air.mu_a),
                   ("transport.mu_phi", cfg.transport.mu_phi), ("transport.sigma", cfg.transport.sigma)):
        need(v >= 0, key, "must be non-negative")
    need(cfg.medium.K_ref > 0 and cfg.medium.K_max > 0, "medium.K_ref", "permeability must be positive")
    need(t.s_kappa > 0, "traffic.s_kappa", "must be positive")
    need(t.initial.mode in ("ring", "peak"), "traffic.initial.mode", "must be 'ring' or 'peak'")
    need(t.initial.spread > 0, "traffic.initial.spread", "must be positive")
    need(t.initial.peak >= 0, "traffic.initial.peak", "must be non-negative")
    need(cfg.routing.eta >= 0, "routing.eta", "must be non-negative (0 = automatic)")
    need(cfg.routing.g0 > 0 and cfg.routing.s_G > 0, "routing.g0", "attraction strength and spread must be positive")
    need(0 < cfg.routing.f_min_fraction < 1, "routing.f_min_fraction", "must lie in (0, 1)")
    need(cfg.routing.refresh_every >= 1, "routing.refresh_every", "must be >= 1")
    need(cfg.air.rho_a > 0, "air.rho_a", "must be positive")
    need(cfg.air.steady_tol > 0 and cfg.air.max_steps >= 1, "air.steady_tol", "must be positive")
    need(cfg.transport.dt > 0, "transport.dt", "must be positive")
    need(cfg.transport.zeta2 == 0.0, "transport.zeta2", "the second stabilization parameter is not implemented; "
         "leave it at 0")
    need(cfg.transport.rel_tol > 0, "transport.rel_tol", "must be positive")
    need(r.T >= 0, "run.T", "must be non-negative")
    need(r.output_every > 0, "run.output_every", "must be positive")
    need(r.threads >= 1, "run.threads", "must be >= 1")
    need(0 <= r.evacuation_fraction < 1, "run.evacuation_fraction", "must lie in [0, 1)")
    need(cfg.mesh.h > 0, "mesh.h", "must be positive")
    need(cfg.output.vtk_every > 0, "output.vtk_every", "must be positive")
    if cfg.emissions.species not in cfg.emissions.tables:
        raise ConfigError(f"emissions.{cfg.emissions.species}", "missing coefficient table")


def parse_config(text: str) -> ScenarioConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"invalid TOML: {exc}") from exc
    check_unit_comments(text)
    if "emissions" not in data:
        raise ConfigError("emissions.co2", "missing coefficient table [emissions.co2]")
    cfg = _build(ScenarioConfig, data, "")
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    cfg = parse_config(text)
    src = cfg.mesh.source
    if src != "synthetic" and not Path(src).is_absolute():
        cfg = cfg.replace(mesh=dataclasses.replace(cfg.mesh, source=str(Path(path).parent / src)))
    return cfg


def default_config_path() -> Path:
    return Path(__file__).parent / "data" / "concentric_city.toml"


def default_config() -> ScenarioConfig:
    return load_config(default_config_path())


def format_config(cfg: ScenarioConfig) -> str:
    """Normalized ``section.key = value`` listing used by ``validate``."""
    out = []

    def walk(prefix, obj):
        if dataclasses.is_dataclass(obj):
            for f in dataclasses.fields(obj):
                walk(f"{prefix}.{f.name}" if prefix else f.name, getattr(obj, f.name))
        elif isinstance(obj, dict):
            for k, v in obj.items():
                walk(f"{prefix}.{k}", v)
        else:
            out.append(f"{prefix} = {obj!r}")

    walk("", cfg)
    return "\n".join(out)


# ------------------------------------------------------------------ geometry


def load_mesh(cfg: ScenarioConfig) -> tuple[Mesh, ZoneMap]:
    if cfg.mesh.source == "synthetic":
        return synthetic_city_mesh(cfg.geometry())
    mesh = read_msh(cfg.mesh.source)
    return mesh, zone_map_from_mesh(mesh)


# ------------------------------------------------------------------ coefficient fields


def urban_centroid(mesh: Mesh, zones: ZoneMap) -> np.ndarray:
    tris = np.flatnonzero(zones.urban_triangles)
    if len(tris) == 0:
        raise EmptyUrbanZone("the urban zone contains no triangles")
    w = mesh.areas[tris]
    return (mesh.centroids[tris] * w[:, None]).sum(axis=0) / w.sum()


def radial_porosity(points: np.ndarray, center, R: float, eps_center: float, eps_layout: float) -> np.ndarray:
    r = np.hypot(points[:, 0] - center[0], points[:, 1] - center[1])
    eps = eps_center + (eps_layout - eps_center) * (r / R)
    return np.clip(eps, min(eps_center, eps_layout), max(eps_center, eps_layout))


def build_porosity(mesh: Mesh, zones: ZoneMap, cfg: ScenarioConfig) -> np.ndarray:
    """Nodal porosity: radial ramp in the city, ε_rural outside, selected zones open."""
    urban = zones.urban_nodes
    if not urban.any():
        raise EmptyUrbanZone("the urban zone contains no nodes")
    c = urban_centroid(mesh, zones)
    pts = mesh.nodes[urban]
    R = float(np.max(np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1])))
    eps = np.full(mesh.n_nodes, cfg.porosity.rural)
    eps[urban] = radial_porosity(pts, c, max(R, 1e-12), cfg.eps_center, cfg.porosity.layout)
    eps[zones.selected_nodes] = cfg.porosity.selected
    return eps


def permeability(eps: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Kozeny-Carman K(ε) = K_ref ε³/(1-ε)², capped at K_max."""
    m = cfg.medium
    eps = np.asarray(eps, dtype=np.float64)
    with np.errstate(divide="ignore"):
        k = m.K_ref * eps ** 3 / (1.0 - eps) ** 2
    return np.minimum(np.where(eps >= 1.0, m.K_max, k), m.K_max)


def gaussian_initial_density(mesh: Mesh, center, spread: float, peak: float, mode: str = "ring",
                             r0: float = 0.0, mask: np.ndarray | None = None) -> np.ndarray:
    if peak < 0:
        raise NegativePeak(f"peak density must be non-negative, got {peak}")
    if spread <= 0:
        raise ValueError("spread must be positive")
    d = np.hypot(mesh.nodes[:, 0] - center[0], mesh.nodes[:, 1] - center[1])
    if mode == "ring":
        rho = peak * np.exp(-((d - r0) ** 2) / (2 * spread ** 2))
    elif mode == "peak":
        rho = peak * np.exp(-(d ** 2) / (2 * spread ** 2))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if mask is not None:
        rho = np.where(mask, rho, 0.0)
    return rho


def traffic_nodes(zones: ZoneMap) -> np.ndarray:
    """Nodes where cars circulate on city streets (urban, not selected)."""
    return zones.urban_nodes & ~zones.selected_nodes


def attraction_center(mesh: Mesh, zones: ZoneMap, cfg: ScenarioConfig) -> np.ndarray:
    if cfg.traffic.attraction_center is not None:
        return np.asarray(cfg.traffic.attraction_center, dtype=np.float64)
    return urban_centroid(mesh, zones)


def parking_rate_field(mesh: Mesh, zones: ZoneMap, cfg: ScenarioConfig) -> np.ndarray:
    t = cfg.traffic
    if t.kappa0 < 0:
        raise ConfigError("traffic.kappa0", "must be non-negative")
    xc = attraction_center(mesh, zones, cfg)
    d2 = (mesh.nodes[:, 0] - xc[0]) ** 2 + (mesh.nodes[:, 1] - xc[1]) ** 2
    kappa = t.kappa0 * np.exp(-d2 / (2 * t.s_kappa ** 2))
    return np.where(traffic_nodes(zones), kappa, 0.0)


def initial_density(mesh: Mesh, zones: ZoneMap, cfg: ScenarioConfig) -> np.ndarray:
    ini = cfg.traffic.initial
    center = ini.center if ini.center is not None else urban_centroid(mesh, zones)
    return gaussian_initial_density(mesh, center, ini.spread, ini.peak, ini.mode, ini.r0,
                                    mask=traffic_nodes(zones))


def domain_diameter(mesh: Mesh) -> float:
    from scipy.spatial import ConvexHull
    from scipy.spatial.distance import pdist
    hull = mesh.nodes[ConvexHull(mesh.nodes).vertices]
    return float(pdist(hull).max())


@dataclass(frozen=True, eq=False)
class ScenarioFields:
    """Coefficient fields shared by every model of one scenario."""

    eps: np.ndarray
    K: np.ndarray
    kappa: np.ndarray
    q: np.ndarray
    urban: np.ndarray  # nodal indicator where the congestion travel cost applies
    rural: np.ndarray
    attraction: np.ndarray
    eta: float


def build_fields(mesh: Mesh, zones: ZoneMap, cfg: ScenarioConfig) -> ScenarioFields:
    eps = build_porosity(mesh, zones, cfg)
    urban = traffic_nodes(zones)
    q = np.where(urban, cfg.traffic.q, 0.0)
    eta = cfg.routing.eta if cfg.routing.eta > 0 else 0.1 * domain_diameter(mesh)
    return ScenarioFields(eps=eps, K=permeability(eps, cfg), kappa=parking_rate_field(mesh, zones, cfg),
                          q=q, urban=urban, rural=~urban, attraction=attraction_center(mesh, zones, cfg),
                          eta=float(eta))
