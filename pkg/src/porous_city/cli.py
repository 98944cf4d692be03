"""Command line: ``porous-city run | validate | mesh info | mesh synth``.

Exit codes: 0 success, 2 configuration error, 3 stage (runtime) error.
Flags override config keys, which override built-in defaults.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__, mesh as mesh_mod, scenario
from .pipeline import StageError, effective_threads, run_scenario

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _load(path) -> scenario.ScenarioConfig:
    return scenario.load_config(path) if path else scenario.default_config()


def cmd_run(args) -> int:
    cfg = _load(args.config)
    cfg = cfg.with_overrides(city_kind=args.scenario, U_max=args.speed_limit, label=args.label, T=args.T)
    effective_threads(cfg)  # validates POROUS_CITY_THREADS early
    log = None if args.quiet else (lambda s: print(s, file=sys.stderr))
    res = run_scenario(cfg, out_dir=args.out, wind_cache=not args.no_wind_cache, log=log)
    print(f"{res.label}: config {res.manifest['config_hash']}, mesh {res.mesh.identity}, "
          f"{res.mesh.n_nodes} nodes, {res.mesh.n_triangles} triangles")
    for name, val in res.averages.items():
        print(f"  Phi[{name}] = {val:.6e}")
    out = Path(args.out if args.out is not None else cfg.output.dir)
    print(f"manifest: {out / (res.label + '_manifest.json')}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args.config)
    print(scenario.format_config(cfg))
    print(f"config hash {cfg.hash()}: ok")
    return EXIT_OK


def _mesh_info(m: mesh_mod.Mesh) -> str:
    lines = [f"nodes: {m.n_nodes}", f"triangles: {m.n_triangles}", f"boundary edges: {len(m.boundary_edges)}"]
    for tag, n in m.tag_counts().items():
        lines.append(f"  {tag}: {n}")
    counts = [int((m.triangle_zone == k).sum()) for k in range(len(m.zone_names))]
    lines.append(f"zones: {len(m.zone_names)}")
    for name, n in zip(m.zone_names, counts):
        lines.append(f"  {name}: {n} triangles")
    lines.append(f"identity: {m.identity}")
    return "\n".join(lines)


def cmd_mesh(args) -> int:
    if args.mesh_cmd == "info":
        try:
            m = mesh_mod.read_msh(args.file)
        except OSError as exc:
            _err(f"cannot read {args.file}: {exc}")
            return EXIT_STAGE
        print(_mesh_info(m))
        return EXIT_OK
    cfg = _load(args.config)
    m, _ = mesh_mod.synthetic_city_mesh(cfg.geometry())
    Path(args.output).write_text(mesh_mod.write_msh(m, version=args.format), encoding="ascii", newline="\n")
    print(f"wrote {args.output}")
    print(_mesh_info(m))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="porous-city", description="Traffic, wind and CO2 transport in a porous city.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a full scenario")
    r.add_argument("config", nargs="?", help="scenario TOML (default: packaged concentric city)")
    r.add_argument("--scenario", choices=("dense", "disperse"), help="city configuration")
    r.add_argument("--speed-limit", type=float, metavar="KMH", help="override traffic.U_max [km/h]")
    r.add_argument("--label", help="output label (default from scenario and speed limit)")
    r.add_argument("--T", type=float, help="override run.T [h]")
    r.add_argument("--out", help="output directory (default output.dir)")
    r.add_argument("--no-wind-cache", action="store_true", help="always recompute the steady wind")
    r.add_argument("-q", "--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check a scenario file and print it normalized")
    v.add_argument("config", nargs="?")
    v.set_defaults(func=cmd_validate)

    m = sub.add_parser("mesh", help="mesh utilities")
    msub = m.add_subparsers(dest="mesh_cmd", required=True)
    mi = msub.add_parser("info", help="print counts of an MSH file")
    mi.add_argument("file")
    ms = msub.add_parser("synth", help="write the synthetic city mesh as MSH")
    ms.add_argument("config", nargs="?")
    ms.add_argument("-o", "--output", required=True)
    ms.add_argument("--format", choices=("2.2", "4.1"), default="4.1")
    m.set_defaults(func=cmd_mesh)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except scenario.ConfigError as exc:
        _err(f"config: {exc}")
        return EXIT_CONFIG
    except StageError as exc:
        _err(str(exc))
        return EXIT_STAGE
    except mesh_mod.MeshError as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
