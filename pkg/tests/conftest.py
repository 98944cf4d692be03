import dataclasses
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from porous_city import mesh as mesh_mod, pipeline, scenario  # noqa: E402

ALL_WALL = {"left": "wall", "right": "wall", "bottom": "wall", "top": "wall"}


@pytest.fixture
def unit_square():
    return mesh_mod.rectangle_mesh(1.0, 1.0, 8, side_tags=ALL_WALL)


@pytest.fixture(scope="session")
def cfg():
    return scenario.default_config()


@pytest.fixture(scope="session")
def coarse_cfg(cfg):
    """The shipped scenario on a 2 km mesh and a short horizon, for fast end-to-end tests."""
    return cfg.replace(mesh=dataclasses.replace(cfg.mesh, h=2.0),
                       run=dataclasses.replace(cfg.run, T=0.1, output_every=0.05),
                       output=dataclasses.replace(cfg.output, vtk_every=0.05))


@pytest.fixture(scope="session")
def coarse_city(coarse_cfg):
    m, zones = scenario.load_mesh(coarse_cfg)
    return m, zones, scenario.build_fields(m, zones, coarse_cfg)


@pytest.fixture(scope="session")
def scenario_runs(cfg, tmp_path_factory):
    """The three desk-scale city runs (dense, disperse, disperse at 30 km/h)
    sharing one wind cache directory."""
    out = tmp_path_factory.mktemp("orderings")
    cache = out / "cache"
    runs = {}
    for label, kind, umax in (("dense", "dense", None), ("disperse", "disperse", None),
                              ("disperse-U30", "disperse", 30.0)):
        c = cfg.with_overrides(city_kind=kind, U_max=umax)
        runs[label] = pipeline.run_scenario(c, out_dir=out, label=label, wind_cache=cache)
    return out, runs


def max_abs(a):
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
