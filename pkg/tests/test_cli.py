import json
import re
from pathlib import Path

import pytest

from porous_city import cli, diagnostics as D

ROOT = Path(__file__).resolve().parents[1]
SHIPPED = ROOT / "scenarios" / "concentric_city.toml"


def coarse_toml(tmp_path, **subs):
    text = SHIPPED.read_text()
    text = re.sub(r"^h = 1\.0", "h = 2.0", text, flags=re.M)
    for pat, rep in subs.items():
        text = re.sub(pat, rep, text, flags=re.M)
    p = tmp_path / "city.toml"
    p.write_text(text)
    return p


def test_validate_shipped(capsys):
    assert cli.main(["validate", str(SHIPPED)]) == 0
    out = capsys.readouterr().out
    assert "U_max = 45" in out and "ok" in out


def test_validate_default_config(capsys):
    assert cli.main(["validate"]) == 0


def test_validate_errors(tmp_path, capsys):
    text = SHIPPED.read_text()
    p = tmp_path / "bad.toml"
    p.write_text(re.sub(r"^\[emissions\.co2\]\n(.*\n)*?\n", "", text, flags=re.M))
    assert cli.main(["validate", str(p)]) == 2
    assert "emissions.co2" in capsys.readouterr().err
    p.write_text(text.replace("center_dense = 0.38", "center_dense = 1.4"))
    assert cli.main(["validate", str(p)]) == 2
    assert "center_dense" in capsys.readouterr().err


def test_mesh_synth_info_round_trip(tmp_path, capsys):
    cfg = coarse_toml(tmp_path)
    msh = tmp_path / "city.msh"
    assert cli.main(["mesh", "synth", str(cfg), "-o", str(msh)]) == 0
    synth = capsys.readouterr().out.split("\n", 1)[1]
    assert cli.main(["mesh", "info", str(msh)]) == 0
    info = capsys.readouterr().out
    counts = lambda s: re.findall(r"^(nodes|triangles|boundary edges): (\d+)", s, flags=re.M)
    assert counts(info) == counts(synth) and len(counts(info)) == 3
    assert cli.main(["mesh", "synth", str(cfg), "-o", str(msh), "--format", "2.2"]) == 0
    capsys.readouterr()
    assert cli.main(["mesh", "info", str(msh)]) == 0
    assert counts(capsys.readouterr().out) == counts(synth)


def test_mesh_info_truncated(tmp_path, capsys):
    cfg = coarse_toml(tmp_path)
    msh = tmp_path / "city.msh"
    cli.main(["mesh", "synth", str(cfg), "-o", str(msh)])
    msh.write_text(msh.read_text()[:40])
    assert cli.main(["mesh", "info", str(msh)]) != 0
    assert "error" in capsys.readouterr().err
    assert cli.main(["mesh", "info", str(tmp_path / "none.msh")]) == 3


def test_bad_thread_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("POROUS_CITY_THREADS", "x")
    assert cli.main(["run", str(coarse_toml(tmp_path)), "--T", "0", "--out", str(tmp_path / "o"), "-q"]) == 2
    assert "POROUS_CITY_THREADS" in capsys.readouterr().err


def test_run_zero_horizon(tmp_path, capsys):
    out = tmp_path / "o"
    assert cli.main(["run", str(coarse_toml(tmp_path)), "--T", "0", "--out", str(out), "-q"]) == 0
    man = json.loads((out / "dense_manifest.json").read_text())
    assert man["convergence"]["wind_converged"] is None
    assert man["averages"] == {}
    for f in man["outputs"]:
        assert Path(f).stat().st_size > 0
    assert [Path(f).name for f in man["outputs"]] == ["dense_zones.csv", "dense_t0000.vtk"]
    t, cols = D.read_csv(out / "dense_zones.csv")
    assert list(t) == [0.0]


def test_run_replay_and_speed_limit(tmp_path, capsys):
    cfg = coarse_toml(tmp_path, **{r"^T = 2\.0": "T = 0.1", r"^vtk = true": "vtk = false"})
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", str(cfg), "--out", str(a), "-q"]) == 0
    assert cli.main(["run", str(cfg), "--out", str(b), "-q", "--no-wind-cache"]) == 0
    assert (a / "dense_zones.csv").read_bytes() == (b / "dense_zones.csv").read_bytes()
    ma, mb = (json.loads((d / "dense_manifest.json").read_text()) for d in (a, b))
    assert ma["config_hash"] == mb["config_hash"]
    assert cli.main(["run", str(cfg), "--out", str(a), "-q", "--scenario", "disperse"]) == 0
    assert cli.main(["run", str(cfg), "--out", str(a), "-q", "--scenario", "disperse",
                     "--speed-limit", "30"]) == 0
    rows = D.read_summary(a / "summary.csv")
    assert len(rows) == 3 and "dense" in rows
    assert all("urban" in r for r in rows.values())
    out = capsys.readouterr().out
    assert "Phi[urban]" in out


def test_missing_subcommand():
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 2
