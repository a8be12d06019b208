import json
import subprocess
import sys

import pytest

from slqgame import scenario as sc
from slqgame.cli import check_manifest, main


def emit(tmp_path, name="scalar-smoke", edits=None):
    doc = sc.preset_document(name)
    for (section, key), value in (edits or {}).items():
        doc[section][key] = value
    p = tmp_path / f"{name}.json"
    p.write_text(sc.dumps(doc))
    return str(p)


def test_scenario_list(capsys):
    assert main(["scenario", "list"]) == 0
    out = capsys.readouterr().out
    for name in sc.preset_names():
        assert name + ":" in out


@pytest.mark.parametrize("name", sc.preset_names())
def test_emit_round_trip_and_stable_hash(tmp_path, name, capsys):
    out = tmp_path / "a.json"
    assert main(["scenario", "--emit", name, "--out", str(out)]) == 0
    first = capsys.readouterr().out
    assert main(["scenario", "--emit", name, "--out", str(tmp_path / "b.json")]) == 0
    assert first.split("sha256=")[1] == capsys.readouterr().out.split("sha256=")[1]
    spec, grid, doc, digest = sc.load_scenario(str(out))
    assert doc == sc.preset_document(name)
    assert spec.name == name and digest == sc.sha256_text(out.read_text())
    ref_spec, ref_grid = sc.preset(name)
    assert grid.n_steps == ref_grid.n_steps
    assert (spec.A.samples == ref_spec.A.samples).all()


def test_zero_paths_is_a_configuration_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["equilibrium", "--scenario", emit(tmp_path), "--paths", "0"])
    assert e.value.code == 1


def test_missing_scenario_file_is_a_configuration_error(tmp_path):
    assert main(["validate", "--scenario", str(tmp_path / "absent.json")]) == 1


def test_schema_violation_is_a_configuration_error(tmp_path):
    p = tmp_path / "bad.json"
    doc = sc.preset_document("scalar-smoke")
    del doc["costs"]
    p.write_text(json.dumps(doc))
    assert main(["validate", "--scenario", str(p)]) == 1


def test_assumption_violation_exit_code_and_summary(tmp_path):
    out = tmp_path / "out"
    code = main(["pipeline", "--scenario", emit(tmp_path, edits={("costs", "N2"): [[0.0]]}), "--paths", "10",
                 "--dt", "0.05", "--out", str(out)])
    assert code == 2
    assert "A3.4" in (out / "summary.txt").read_text()
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == 2


def test_validate_reports_ok(tmp_path, capsys):
    assert main(["validate", "--scenario", emit(tmp_path), "--dt", "0.05"]) == 0
    assert "A3.6 ok" in capsys.readouterr().out


def _pipeline(tmp_path, tag, seed=3):
    out = tmp_path / tag
    code = main(["pipeline", "--scenario", emit(tmp_path), "--paths", "40", "--dt", "0.01", "--seed", str(seed),
                 "--out", str(out), "--dump-coefficients", str(out / "coefficients")])
    return code, out


def test_pipeline_manifest_covers_artifacts_and_detects_tampering(tmp_path):
    code, out = _pipeline(tmp_path, "run")
    assert code == 0
    m = json.loads((out / "manifest.json").read_text())
    files = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()} - {"manifest.json"}
    assert files == set(m["artifacts"])
    assert m["seed"] == 3 and m["n_paths"] == 40 and m["grid"]["n_steps"] == 100
    assert check_manifest(out) == []
    with open(out / "costs.csv", "a", encoding="utf-8") as fh:
        fh.write("tampered\n")
    assert check_manifest(out) == ["costs.csv"]


def test_pipeline_is_deterministic(tmp_path):
    _, a = _pipeline(tmp_path, "a")
    _, b = _pipeline(tmp_path, "b")
    _, c = _pipeline(tmp_path, "c", seed=4)
    csvs = sorted(str(p.relative_to(a)) for p in a.rglob("*.csv"))
    assert "trajectories.csv" in csvs and "costs.csv" in csvs
    for rel in csvs:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert (a / "trajectories.csv").read_bytes() != (c / "trajectories.csv").read_bytes()


def test_simulate_writes_both_formats(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--scenario", emit(tmp_path), "--paths", "5", "--dt", "0.05", "--out", str(out)]) == 0
    from slqgame.paths import read_binary
    data = read_binary(out / "trajectories.slq")
    assert data["x"].shape == (5, 21, 1)
    assert check_manifest(out) == []


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "slqgame", "scenario", "list"], capture_output=True, text=True)
    assert r.returncode == 0 and "scalar-smoke" in r.stdout
