import json
import os
import subprocess
import sys

import numpy as np
import pytest

from hygrohom.cell import effective_tensor
from hygrohom.cli import main
from hygrohom.errors import AssumptionViolation, ConfigurationError, OutputError
from hygrohom.fem import StructuredGrid
from hygrohom.io import (FieldSnapshot, config_from_dict, emit_snapshot, example_config_path, load_json,
                         parse_config, read_csv_snapshot)


def small_config(tmp_path, **overrides):
    data = load_json(example_config_path())
    data["grid"] = {"resolution": 16, "cell_resolution": 16}
    data["time"].update({"n_steps": 3})
    data["epsilon"] = 0.5
    data["output"] = {"directory": str(tmp_path / "out"), "format": "csv", "every": 1}
    for key, value in overrides.items():
        data[key] = value
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data))
    return path


# --------------------------------------------------------------------------
# configuration


def test_bundled_config_parses():
    cfg = parse_config(example_config_path())
    assert cfg.validation.ok
    assert cfg.raster.m == 8 and cfg.resolution == 32 and cfg.step.h == 0.125
    assert len(cfg.digest) == 64


def test_positive_ambient_pressure_rejected(tmp_path):
    data = load_json(example_config_path())
    data["constants"]["p_inf"] = 1000.0
    with pytest.raises(AssumptionViolation) as info:
        config_from_dict(data)
    assert any(c.name == "p_inf < 0" for c in info.value.failed)
    assert "p_inf < 0" in str(info.value)


def test_empty_file_reports_line_and_column(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    with pytest.raises(ConfigurationError, match=r"line 1 column 1"):
        parse_config(path)
    path.write_text('{\n  "geometry": {"kind": "uniform",}\n}')
    with pytest.raises(ConfigurationError, match=r"line 2 column"):
        parse_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="does not exist"):
        parse_config(tmp_path / "nope.json")


def test_schema_errors_carry_pointer():
    data = load_json(example_config_path())
    del data["time"]["h"]
    with pytest.raises(ConfigurationError) as info:
        config_from_dict(data)
    assert info.value.pointer == "/time"
    data = load_json(example_config_path())
    data["grid"]["resolution"] = "32"
    with pytest.raises(ConfigurationError) as info:
        config_from_dict(data)
    assert info.value.pointer == "/grid/resolution"
    data = load_json(example_config_path())
    data["bogus"] = 1
    with pytest.raises(ConfigurationError) as info:
        config_from_dict(data)
    assert info.value.pointer == "/"


def test_unknown_law_family_rejected():
    data = load_json(example_config_path())
    data["laws"] = {"k_x": 1.0}
    with pytest.raises(ConfigurationError) as info:
        config_from_dict(data)
    assert info.value.pointer == "/laws"


def test_bad_time_config_pointer():
    data = load_json(example_config_path())
    data["time"]["damping"] = 2.0
    with pytest.raises(ConfigurationError) as info:
        config_from_dict(data)
    assert info.value.pointer == "/time"


# --------------------------------------------------------------------------
# snapshots


def test_snapshot_constant_field_rows(tmp_path):
    snap = FieldSnapshot(2, 2, 0.5, "p", np.full(9, -0.25))
    path = emit_snapshot(snap, tmp_path / "p.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,value" and len(lines) == 10
    assert lines[1] == "0,0,-0.25" and lines[2] == "0.5,0,-0.25" and lines[-1] == "1,1,-0.25"


def test_snapshot_csv_roundtrip_bitwise(tmp_path, rng):
    grid = StructuredGrid(5, 3, 1.0, 0.6)
    v = rng.standard_normal(grid.n_nodes) * 10.0 ** rng.integers(-8, 8, grid.n_nodes)
    emit_snapshot(FieldSnapshot.from_grid(grid, 0.0, "theta", v), tmp_path / "t.csv")
    xy, back = read_csv_snapshot(tmp_path / "t.csv")
    assert np.array_equal(back, v)
    np.testing.assert_allclose(xy, grid.coordinates(), rtol=0, atol=1e-15)


def test_snapshot_vtk_header(tmp_path):
    snap = FieldSnapshot(4, 2, 1.25, "r", np.arange(15.0))
    text = emit_snapshot(snap, tmp_path / "r.vtk", "vtk_legacy").read_text().splitlines()
    assert text[0] == "# vtk DataFile Version 3.0"
    assert text[2:10] == ["ASCII", "DATASET STRUCTURED_POINTS", "DIMENSIONS 5 3 1", "ORIGIN 0 0 0",
                          "SPACING 0.25 0.5 1", "POINT_DATA 15", "SCALARS r double 1", "LOOKUP_TABLE default"]
    assert [float(t) for t in text[10:]] == list(np.arange(15.0))


def test_snapshot_deterministic(tmp_path, rng):
    snap = FieldSnapshot(3, 3, 0.0, "p", rng.standard_normal(16))
    a = emit_snapshot(snap, tmp_path / "a.csv").read_bytes()
    b = emit_snapshot(snap, tmp_path / "b.csv").read_bytes()
    assert a == b


def test_snapshot_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        FieldSnapshot(2, 2, 0.0, "p", np.zeros(8))
    snap = FieldSnapshot(1, 1, 0.0, "p", np.zeros(4))
    with pytest.raises(OutputError):
        emit_snapshot(snap, tmp_path / "missing_dir" / "p.csv")
    with pytest.raises(ConfigurationError):
        emit_snapshot(snap, tmp_path / "p.xyz", "xyz")


# --------------------------------------------------------------------------
# command line


def test_cli_validate(tmp_path, capsys):
    assert main(["validate", "--config", str(small_config(tmp_path))]) == 0
    assert "all assumption checks passed" in capsys.readouterr().out


def test_cli_cell_contrast(tmp_path, capsys):
    path = small_config(tmp_path)
    assert main(["cell", "--config", str(path), "--contrast", "4.0"]) == 0
    out = capsys.readouterr().out
    assert "effective tensor at contrast 4" in out
    cfg = parse_config(path)
    A = effective_tensor(cfg.raster, (4.0, 1.0), cfg.cell_resolution)
    row = np.loadtxt(tmp_path / "out" / "effective_tensor.csv", delimiter=",", skiprows=1)
    assert row[0] == 4.0 and np.array_equal(row[1:], A.ravel())
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["command"] == "cell" and manifest["invariants"]["symmetry_defect"] <= 1e-12
    assert (tmp_path / "out" / "table_hydraulic.json").is_file()


def test_cli_meso_and_macro_runs(tmp_path, capsys):
    path = small_config(tmp_path)
    for mode in ("meso", "macro"):
        assert main([mode, "--config", str(path)]) == 0
        out = tmp_path / "out"
        assert (out / f"{mode}_p_00003.csv").is_file() and (out / f"{mode}_steps.csv").is_file()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == mode and manifest["seed"] == 0
        assert manifest["invariants"]["max_principle_ok"] and manifest["invariants"]["memory_ok"]
        assert set(manifest["versions"]) == {"hygrohom", "numpy", "scipy", "python"}


def test_cli_runs_are_bitwise_reproducible(tmp_path, capsys):
    path = small_config(tmp_path)
    outs = []
    for k in range(2):
        out = tmp_path / f"rep{k}"
        assert main(["meso", "--config", str(path), "--out", str(out)]) == 0
        outs.append({f.name: f.read_bytes() for f in sorted(out.glob("*.csv"))})
    assert outs[0] == outs[1] and len(outs[0]) > 3


def test_cli_translate(tmp_path, capsys):
    path = small_config(tmp_path)
    assert main(["translate", "--config", str(path), "--taus", "1", "2"]) == 0
    rows = np.loadtxt(tmp_path / "out" / "translation.csv", delimiter=",", skiprows=1)
    assert rows.shape == (2, 4) and np.all(rows >= 0)


def test_cli_converge(tmp_path, capsys):
    path = small_config(tmp_path, sweep={"epsilons": [0.5, 0.25], "resolutions": [16, 32], "macro_resolution": 16})
    assert main(["converge", "--config", str(path), "--out", str(tmp_path / "o2")]) == 0
    assert (tmp_path / "o2" / "epsilon_sweep.csv").is_file()


def test_cli_converge_requires_sweep(tmp_path, capsys):
    data = load_json(small_config(tmp_path))
    del data["sweep"]
    path = tmp_path / "nosweep.json"
    path.write_text(json.dumps(data))
    assert main(["converge", "--config", str(path)]) == 1
    assert "/sweep" in capsys.readouterr().err


def test_cli_usage_errors(tmp_path, capsys):
    assert main([]) == 64
    assert main(["frobnicate"]) == 64
    assert main(["meso"]) == 64
    assert main(["translate", "--config", "x.json", "--mode", "other"]) == 64


def test_cli_bad_config_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["validate", "--config", str(bad)]) == 1
    data = load_json(example_config_path())
    data["constants"]["p_inf"] = 1000.0
    bad.write_text(json.dumps(data))
    assert main(["validate", "--config", str(bad)]) == 1
    assert "p_inf < 0" in capsys.readouterr().err


def test_cli_solver_failure_exit_2(tmp_path, capsys):
    data = load_json(small_config(tmp_path))
    data["time"].update({"max_iter": 1, "tol_p": 1e-15})
    path = tmp_path / "fail.json"
    path.write_text(json.dumps(data))
    assert main(["meso", "--config", str(path)]) == 2
    assert "solver failure" in capsys.readouterr().err


def test_cli_unwritable_output_exit_1(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    path = small_config(tmp_path)
    assert main(["cell", "--config", str(path), "--out", str(blocker / "sub")]) == 1


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "hygrohom", "validate", "--config", str(small_config(tmp_path))],
                         capture_output=True, text=True, env={**os.environ})
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "hygrohom"], capture_output=True, text=True)
    assert res.returncode == 64
