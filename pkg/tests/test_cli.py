import csv
import json
import math

import numpy as np
import pytest

from stablekit.cli import parse_grid, run_command


def _csv_value(path, **cols):
    with open(path) as fh:
        for row in csv.DictReader(fh):
            if all(float(row[k]) == v for k, v in cols.items()):
                return float(row["density"])
    raise KeyError(cols)


def _run(*argv):
    return run_command([str(a) for a in argv])


def test_density_example_default_terms(tmp_path):
    out = tmp_path / "d"
    assert _run("density", "--model", "const-cauchy", "--t", "0.5", "--grid", "-8:8:1024", "--out", out) == 0
    v = _csv_value(out / "density.csv", t=0.5, x1=0.0, y1=0.0)
    assert abs(v - 1 / (math.pi * 0.5)) <= 0.02 / (math.pi * 0.5)


def test_density_example_converged_series(tmp_path):
    params = tmp_path / "p.json"
    params.write_text(json.dumps({"K_max": 12}))
    out = tmp_path / "d"
    assert _run("density", "--model", "const-cauchy", "--t", "0.5", "--grid", "-8:8:1024", "--params", params,
                "--out", out) == 0
    v = _csv_value(out / "density.csv", t=0.5, x1=0.0, y1=0.0)
    assert abs(v - 1 / (math.pi * 0.5)) <= 0.02 / (math.pi * 0.5)
    side = json.loads((out / "density.csv.json").read_text())
    prov = side["provenance"]
    assert {"version", "model_hash", "params", "seed"} <= set(prov)
    header = json.loads((out / "field.json").read_text())
    assert header["shape"][1:] == [1, 1024]


def test_validate_rotation(tmp_path):
    assert _run("validate", "--model", "rotation-sde", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "validation.json").read_text())
    assert doc["passed"] is True


def test_simulate_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run("simulate", "--model", "const-cauchy", "--n", 10, "--seed", 7, "--out", out) == 0
    assert (a / "paths.csv").read_bytes() == (b / "paths.csv").read_bytes()
    assert (a / "paths.csv.json").read_bytes() == (b / "paths.csv.json").read_bytes()
    assert len((a / "paths.csv").read_text().splitlines()) == 11


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.delenv("STABLEKIT_SEED", raising=False)
    assert _run("simulate", "--model", "const-cauchy", "--n", 5, "--out", tmp_path) == 2
    monkeypatch.setenv("STABLEKIT_SEED", "7")
    assert _run("simulate", "--model", "const-cauchy", "--n", 10, "--out", tmp_path / "env") == 0
    assert _run("simulate", "--model", "const-cauchy", "--n", 10, "--seed", 7, "--out", tmp_path / "flag") == 0
    assert (tmp_path / "env" / "paths.csv").read_bytes() == (tmp_path / "flag" / "paths.csv").read_bytes()


@pytest.mark.parametrize("argv", [
    ["simulate", "--model", "nonexistent", "--seed", 1],
    ["simulate", "--model", "const-alpha", "--set", "alpha=2.5", "--seed", 1],
    ["simulate", "--model", "const-alpha", "--set", "alpha", "--seed", 1],
])
def test_config_errors_exit_2(tmp_path, argv, capsys):
    assert _run(*argv, "--out", tmp_path) == 2


def test_config_error_names_field(tmp_path, capsys):
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps({"dimension": 1, "alpha": "1.5", "lambda": "1", "sigma": {"atoms": [{"dir": [1.0]}]}}))
    assert _run("validate", "--model", bad, "--out", tmp_path) == 2
    assert "sigma" in capsys.readouterr().err


def test_params_errors(tmp_path, capsys):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"no_such": 1}))
    assert _run("validate", "--model", "const-alpha", "--params", p, "--out", tmp_path) == 2
    assert "params.no_such" in capsys.readouterr().err
    p.write_text("{not json")
    assert _run("validate", "--model", "const-alpha", "--params", p, "--out", tmp_path) == 2


def test_numerical_failure_exit_3(tmp_path, capsys):
    # an Euler step above the thinning limit of the resetting kernel
    assert _run("simulate", "--model", "resetting", "--t", 1, "--h", 1, "--n", 5, "--seed", 1, "--out", tmp_path) == 3
    assert "ThinningError" in capsys.readouterr().err


def test_unknown_command():
    assert run_command(["frobnicate"]) != 0


def test_list_models(capsys):
    assert _run("list-models") == 0
    doc = json.loads(capsys.readouterr().out)
    names = {m["name"] for m in doc["models"]}
    assert {"const-cauchy", "const-alpha", "var-alpha-1d", "resetting", "rotation-sde", "truncated-noise"} <= names


def test_threads_identical(tmp_path):
    for k in (1, 2):
        out = tmp_path / f"t{k}"
        assert _run("--threads", k, "density", "--model", "var-alpha-1d", "--t", "0.25,0.5", "--grid", "-8:8:128",
                    "--out", out) == 0
        assert _run("--threads", k, "simulate", "--model", "var-alpha-1d", "--n", 200, "--seed", 3, "--out", out) == 0
    for name in ("density.csv", "field.bin", "paths.csv"):
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t2" / name).read_bytes()


def test_residual_compare_conditions(tmp_path):
    assert _run("residual", "--model", "var-alpha-1d", "--t", "0.25,0.5", "--grid", "-8:8:128", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "residual.json").read_text())
    assert len(rep["norm_inf1"]) == 2
    assert _run("compare", "--model", "const-alpha", "--grid", "-16:16:256", "--n", 20000, "--seed", 2,
                "--out", tmp_path) == 0
    cmp = json.loads((tmp_path / "compare.json").read_text())
    assert cmp["total_variation"] <= 0.05
    assert _run("conditions", "--model", "const-alpha", "--kind", "e34", "--aux", "1.5", "--out", tmp_path) == 0
    assert (tmp_path / "conditions.csv").exists()


def test_density_two_dimensional(tmp_path):
    assert _run("density", "--model", "rotation-sde", "--t", "0.5", "--grid", "-8:8:17", "--out", tmp_path) == 0
    rows = (tmp_path / "density.csv").read_text().splitlines()
    assert rows[0] == "t,x1,x2,y1,y2,density" and len(rows) == 1 + 17 * 17


def test_parse_grid_decimal():
    g = parse_grid("-0.3:0.3:6")
    assert np.allclose(g, [-0.3, -0.2, -0.1, 0.0, 0.1, 0.2])
    with pytest.raises(Exception):
        parse_grid("1:0:4")
