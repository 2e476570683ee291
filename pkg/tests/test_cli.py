import csv
import json
import subprocess
import sys

import pytest

from mfgcn.cli import load_model, run
from mfgcn.errors import ValidationError
from mfgcn.measure import EmpiricalMeasure1D

TRIVIAL = {"q": 1.0, "qbar": 0.0, "s": 0.0, "qT": 1.0, "qbarT": 0.0, "sT": 0.0,
           "dynamics": {"b1": 0.0, "b2": 1.0, "sigma0": 0.3}}
LQ = {"dynamics": {"b1": 0.1, "b2": 1.0, "sigma0": 0.3, "tsigma0": 0.2},
      "costs": {"kind": "lq", "q": 1.0, "qbar": 0.5, "s": 0.8, "qT": 1.0, "qbarT": 0.5, "sT": 0.8},
      "xi": {"kind": "gaussian", "mean": 1.0, "var": 0.25}}


def write(tmp_path, obj, name="model.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def read_csv(path):
    lines = open(path).read().splitlines()
    body = [l for l in lines if not l.startswith("#")]
    return list(csv.reader(body)), [l for l in lines if l.startswith("#")]


def test_riccati_trivial_column_is_one(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert run(["riccati", "--model", write(tmp_path, TRIVIAL), "--grid", "1,10", "--out", str(out)]) == 0
    rows, footer = read_csv(out)
    assert rows[0] == ["t", "P", "R"] and len(rows) == 12
    assert all(float(r[1]) == 1.0 and float(r[2]) == 0.0 for r in rows[1:])
    assert len(footer) == 1 and "seed=" in footer[0] and "version=" in footer[0] and "config_hash=" in footer[0]
    assert capsys.readouterr().out.count("\n") == 1


def test_missing_model_names_path(tmp_path, capsys):
    path = str(tmp_path / "nope.json")
    assert run(["riccati", "--model", path, "--out", str(tmp_path / "r.csv")]) == 2
    assert path in capsys.readouterr().err


def test_lq_constraint_rejected(tmp_path, capsys):
    bad = dict(LQ, costs=dict(LQ["costs"], q=0.1, qbar=0.5, s=2.0))
    assert run(["riccati", "--model", write(tmp_path, bad), "--out", str(tmp_path / "r.csv")]) == 2
    assert "q+qbar-qbar*s" in capsys.readouterr().err.replace(" ", "").replace("·", "*").replace("−", "-")


def test_unknown_keys_listed(tmp_path):
    with pytest.raises(ValidationError) as e:
        load_model(write(tmp_path, {"dynamics": {"b9": 1.0}, "colour": "red"}))
    assert set(e.value.keys) == {"colour", "dynamics.b9"}


def test_minimal_lq_file_gets_defaults(tmp_path):
    m = load_model(write(tmp_path, {}))
    assert m.meta["kind"] == "lq"
    assert (m.meta["q"], m.meta["qbar"], m.meta["s"]) == (1.0, 0.5, 0.8)


def test_custom_expression_model(tmp_path):
    m = load_model(write(tmp_path, {"costs": {"kind": "custom", "f0": "a**2/2 + a**4/4", "c_f": 1.0, "g": "x**2/2"},
                                    "dynamics": {"b2": 1.0}}))
    assert m.meta["kind"] == "custom"
    assert m.costs.dxg(2.0, EmpiricalMeasure1D([0.0])) == pytest.approx(2.0)


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    assert run(["riccati", "--model", write(tmp_path, LQ), "--out", "x.csv", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_rerun_is_byte_identical(tmp_path):
    model = write(tmp_path, LQ)
    args = ["solve-mfg", "--model", model, "--grid", "1,8", "--particles", "4,32", "--seed", "5"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    for name in ("policy.csv", "flow.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    ra, rb = (json.loads((tmp_path / d / "report.json").read_text()) for d in "ab")
    ra.pop("wall_time"), rb.pop("wall_time")
    assert ra == rb


def test_compare_picard_continuation(tmp_path):
    out = tmp_path / "c.json"
    assert run(["compare", "--model", write(tmp_path, LQ), "--grid", "1,10", "--particles", "4,64",
                "--seed", "3", "--a", "picard", "--b", "continuation", "--out", str(out)]) == 0
    r = json.loads(out.read_text())
    assert r["sup_abs_dY0"] <= 1e-2 * r["scale"]


def test_check_assumptions_json(tmp_path):
    out = tmp_path / "a.json"
    assert run(["check-assumptions", "--model", write(tmp_path, LQ), "--trials", "30", "--out", str(out)]) == 0
    reps = json.loads(out.read_text())
    assert [r["condition_id"] for r in reps] == ["C2", "C3", "C4", "C6", "C8", "LL", "WMR", "B2", "B6"]
    assert {"pass", "margin", "constant_estimate", "witness", "trials", "seed"} <= set(reps[0])


def test_seed_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv("MFGCN_SEED", "123")
    out = tmp_path / "a.json"
    assert run(["check-assumptions", "--model", write(tmp_path, LQ), "--trials", "5", "--out", str(out)]) == 0
    assert json.loads(out.read_text())[0]["seed"] == 123


def test_not_converged_exit_code(tmp_path, capsys):
    assert run(["solve-mfg", "--model", write(tmp_path, LQ), "--grid", "1,8", "--particles", "4,32",
                "--max-outer", "1", "--out", str(tmp_path / "o")]) == 3
    assert "not converged" in capsys.readouterr().err


def test_console_script_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mfgcn", "riccati", "--model", write(tmp_path, TRIVIAL),
                        "--grid", "1,4", "--out", str(tmp_path / "r.csv")], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("riccati:")
