import csv
import json
import subprocess
import sys

import pytest

from pdmpctl.cli import main, step_trend, tauberian_trend


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg) if isinstance(cfg, dict) else cfg)
    return str(p)


def run(tmp_path, cfg, *extra):
    return main(["run", "--config", write(tmp_path, cfg), "--output-dir",
                 str(tmp_path / "out"), *extra])


def test_nonexp_check_passes(tmp_path):
    cfg = {"experiment": "nonexp_check", "seed": 1, "model": {"name": "phage"},
           "nonexp_check": {"n_samples": 2000}}
    assert run(tmp_path, cfg) == 0
    out = tmp_path / "out"
    assert (out / "summary.txt").read_text().startswith("PASS")
    man = json.loads((out / "manifest.json").read_text())
    assert man["files"] == ["nonexp.csv"] and man["passed"]


def test_nonexp_check_fails_on_expansive(tmp_path):
    cfg = {"experiment": "nonexp_check", "seed": 1, "model": {"name": "expansive"},
           "nonexp_check": {"n_samples": 200}}
    assert run(tmp_path, cfg) == 1
    assert "FAIL" in (tmp_path / "out" / "summary.txt").read_text()


def test_tauberian_constant_cost(tmp_path):
    cfg = {"experiment": "tauberian", "seed": 0, "model": {"name": "constant_cost"},
           "simulation": {"n_paths": 5},
           "tauberian": {"deltas": [1.0, 0.5], "probes": [{"x": [0.2]}],
                         "family": {"u_levels": [0.0], "v_levels": [0.0]}}}
    assert run(tmp_path, cfg) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "tauberian.csv")))
    assert len(rows) == 2 and all(abs(float(r["d"])) < 1e-10 for r in rows)


def test_missing_seed(tmp_path, capsys):
    assert run(tmp_path, {"experiment": "validate", "model": {"name": "phage"}}) == 2
    assert "config.seed" in capsys.readouterr().err


def test_malformed_json_points_at_line(tmp_path, capsys):
    assert run(tmp_path, '{\n  "experiment": "validate",\n  "seed": }') == 2
    assert "line 3" in capsys.readouterr().err


@pytest.mark.parametrize("cfg,where", [
    ({"experiment": "nope", "seed": 0}, "config.experiment"),
    ({"experiment": "abel", "seed": 0, "model": {"name": "phage"},
      "abel": {"deltas": [-1], "probes": [{"x": [1, 1]}]}}, "abel.deltas"),
    ({"experiment": "abel", "seed": 0, "model": {"name": "phage"},
      "abel": {"deltas": [1], "probes": [{"x": [1]}]}}, "abel.probes[0].x"),
    ({"experiment": "validate", "seed": 0, "model": {"name": "phage",
                                                      "params": {"alpha": "big"}}},
     "model.params"),
])
def test_config_errors_name_the_field(tmp_path, capsys, cfg, where):
    assert run(tmp_path, cfg) == 2
    assert where in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path):
    cfg = {"experiment": "abel", "seed": 0, "model": {"name": "expansive"},
           "simulation": {"n_paths": 2},
           "abel": {"deltas": [1.0], "probes": [{"x": [0.9]}]}}
    assert run(tmp_path, cfg) == 3


def test_seed_override(tmp_path, monkeypatch):
    cfg = {"experiment": "abel", "seed": 0, "model": {"name": "flipflop"},
           "simulation": {"n_paths": 50, "dt": 0.05},
           "abel": {"deltas": [1.0], "probes": [{"x": [0.0]}]}}
    run(tmp_path, cfg)
    a = (tmp_path / "out" / "abel.csv").read_bytes()
    monkeypatch.setenv("PDMP_SEED_OVERRIDE", "17")
    run(tmp_path, cfg)
    b = (tmp_path / "out" / "abel.csv").read_bytes()
    cfg["seed"] = 17
    monkeypatch.delenv("PDMP_SEED_OVERRIDE")
    run(tmp_path, cfg)
    assert a != b and b == (tmp_path / "out" / "abel.csv").read_bytes()


def test_solve_writes_policy_table(tmp_path):
    cfg = {"experiment": "solve", "seed": 0, "model": {"name": "phage"},
           "solve": {"delta": 0.5, "n": 2, "counts": 9, "levels": 3}}
    assert run(tmp_path, cfg) == 0
    out = tmp_path / "out"
    pol = json.loads((out / "greedy_policy.json").read_text())
    assert pol["kind"] == "FeedbackGrid" and pol["n"] == 2
    cfg2 = {"experiment": "abel", "seed": 0, "model": {"name": "phage"},
            "simulation": {"n_paths": 20},
            "policy": {"kind": "table", "path": str(out / "greedy_policy.json")},
            "abel": {"deltas": [0.5], "probes": [{"x": [5, 5]}]}}
    assert main(["run", "--config", write(tmp_path, cfg2, "b.json"), "--output-dir",
                 str(tmp_path / "out2")]) == 0


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, {"experiment": "validate", "seed": 0,
                           "model": {"name": "decay_1d"}, "validate": {"sample_count": 100}})
    proc = subprocess.run([sys.executable, "-m", "pdmpctl.cli", "run", "--config", cfg,
                           "--output-dir", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "overall: PASS" in proc.stdout


def test_trend_helpers():
    assert tauberian_trend([(0.5, 0.1, 0.01), (0.2, 0.11, 0.01), (0.1, 0.05, 0.01)])[0]
    assert not tauberian_trend([(0.5, 0.1, 0.001), (0.2, 0.2, 0.001)])[0]
    assert step_trend([(4, 0.01), (16, 0.0105), (64, 0.002), (256, 0.0)])[0]
    assert not step_trend([(4, 0.001), (16, 0.01), (256, 0.0)])[0]
