import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from fbsdelta import io as fio
from fbsdelta.cli import main, run
from fbsdelta.config import RunConfig, load, validate
from fbsdelta.fbsde_solver import residual
from fbsdelta.registry import TanhDrift
from fbsdelta.scenario_tree import BranchSpec, build_tree

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _write(tmp_path, cfg: dict, name="run.yaml") -> str:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def _main(tmp_path, cfg, *extra):
    out = tmp_path / "out"
    code = main(["--config", _write(tmp_path, cfg), "--out", str(out), *extra])
    return code, out


def test_storage_demo_files_and_kkt(tmp_path, capsys):
    code = main(["--config", str(CONFIGS / "storage_demo.yaml"), "--out", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert {"solution.csv", "adjoint.csv"} <= set(report["files"])
    assert report["results"]["kkt_residual"] <= 1e-8
    assert report["results"]["cross_check"]["state_gap"] <= 1e-9
    for name, digest in report["files"].items():
        assert fio.sha256_file(tmp_path / name) == digest
    printed = json.loads(capsys.readouterr().out)
    assert printed["report_hash"] == report["report_hash"]


def test_solve_zero_model_cost_is_initial_cost(tmp_path):
    cfg = {"command": "solve", "tree": {"horizon": 3},
           "model": {"name": "zero", "params": {"gamma_const": 0.5, "quad_weight": 1.0}}}
    code, out = _main(tmp_path, cfg)
    assert code == 0
    res = json.loads((out / "report.json").read_text())["results"]
    assert res["cost"] == 0.5
    assert res["residual_norm"] == 0.0


def test_check_mp_at_lq_optimum(tmp_path):
    cfg = {"command": "check-mp", "tree": {"horizon": 3},
           "model": {"name": "storage", "params": {"horizon": 3}},
           "control": {"kind": "lq-optimal"}, "numeric": {"seed": 3, "samples": 500}}
    code, out = _main(tmp_path, cfg)
    assert code == 0
    res = json.loads((out / "report.json").read_text())["results"]
    assert len(res["analytic"]) == 3
    assert all(abs(a) <= 1e-8 for a in res["analytic"])
    assert res["sufficiency"]["holds"]
    for s in range(3):
        rows = (out / f"variation_s{s}.csv").read_text().splitlines()
        assert rows[0] == "eps,J" and len(rows) == 8


def test_csv_round_trip_replays_residual(tmp_path):
    cfg = {"command": "solve", "tree": {"horizon": 3, "branches": [{"values": [2.0, -0.5], "probs": [0.2, 0.8]}]},
           "model": {"name": "tanh_drift", "params": {"n": 2, "m": 2}},
           "control": {"kind": "random", "scale": 0.5}, "numeric": {"seed": 5}}
    code, out = _main(tmp_path, cfg)
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    tree = build_tree(3, BranchSpec([(2.0, 0.2), (-0.5, 0.8)]))
    sol = fio.read_processes(out / "solution.csv", tree)
    u = fio.read_processes(out / "control.csv", tree)["u"]
    _, norm = residual(TanhDrift(n=2, m=2), tree, u, (sol["x"], sol["y"]))
    assert abs(norm - report["results"]["residual_norm"]) <= 1e-12


def test_csv_column_contract(tmp_path):
    cfg = {"command": "adjoint", "tree": {"horizon": 2}, "model": {"name": "sine_coupled", "params": {"n": 2}}}
    code, out = _main(tmp_path, cfg)
    assert code == 0
    header = (out / "solution.csv").read_text().splitlines()[0]
    assert header == "level,history,x0,x1,y0,y1"
    assert (out / "adjoint.csv").read_text().splitlines()[0] == "level,history,p0,p1,r0,r1"
    # u stops at level N-1, so its cells are blank on the leaves
    assert (out / "control.csv").read_text().splitlines()[-1] == "2,11,"


def test_json_format_embeds_trajectories(tmp_path):
    cfg = {"command": "solve", "tree": {"horizon": 2}, "model": {"name": "tanh_drift"}}
    code, out = _main(tmp_path, cfg, "--format", "json")
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["files"] == {}
    assert not (out / "solution.csv").exists()
    assert len(report["results"]["trajectories"]["solution"]["x"]) == 3


def test_determinism_and_seed_override(tmp_path):
    base = load(CONFIGS / "check_mp_tanh.yaml")
    r1 = run(RunConfig.from_dict(base), tmp_path / "a")
    r2 = run(RunConfig.from_dict(base), tmp_path / "b")
    assert r1["report_hash"] == r2["report_hash"]
    code, out = _main(tmp_path, base, "--seed", "12")
    assert code == 0
    r3 = json.loads((out / "report.json").read_text())
    assert r3["seed"] == 12 and r3["report_hash"] != r1["report_hash"]


def test_validate_examples():
    bad_prob = {"command": "solve", "tree": {"horizon": 2, "branches": [{"values": [1, -1], "probs": [0.45, 0.45]}]},
                "model": {"name": "zero"}}
    assert validate(bad_prob)[0].startswith("BadProbability at tree.branch[0]")
    zero_c4 = {"command": "lq-solve", "tree": {"horizon": 2}, "model": {"name": "storage", "params": {"C4": 0}}}
    assert any("C4 fails δ-positivity" in d for d in validate(zero_c4))
    assert validate(load(CONFIGS / "storage_demo.yaml")) == []
    assert validate(load(CONFIGS / "check_mp_tanh.yaml")) == []
    assert validate(load(CONFIGS / "check_assumptions_linear.yaml")) == []


def test_missing_seed_is_config_error(tmp_path, capsys):
    cfg = {"command": "check-mp", "tree": {"horizon": 2}, "model": {"name": "tanh_drift"}}
    code, out = _main(tmp_path, cfg)
    assert code == 2
    err = json.loads((out / "error.json").read_text())
    assert err["code"] == "ConfigError" and err["stage"] == "config"
    assert "numeric.seed" in err["message"]
    assert json.loads(capsys.readouterr().out) == err


def test_run_error_payload(tmp_path):
    cfg = {"command": "solve", "tree": {"horizon": 3}, "model": {"name": "tanh_drift"},
           "control": {"kind": "constant", "value": 2.0}, "numeric": {"max_iter": 1, "tol": 1e-15}}
    code, out = _main(tmp_path, cfg)
    assert code == 1
    err = json.loads((out / "error.json").read_text())
    assert err["code"] == "NonConvergence" and err["stage"] == "solve"
    assert err["witness"]["best_residual"] > 0


def test_control_outside_box_reports_witness(tmp_path):
    cfg = {"command": "solve", "tree": {"horizon": 2}, "model": {"name": "tanh_drift"},
           "control": {"kind": "constant", "value": 2.0}, "controls": {"lower": 0.0, "upper": 1.0}}
    code, out = _main(tmp_path, cfg)
    assert code == 1
    err = json.loads((out / "error.json").read_text())
    assert err["code"] == "ControlOutsideSet"
    assert err["witness"]["u"] == [2.0]


def test_validate_only_flag(tmp_path, capsys):
    assert main(["--config", str(CONFIGS / "storage_demo.yaml"), "--validate-only"]) == 0
    assert json.loads(capsys.readouterr().out) == {"diagnostics": []}


def test_check_assumptions_reports_margins(tmp_path):
    code = main(["--config", str(CONFIGS / "check_assumptions_linear.yaml"), "--out", str(tmp_path)])
    assert code == 0
    res = json.loads((tmp_path / "report.json").read_text())["results"]
    assert res["derivatives"]["max_error"] <= 1e-6
    assert res["well_posed_on_samples"] is True
    assert set(res["monotonicity"]["other_case"]) == {"Lambda", "Phi", "Gamma"}


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fbsdelta", "--config", str(CONFIGS / "storage_demo.yaml"),
                           "--out", str(tmp_path), "--format", "csv"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    report = json.loads((tmp_path / "report.json").read_text())
    assert "trajectories" not in report["results"]
    assert np.isclose(report["results"]["cost"], report["results"]["cross_check"]["generic_cost"], atol=1e-10)
