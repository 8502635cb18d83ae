import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from tumorctl import measures
from tumorctl.cli import main
from tumorctl.config import ConfigError, load_config

BASE_CONFIG = """
[model]
beta_v = 1.8
beta_alpha = 0.9
cost_c = 0.9
n_neighbors = 1
vop_benefit_factor = 1.0
sigma_g = 0.15
sigma_d = 0.15
sigma_v = 0.15
stabilization_weight_e = 0.5
failure_penalty_M = 100.0
u_max = 2.0
x2_success = 0.35
x2_fail = 0.9

[grid]
horizon_t = 0.5
k_steps = 16

[coupling]
kind = "zero"

[pic]
k_steps = 16
n_rollouts = 32
temperature_lambda = 0.1
proposal_std = 0.3
n_iterations = 1
warmup_iterations = 2

[hjb]
nx1 = 33
nx2 = 33

[io]
out_dir = "OUTDIR"
run_label = "demo"
n_samples = 12
n_trajectories = 2
x1_0 = 0.5
x2_0 = 0.6

[seed]
master_seed = 42
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(BASE_CONFIG.replace("OUTDIR", str(tmp_path / "out")))
    return path


def read_tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


# --- config parsing -----------------------------------------------------------

def test_load_config_round_trip(config_file):
    cfg = load_config(config_file)
    assert cfg.model.u_max == 2.0
    assert cfg.grid.k_steps == 16
    assert cfg.coupling.is_zero
    assert cfg.pic.n_rollouts == 32
    assert cfg.io.n_samples == 12
    assert cfg.master_seed == 42


def test_load_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[model]\nbeta_vee = 1.0\n")
    with pytest.raises(ConfigError, match="unknown keys"):
        load_config(path)


def test_load_config_rejects_unknown_section(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[plotting]\nx = 1\n")
    with pytest.raises(ConfigError, match="sections"):
        load_config(path)


def test_load_config_rejects_invalid_values(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[model]\nu_max = -1.0\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("[grid]\nhorizon_t = 0.0\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("not toml :::\n")
    with pytest.raises(ConfigError, match="TOML"):
        load_config(path)


# --- subcommands ------------------------------------------------------------------

def test_simulate_writes_report_and_trajectories(config_file, tmp_path, capsys):
    assert main(["simulate", "--config", str(config_file)]) == 0
    out = tmp_path / "out"
    report = json.loads((out / "demo_simulate_report.json").read_text())
    assert set(report) == {"mean_cost", "std_error", "n_samples", "failure_rate",
                           "success_rate", "mean_dose_integral"}
    assert report["n_samples"] == 12
    assert (out / "demo_traj_000.csv").exists()
    assert (out / "demo_traj_001.csv").exists()
    assert "simulate:" in capsys.readouterr().out


def test_simulate_zero_policy_floor(config_file, tmp_path):
    # binary-exact grid (k = 16, t = 0.5, e = 0.5) and always-success
    # thresholds give mean cost exactly e*t
    text = config_file.read_text().replace("x2_success = 0.35", "x2_success = 1.0")
    text = text.replace("x2_fail = 0.9", "x2_fail = 1.0")
    config_file.write_text(text)
    assert main(["simulate", "--config", str(config_file)]) == 0
    report = json.loads((tmp_path / "out" / "demo_simulate_report.json").read_text())
    assert report["mean_cost"] == 0.25


def test_cli_outputs_byte_identical_across_threads_and_reruns(config_file, tmp_path):
    trees = []
    for threads in ("1", "2", "8"):
        out = tmp_path / f"t{threads}"
        for cmd in (
            ["simulate", "--config", str(config_file), "--policy", "threshold:0.5,0.0,1.0"],
            ["evaluate", "--config", str(config_file), "--policy", "mppi"],
            ["control", "--config", str(config_file)],
            ["hjb", "--config", str(config_file)],
        ):
            assert main(cmd + ["--out", str(out), "--threads", threads]) == 0
        trees.append(read_tree(out))
    assert trees[0] == trees[1] == trees[2]


def test_evaluate_policies(config_file, tmp_path):
    for policy in ("zero", "constant:0.5", "threshold:0.5,0.1,1.0", "mppi"):
        assert main(["evaluate", "--config", str(config_file), "--policy", policy]) == 0
    report = json.loads((tmp_path / "out" / "demo_evaluate_report.json").read_text())
    assert report["n_samples"] == 12


def test_evaluate_hjb_policy_from_exported_grid(config_file, tmp_path):
    out = tmp_path / "out"
    assert main(["hjb", "--config", str(config_file)]) == 0
    grid_csv = out / "demo_value_grid.csv"
    assert grid_csv.exists()
    assert main(["evaluate", "--config", str(config_file), "--policy", f"hjb:{grid_csv}"]) == 0


def test_control_outputs(config_file, tmp_path):
    assert main(["control", "--config", str(config_file)]) == 0
    out = tmp_path / "out"
    plan = (out / "demo_plan.csv").read_text().strip().split("\n")
    assert plan[0] == "step,s,u"
    assert len(plan) == 17
    diag = json.loads((out / "demo_plan_diagnostics.json").read_text())
    assert diag["horizon"] == 16
    fb = json.loads((out / "demo_feedback_diagnostics.json").read_text())
    assert "total_cost" in fb and len(fb["steps"]) == 16


def test_hjb_scope_error_with_live_coupling(config_file):
    text = config_file.read_text().replace('kind = "zero"', 'kind = "mean_x2"')
    config_file.write_text(text)
    assert main(["hjb", "--config", str(config_file)]) == 3


def test_stability_exit_code(config_file):
    text = config_file.read_text().replace("nx2 = 33", "nx2 = 33\nnt_solve = 16")
    config_file.write_text(text)
    assert main(["hjb", "--config", str(config_file)]) == 4


def test_bad_config_exit_code(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[model]\nbogus = 3\n")
    assert main(["simulate", "--config", str(path)]) == 2


def test_bad_policy_exit_code(config_file):
    assert main(["simulate", "--config", str(config_file), "--policy", "nope"]) == 2
    assert main(["simulate", "--config", str(config_file), "--policy", "constant:9.9"]) == 2


def test_seed_override_changes_outputs(config_file, tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    pol = ["--policy", "threshold:0.5,0.0,1.0"]
    assert main(["simulate", "--config", str(config_file), "--out", str(out_a)] + pol) == 0
    assert main(["simulate", "--config", str(config_file), "--out", str(out_b), "--seed", "7"] + pol) == 0
    ra = (out_a / "demo_simulate_report.json").read_text()
    rb = (out_b / "demo_simulate_report.json").read_text()
    assert ra != rb


def test_wasserstein_identity_and_symmetry(tmp_path, capsys):
    rng = np.random.default_rng(2)
    m = measures.empirical_from_samples(rng.uniform(0, 1, 6))
    n = measures.empirical_from_samples(rng.uniform(0, 1, 4))
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    measures.write_measure_csv(m, pa)
    measures.write_measure_csv(n, pb)

    assert main(["wasserstein", str(pa), str(pa), "--rho", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["distance"] == 0.0

    assert main(["wasserstein", str(pa), str(pb), "--rho", "1"]) == 0
    d_ab = json.loads(capsys.readouterr().out)["distance"]
    assert main(["wasserstein", str(pb), str(pa), "--rho", "1"]) == 0
    d_ba = json.loads(capsys.readouterr().out)["distance"]
    assert d_ab == pytest.approx(d_ba, abs=1e-12)
    # closed form agrees with the LP solver route
    assert d_ab == pytest.approx(measures.wasserstein_lp(1, m, n), abs=1e-9)


def test_wasserstein_coupling_flag(tmp_path, capsys):
    m = measures.empirical_from_samples([(0.0, 0.0), (1.0, 1.0)])
    pa = tmp_path / "m.csv"
    measures.write_measure_csv(m, pa)
    assert main(["wasserstein", str(pa), str(pa), "--rho", "2", "--show-coupling"]) == 0
    out = json.loads(capsys.readouterr().out)
    plan = np.array(out["coupling"])
    assert plan.shape == (2, 2)
    assert np.allclose(plan.sum(axis=1), 0.5)


def test_wasserstein_malformed_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,weight\noops,1.0\n")
    good = tmp_path / "good.csv"
    measures.write_measure_csv(measures.empirical_from_samples([0.0]), good)
    assert main(["wasserstein", str(bad), str(good)]) == 2


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "tumorctl.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "simulate" in proc.stdout
