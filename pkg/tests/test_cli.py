import csv
import json
import os

import numpy as np
import pytest

from chemoctrl.cli import main
from chemoctrl.sim import trajectory_from_dir

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def cfg_path(name):
    return os.path.join(CONFIGS, name)


def run(args):
    return main(args)


class TestConfigErrors:
    def test_missing_config_file(self, tmp_path):
        assert run(["simulate", str(tmp_path / "nope.json")]) == 2

    def test_missing_initial_condition_file(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({
            "grid": {"dims": [8]},
            "initial": {"u": {"csv": "missing_u0.csv"},
                        "v": {"preset": "constant", "value": 1.0}},
        }))
        assert run(["simulate", str(cfg)]) == 2
        assert "missing_u0.csv" in capsys.readouterr().err

    def test_bad_extension(self, tmp_path):
        cfg = tmp_path / "conf.yaml"
        cfg.write_text("{}")
        assert run(["simulate", str(cfg)]) == 2

    def test_sweep_without_cost_section(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"grid": {"dims": [8]}}))
        assert run(["sweep", str(cfg)]) == 2

    def test_desired_state_from_csv(self, tmp_path):
        from chemoctrl import Field, Grid, field_to_csv
        from chemoctrl.cli import load_config
        g = Grid.unit_box((8,))
        field_to_csv(Field.full(g, 1.25), tmp_path / "vd.csv")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "grid": {"dims": [8]},
            "cost": {"M": 1.0, "desired_v": {"csv": "vd.csv"}},
        }))
        loaded = load_config(str(cfg))
        assert loaded.cost.v_d.at(0.7, g) == pytest.approx(1.25)

    def test_desired_state_missing_csv(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "grid": {"dims": [8]},
            "cost": {"M": 1.0, "desired_v": {"csv": "absent.csv"}},
            "optimizer": {"max_iters": 1},
        }))
        assert run(["optimize", str(cfg)]) == 2
        assert "absent.csv" in capsys.readouterr().err


class TestSimulate:
    def test_equilibrium_audit_clean(self, tmp_path):
        out = str(tmp_path / "eq")
        assert run(["simulate", cfg_path("simulate_equilibrium.json"),
                    "--output", out]) == 0
        with open(os.path.join(out, "audit_summary.json")) as fh:
            summary = json.load(fh)
        assert summary["negative_u_cells"] == 0
        assert summary["negative_v_cells"] == 0
        assert summary["mass_step_drift_rel"] == 0.0
        assert summary["step_rejections"] == 0

    def test_exponential_growth_with_comparison(self, tmp_path):
        out = str(tmp_path / "exp")
        assert run(["simulate", cfg_path("simulate_exponential.json"),
                    "--output", out]) == 0
        traj = trajectory_from_dir(os.path.join(out, "trajectory"))
        lam, T = 0.8, float(traj.times[-1])
        dt = float(traj.dt_history[0])
        n = round(T / dt)
        discrete = (1.0 - dt * lam) ** (-n)
        assert traj.v[-1].max() == pytest.approx(discrete, rel=1e-12)
        assert abs(traj.v[-1].max() - np.exp(lam * T)) <= 2.0 * lam**2 * dt * np.exp(lam * T)
        with open(os.path.join(out, "audit_summary.json")) as fh:
            summary = json.load(fh)
        assert summary["comparison_pass"]

    def test_compare_subcommand(self, tmp_path):
        out = str(tmp_path / "cmp")
        assert run(["compare", cfg_path("simulate_equilibrium.json"),
                    "--output", out]) == 0
        with open(os.path.join(out, "audit_summary.json")) as fh:
            assert json.load(fh)["comparison_max_violation"] <= 1e-10


@pytest.fixture(scope="module")
def decay_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("decay"))
    assert run(["simulate", cfg_path("simulate_decay.toml"), "--output", out]) == 0
    return os.path.join(out, "trajectory")


class TestEnergyAudit:
    def test_dissipative_run_passes(self, decay_dir, tmp_path):
        out = str(tmp_path / "audit")
        code = run(["energy-audit", cfg_path("simulate_decay.toml"),
                    "--trajectory", decay_dir, "--beta", "0.001", "--K", "0.0",
                    "--output", out])
        assert code == 0
        assert os.path.exists(os.path.join(out, "energy_residual_pairs.csv"))
        with open(os.path.join(out, "energy_audit.json")) as fh:
            assert json.load(fh)["passed"] is True

    def test_equilibrium_zero_residual(self, tmp_path):
        sim_out = str(tmp_path / "eq")
        run(["simulate", cfg_path("simulate_equilibrium.json"), "--output", sim_out])
        out = str(tmp_path / "audit")
        code = run(["energy-audit", cfg_path("simulate_equilibrium.json"),
                    "--trajectory", os.path.join(sim_out, "trajectory"),
                    "--K", "0.0", "--output", out])
        assert code == 0
        with open(os.path.join(out, "energy_audit.json")) as fh:
            assert abs(json.load(fh)["worst_residual"]) <= 1e-12

    def test_adversarial_negative_K_fails(self, tmp_path):
        sim_out = str(tmp_path / "eq")
        run(["simulate", cfg_path("simulate_equilibrium.json"), "--output", sim_out])
        code = run(["energy-audit", cfg_path("simulate_equilibrium.json"),
                    "--trajectory", os.path.join(sim_out, "trajectory"),
                    "--K", "-1.0", "--output", str(tmp_path / "audit")])
        assert code == 1

    def test_alpha_sweep_diagnostic(self, decay_dir, tmp_path):
        out = str(tmp_path / "audit")
        code = run(["energy-audit", cfg_path("simulate_decay.toml"),
                    "--trajectory", decay_dir, "--alpha-sweep", "0.05", "0.1",
                    "0.2", "--output", out])
        assert code == 0
        with open(os.path.join(out, "alpha_sweep.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["alpha"]) for r in rows] == [0.05, 0.1, 0.2]
        assert all(np.isfinite(float(r["worst_residual"])) for r in rows)

    def test_malformed_trajectory_is_data_error(self, tmp_path):
        broken = tmp_path / "broken"
        broken.mkdir()
        (broken / "manifest.json").write_text("{oops")
        code = run(["energy-audit", cfg_path("simulate_decay.toml"),
                    "--trajectory", str(broken), "--output", str(tmp_path / "a")])
        assert code == 3


class TestOptimize:
    def test_bundled_instance(self, tmp_path):
        out = str(tmp_path / "opt")
        assert run(["optimize", cfg_path("optimize_small.json"),
                    "--output", out]) == 0
        with open(os.path.join(out, "trace.csv")) as fh:
            rows = list(csv.DictReader(fh))
        accepted = [float(r["J"]) for r in rows if r["accepted"] == "1"]
        assert len(accepted) >= 2
        assert accepted[-1] < accepted[0]  # strictly below the baseline
        norms = [float(r["control_norm"]) for r in rows]
        assert max(norms) <= 3.0 + 1e-12
        with open(os.path.join(out, "admissibility.json")) as fh:
            adm = json.load(fh)
        assert adm["in_ball"] is True
        assert adm["passed"] is True
        assert os.path.exists(os.path.join(out, "best_control.csv"))

    def test_infeasible_baseline_exit_code(self, tmp_path):
        # a concentration spike steep enough that even the uncontrolled run
        # underflows the adaptive step floor
        cfg = tmp_path / "stiff.json"
        cfg.write_text(json.dumps({
            "grid": {"dims": [16]},
            "model": {"s": 1.0, "t_final": 0.4},
            "initial": {"u": {"preset": "constant", "value": 1.0},
                        "v": {"preset": "gaussian", "amplitude": 1e13,
                              "width": 0.15}},
            "sim": {"dt_max": 0.05},
            "cost": {"M": 1.0},
            "optimizer": {"max_iters": 1, "basis": [1, 1], "control_times": 2},
        }))
        assert run(["optimize", str(cfg), "--output", str(tmp_path / "o")]) == 4

    def test_byte_identical_reruns(self, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = str(tmp_path / tag)
            assert run(["optimize", cfg_path("optimize_small.json"),
                        "--output", out]) == 0
            outs.append(out)
        for name in ("trace.csv", "best_control.csv", "best_objective.json"):
            with open(os.path.join(outs[0], name), "rb") as fh:
                first = fh.read()
            with open(os.path.join(outs[1], name), "rb") as fh:
                second = fh.read()
            assert first == second


class TestSweep:
    def test_table_monotone(self, tmp_path):
        out = str(tmp_path / "sweep")
        assert run(["sweep", cfg_path("optimize_small.json"),
                    "--m-values", "0.5", "1.0", "2.0", "--output", out]) == 0
        with open(os.path.join(out, "m_sweep.csv")) as fh:
            rows = list(csv.DictReader(fh))
        J = np.array([float(r["J"]) for r in rows])
        assert np.all(np.diff(J) <= 1e-7 * np.maximum(J[:-1], 1e-300))
