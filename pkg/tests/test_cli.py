import json

import numpy as np
import pytest

from tubempc.cli import main
from tubempc.config import ConfigError, ExperimentConfig


def base_config(out_dir, **overrides):
    cfg = {
        "model": {"name": "spring_mass_damper"},
        "problem": {
            "T": 1.0,
            "N": 4,
            "x0": [0.2, 0.0],
            "constraints": [{"h": [1.0, 0.0], "eta": 0.85}],
            "rho_u": 1.0,
        },
        "solver": {"seed": 0, "max_outer": 3, "inner_maxiter": 15,
                   "warmup_maxiter": 10, "conv_tol": 2e-6},
        "simulation": {"n_scenarios": 1, "sampling_period": 0.25},
        "propagate": {"mode": "openloop", "lambda": 1.0, "kappa": 1.0},
        "output_dir": str(out_dir),
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def write_config(tmp_path, cfg):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestConfig:
    def test_round_trip_idempotent(self, tmp_path):
        cfg = ExperimentConfig.from_dict(base_config(tmp_path / "out"))
        once = cfg.to_dict()
        twice = ExperimentConfig.from_dict(once).to_dict()
        assert once == twice
        assert (ExperimentConfig.from_dict(once).config_hash()
                == cfg.config_hash())

    def test_missing_seed_rejected(self, tmp_path):
        raw = base_config(tmp_path / "out")
        del raw["solver"]["seed"]
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(raw)

    def test_unknown_model_rejected(self, tmp_path):
        raw = base_config(tmp_path / "out")
        raw["model"]["name"] = "nope"
        with pytest.raises(ConfigError, match="unknown model"):
            ExperimentConfig.from_dict(raw)

    def test_unknown_keys_rejected(self, tmp_path):
        raw = base_config(tmp_path / "out")
        raw["problem"]["Tee"] = 1.0
        with pytest.raises(ConfigError, match="unknown keys"):
            ExperimentConfig.from_dict(raw)

    def test_constraint_rows_validated(self, tmp_path):
        raw = base_config(tmp_path / "out")
        raw["problem"]["constraints"] = [{"h": [1.0, 0.0]}]
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(raw)

    def test_manifest_written(self, tmp_path):
        cfg = ExperimentConfig.from_dict(base_config(tmp_path / "out"))
        manifest = cfg.write_manifest(str(tmp_path / "out"))
        assert manifest["seed"] == 0
        assert len(manifest["config_hash"]) == 64
        data = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert data["config_hash"] == cfg.config_hash()


class TestPropagateCommand:
    def test_openloop_writes_tube(self, tmp_path):
        cfg = base_config(tmp_path / "out", problem={"T": 0.5})
        code = main(["propagate", "--config", write_config(tmp_path, cfg)])
        assert code == 0
        body = np.loadtxt(tmp_path / "out" / "tube.csv", delimiter=",",
                          skiprows=1)
        assert body.shape == (5, 7)
        assert (tmp_path / "out" / "tube_boundary.csv").exists()
        assert (tmp_path / "out" / "manifest.json").exists()

    def test_matches_library_integration(self, tmp_path):
        from tubempc.bounders import compute_frobenius_constants
        from tubempc.ellipsoid import Ellipsoid
        from tubempc.models import spring_mass_damper
        from tubempc.tube import propagate_openloop

        cfg = base_config(tmp_path / "out", problem={"T": 0.5})
        main(["propagate", "--config", write_config(tmp_path, cfg)])
        body = np.loadtxt(tmp_path / "out" / "tube.csv", delimiter=",",
                          skiprows=1)
        m = spring_mass_damper()
        bd = compute_frobenius_constants(m, 50)
        tube = propagate_openloop(
            m, Ellipsoid(np.array([0.2, 0.0]), np.zeros((2, 2))),
            np.zeros((4, 1)), 0.5, 4, 1.0, 1.0, bd,
        )
        assert np.allclose(body[:, 1:3], tube.q, atol=1e-12)
        assert np.allclose(body[:, 3], tube.Q[:, 0, 0], atol=1e-12)

    def test_domain_violation_exit_code(self, tmp_path):
        cfg = base_config(tmp_path / "out",
                          problem={"x0": [1.15, 0.0], "T": 0.5, "N": 4})
        code = main(["propagate", "--config", write_config(tmp_path, cfg)])
        assert code == 2

    def test_params_file_round_trip(self, tmp_path):
        # frozen-policy propagation reproduces the library tube exactly
        from tubempc.bounders import compute_frobenius_constants
        from tubempc.models import spring_mass_damper
        from tubempc.tube import PolicyParams, integrate_tube

        N = 4
        params = PolicyParams(
            u_x=np.linspace(-0.5, 0.5, N)[:, None],
            gamma=np.full(N, 0.8), lam=np.full(N, 2.0), kappa=np.full(N, 2.0),
            S=np.tile(np.array([[0.05], [-0.4]]), (N, 1, 1)),
        )
        rows = [[k, params.u_x[k, 0], params.gamma[k], params.lam[k],
                 params.kappa[k], params.S[k, 0, 0], params.S[k, 1, 0]]
                for k in range(N)]
        pfile = tmp_path / "params.csv"
        np.savetxt(pfile, np.asarray(rows), delimiter=",",
                   header="k,u_0,gamma,lambda,kappa,S_0_0,S_1_0", comments="")
        cfg = base_config(tmp_path / "out",
                          propagate={"params_file": str(pfile)})
        cfg["problem"]["x0"] = [0.2, -0.1]
        code = main(["propagate", "--config", write_config(tmp_path, cfg)])
        assert code == 0
        body = np.loadtxt(tmp_path / "out" / "tube.csv", delimiter=",",
                          skiprows=1)
        m = spring_mass_damper()
        bd = compute_frobenius_constants(m, 50)
        tube = integrate_tube(m, np.array([0.2, -0.1]), np.zeros((2, 2)),
                              params, 1.0, N, bd)
        assert np.allclose(body[:, 1:3], tube.q, atol=1e-12)

    def test_malformed_config_exit_code(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["propagate", "--config", str(path)]) == 1

    def test_missing_model_name_exit_code(self, tmp_path):
        cfg = base_config(tmp_path / "out")
        cfg["model"] = {"name": "missing_model"}
        assert main(["propagate", "--config", write_config(tmp_path, cfg)]) == 1


class TestSolveCommand:
    def test_trivial_problem_converges(self, tmp_path):
        cfg = base_config(
            tmp_path / "out",
            model={"name": "spring_mass_damper",
                   "overrides": {"Q_w": [[0.0, 0.0], [0.0, 0.0]]}},
            problem={"x0": [0.0, 0.0], "T": 1.0, "N": 4, "constraints": [],
                     "rho_u": 1.0},
        )
        code = main(["solve", "--config", write_config(tmp_path, cfg)])
        assert code == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["converged"]
        assert report["objective_value"] <= 1e-6
        assert (tmp_path / "out" / "params.csv").exists()

    def test_infeasible_problem_exit_code(self, tmp_path):
        # the constraint contradicts the domain box: never satisfiable
        cfg = base_config(
            tmp_path / "out",
            problem={"x0": [0.2, 0.0], "T": 1.0, "N": 4,
                     "constraints": [{"h": [1.0, 0.0], "eta": -10.0}]},
            solver={"seed": 0, "max_outer": 2, "inner_maxiter": 5,
                    "warmup_maxiter": 0, "conv_tol": 2e-6},
        )
        code = main(["solve", "--config", write_config(tmp_path, cfg)])
        assert code == 3

    def test_seed_override_changes_manifest(self, tmp_path):
        cfg = base_config(tmp_path / "out",
                          model={"name": "spring_mass_damper",
                                 "overrides": {"Q_w": [[0.0, 0.0], [0.0, 0.0]]}},
                          problem={"x0": [0.0, 0.0], "T": 0.5, "N": 2,
                                   "constraints": [], "rho_u": 1.0})
        main(["solve", "--config", write_config(tmp_path, cfg), "--seed", "7"])
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["seed"] == 7


class TestSimulateAndCompare:
    def test_simulate_writes_scenarios(self, tmp_path):
        cfg = base_config(
            tmp_path / "out",
            problem={"x0": [0.2, 0.0], "T": 1.0, "N": 4, "constraints": [],
                     "rho_u": 1.0},
            simulation={"n_scenarios": 2, "sampling_period": 0.25,
                        "n_sub": 4},
        )
        code = main(["simulate", "--config", write_config(tmp_path, cfg)])
        assert code == 0
        a = np.loadtxt(tmp_path / "out" / "scenario_0000.csv", delimiter=",",
                       skiprows=1)
        assert a.shape[0] == 4 * 4 + 1
        assert (tmp_path / "out" / "scenario_0001.csv").exists()

    def test_simulate_deterministic(self, tmp_path):
        cfg = base_config(
            tmp_path / "out1",
            problem={"x0": [0.2, 0.0], "T": 1.0, "N": 4, "constraints": [],
                     "rho_u": 1.0},
        )
        main(["simulate", "--config", write_config(tmp_path, cfg)])
        cfg["output_dir"] = str(tmp_path / "out2")
        main(["simulate", "--config", write_config(tmp_path, cfg)])
        a = (tmp_path / "out1" / "scenario_0000.csv").read_text()
        b = (tmp_path / "out2" / "scenario_0000.csv").read_text()
        assert a == b

    def test_compare_summary(self, tmp_path):
        cfg = base_config(
            tmp_path / "out",
            problem={"x0": [0.2, 0.0], "T": 1.0, "N": 4,
                     "constraints": [{"h": [1.0, 0.0], "eta": 0.85}],
                     "rho_u": 1.0},
            simulation={"n_scenarios": 1, "sampling_period": 0.25,
                        "n_sub": 4},
        )
        code = main(["compare", "--config", write_config(tmp_path, cfg),
                     "--jobs", "1"])
        assert code == 0
        rows = json.loads(
            (tmp_path / "out" / "compare_summary.json").read_text())
        assert {r["controller"] for r in rows} == {
            "robust", "certainty-equivalent"}
        assert (tmp_path / "out" / "compare_summary.csv").exists()

    def test_invalid_sampling_period(self, tmp_path):
        cfg = base_config(tmp_path / "out",
                          simulation={"sampling_period": -1.0})
        assert main(["compare", "--config", write_config(tmp_path, cfg)]) == 1


class TestReportCommand:
    def test_reads_result_dir(self, tmp_path, capsys):
        cfg = base_config(tmp_path / "out")
        main(["propagate", "--config", write_config(tmp_path, cfg)])
        assert main(["report", "--out", str(tmp_path / "out")]) == 0
        out = capsys.readouterr().out
        assert "manifest.json" in out

    def test_empty_dir(self, tmp_path):
        assert main(["report", "--out", str(tmp_path)]) == 1
