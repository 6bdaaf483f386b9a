"""Experiment configuration, recipes and the command-line harness."""

import json
import subprocess
import sys

import numpy as np
import pytest

from mpimc.cli import EXIT_CONFIG, EXIT_IO, EXIT_NOT_CONVERGED, EXIT_OK, main
from mpimc.errors import ConfigError
from mpimc.experiments import (
    ExperimentConfig,
    gene_network_from_covariances,
    load_config,
    run_scalar_mult,
    run_solve_model,
)
from mpimc.pcm_device import NoiseModel
from mpimc.problems import (
    random_sparse_precision,
    sample_gaussian_cohort,
    write_expression_csv,
)
from mpimc.rng import derive_rng, derive_seed


class TestRng:
    def test_reproducible_and_independent(self):
        a = derive_rng(7, "read", 12).random(5)
        assert np.array_equal(a, derive_rng(7, "read", 12).random(5))
        assert not np.array_equal(a, derive_rng(7, "read", 13).random(5))
        assert not np.array_equal(a, derive_rng(8, "read", 12).random(5))
        assert derive_seed(7, "x") == derive_seed(7, "x") != derive_seed(7, "y")

    def test_negative_key(self):
        with pytest.raises(ValueError):
            derive_rng(1, -1)


class TestConfig:
    def test_toml_and_json(self, tmp_path):
        toml = tmp_path / "c.toml"
        toml.write_text('kind = "solve-model"\nseed = 3\n[solver]\nK = 2\nm = 7\n'
                        '[problem]\nn = 40\n[noise]\nsigma_prog = 0.5\n')
        cfg = load_config(toml)
        assert (cfg.kind, cfg.seed, cfg.solver.K, cfg.solver.m, cfg.problem.n) == \
            ("solve-model", 3, 2, 7, 40)
        assert cfg.noise.sigma_prog == 0.5
        js = tmp_path / "c.json"
        js.write_text(json.dumps(cfg.to_dict()))
        assert load_config(js).to_dict() == cfg.to_dict()

    def test_gene_network_solver_defaults(self):
        cfg = ExperimentConfig.default("gene-network")
        assert cfg.solver.inner == "gmres" and cfg.solver.tol == 1e-3

    @pytest.mark.parametrize("changes", [
        {"solver": {"tol": 0}},
        {"solver": {"inner": "bicg"}},
        {"solver": {"m": 0}},
        {"problem": {"k_values": []}},
        {"problem": {"pairs": 0}},
    ])
    def test_validation(self, changes):
        with pytest.raises(ConfigError):
            ExperimentConfig.default("scalar-mult", **changes).validate()

    def test_unknown_fields(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.default("solve-model", solver={"tolerance": 1})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"kind": "nope"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"kind": "scalar-mult"}, "solve-model")

    def test_budget_message(self):
        cfg = ExperimentConfig.default("solve-model", problem={"n": 600}, solver={"K": 4})
        with pytest.raises(ConfigError, match="1,440,000 devices but the array budget is 1,000,000"):
            cfg.validate()
        ExperimentConfig.default("solve-model", problem={"n": 500}, solver={"K": 4}).validate()

    def test_missing_expression_file(self, tmp_path):
        cfg = ExperimentConfig.default("gene-network",
                                       problem={"expression_csv": str(tmp_path / "none.csv")})
        with pytest.raises(ConfigError, match="not found"):
            cfg.validate()


class TestScalarMult:
    def test_slope(self):
        rep = run_scalar_mult(ExperimentConfig.default("scalar-mult", seed=1,
                                                        problem={"repeats": 3}))
        assert rep["k_values"] == [1, 2, 4, 8, 16]
        assert -0.55 <= rep["slope"] <= -0.45
        assert len(rep["histograms"]["4"]) == 41

    def test_noise_off(self):
        cfg = ExperimentConfig.default("scalar-mult")
        cfg.noise = cfg.noise.without_noise()
        rep = run_scalar_mult(cfg)
        assert max(rep["max_abs_error"]) < 1e-10

    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            run_scalar_mult(ExperimentConfig.default("scalar-mult", seed=9,
                                                     out=str(tmp_path / d)))
        for name in ("summary.json", "std_table.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestSolveModel:
    def test_exact_single_refinement(self):
        """Noise-free matvec and 50 inner CG steps: one refinement reaches tol."""
        cfg = ExperimentConfig.default("solve-model", solver={"analog": False, "m": 50,
                                                              "inner": "cg"})
        s = run_solve_model(cfg)
        run = s["runs"][0]
        assert run["converged"] and run["refinements"] == 1
        assert run["analog_matvecs"] == 50
        assert s["baseline_cg_iterations_residual"] < 50

    def test_outputs(self, tmp_path):
        cfg = ExperimentConfig.default("solve-model", out=str(tmp_path),
                                       problem={"n": 60, "repeats": 2}, solver={"K": 2})
        s = run_solve_model(cfg)
        assert s["all_converged"]
        files = sorted(p.name for p in tmp_path.iterdir())
        assert files == ["config.json", "summary.json", "trace_000.csv", "trace_000.json",
                         "trace_001.csv", "trace_001.json"]
        tr = json.loads((tmp_path / "trace_001.json").read_text())
        assert tr["meta"]["repeat"] == 1 and tr["meta"]["device_count"] == 2 * 60 * 60
        assert tr["records"][-1]["residual_norm"] < 1e-5


class TestGeneNetwork:
    def test_identity_covariance_no_edges(self):
        cfg = ExperimentConfig.default("gene-network")
        ids = [f"G{i}" for i in range(6)]
        res = gene_network_from_covariances({"normal": np.eye(6), "cancer": np.eye(6)},
                                            cfg, ids)
        assert not res["failed"]
        assert res["networks"]["cancer"].edges == []

    def test_synthetic_cohorts(self, tmp_path):
        P = random_sparse_precision(12, 2, n_edges=14)
        normal = sample_gaussian_cohort(P, 1500, 1, cohort="normal")
        cancer = sample_gaussian_cohort(P, 1200, 2, cohort="cancer")
        X = normal
        X.values = np.vstack([normal.values, cancer.values])
        X.cohorts = np.concatenate([normal.cohorts, cancer.cohorts])
        csv_path = tmp_path / "expr.csv"
        write_expression_csv(csv_path, X)
        groups = tmp_path / "groups.json"
        groups.write_text(json.dumps({"KO_A": ["G01", "G02", "G03"], "KO_B": ["G04"]}))
        out = tmp_path / "run"
        code = main(["gene-network", "--out", str(out), "--config", str(self._cfg(
            tmp_path, csv_path, groups))])
        assert code == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert summary["converged"] and summary["samples"] == {"normal": 1200, "cancer": 1200}
        net = json.loads((out / "network_cancer.json").read_text())
        assert {n["id"]: n["group"] for n in net["nodes"]}["G02"] == "KO_A"
        assert all(abs(e["weight"]) > net["threshold"] for e in net["edges"])
        assert (out / "rho_normal.csv").exists() and (out / "traces_cancer.csv").exists()

    @staticmethod
    def _cfg(tmp_path, csv_path, groups):
        path = tmp_path / "gn.toml"
        path.write_text(f'kind = "gene-network"\nseed = 4\n[problem]\n'
                        f'expression_csv = "{csv_path}"\ngroups_json = "{groups}"\n')
        return path


class TestCli:
    def test_missing_config_is_io_error(self):
        assert main(["solve-model", "--config", "/nonexistent.toml"]) == EXIT_IO

    def test_bad_config_exit(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text('[solver]\ntol = -1\n')
        assert main(["solve-model", "--config", str(p)]) == EXIT_CONFIG

    def test_io_error_exit(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["scalar-mult", "--out", str(blocker / "sub")]) == EXIT_IO

    def test_nonconvergence_exit(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"solver": {"max_refinements": 1}, "problem": {"n": 50}}))
        assert main(["solve-model", "--config", str(p), "--out", str(tmp_path / "o")]) \
            == EXIT_NOT_CONVERGED
        # the trace is kept even though the solve failed
        assert (tmp_path / "o" / "trace_000.csv").exists()

    def test_noise_off_and_seed(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"problem": {"n": 40}, "solver": {"K": 1}}))
        assert main(["solve-model", "--config", str(p), "--noise-off", "--seed", "5"]) == EXIT_OK
        out = capsys.readouterr().out
        summary = json.loads(out[out.index("{"):])
        assert summary["all_converged"]

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "mpimc", "scalar-mult", "--noise-off",
                               "--out", str(tmp_path)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "slope" in proc.stdout
        assert (tmp_path / "std_table.csv").exists()

    def test_default_noise_is_documented(self):
        # the CLI default noise block is the library default
        assert ExperimentConfig.default("solve-model").noise == NoiseModel()
