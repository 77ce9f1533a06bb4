import csv
import json

import numpy as np
import pytest
from scipy.stats import norm

from infonewton.core import InvalidConfigError, validate_model
from infonewton.harness.blr import (
    BLRDataset,
    build_blr_posterior,
    load_csv_dataset,
    predictive_metrics,
    synthetic_dataset,
)
from infonewton.harness.cli import main
from infonewton.harness.experiment import (
    PRESETS,
    build_config,
    gaussian_oracle,
    grid_experiment,
    load_config,
    parse_config_text,
    preset_config,
    run_experiment,
)
from infonewton.harness.metrics import (
    EnergyDistance,
    energy_distance,
    grid_reference_samples,
    langevin_reference,
    mean_pairwise_distance,
    moment_errors,
)
from infonewton.harness.targets import TARGETS, build_target
from infonewton.gaussian import closed_form_1d

CONFIGS = sorted((__import__("pathlib").Path(__file__).resolve().parents[1] / "configs").glob("*.cfg"))


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfigParsing:
    def test_values_and_comments(self):
        out = parse_config_text("# header\nn = 50  # particles\nname = abc\nlist = 1, 2.5\nflag = true\nx = none\n")
        assert out == {"n": 50, "name": "abc", "list": [1, 2.5], "flag": True, "x": None}

    def test_missing_equals(self):
        with pytest.raises(InvalidConfigError, match="line 2"):
            parse_config_text("n = 1\nbroken\n")

    def test_preset_defaults(self):
        cfg = preset_config("double-well")
        assert cfg.n == 100 and cfg.max_iter == 20
        assert cfg.methods["wgf"].step_size == 0.01
        assert cfg.methods["wnewton-a"].step_size == 1.0
        assert cfg.snapshots == (2, 5, 10, 20)

    def test_method_override_and_subset(self):
        cfg = build_config({"target": "double-well", "methods": ["wgf"], "wgf.step_size": 0.05, "max_iter": 3})
        assert list(cfg.methods) == ["wgf"]
        assert cfg.methods["wgf"].step_size == 0.05
        assert cfg.methods["wgf"].max_iter == 3

    @pytest.mark.parametrize("entries", [
        {"n": 10},
        {"target": "double-well", "bogus": 1},
        {"target": "double-well", "nosuch.step_size": 1.0},
        {"target": "double-well", "wgf.bogus": 1.0},
        {"target": "gaussNd", "methods": ["svgd"]},
        {"target": "double-well", "reference": "magic"},
    ])
    def test_invalid(self, entries):
        with pytest.raises(InvalidConfigError):
            build_config(entries)

    @pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
    def test_repo_configs_load(self, path):
        cfg = load_config(path)
        assert cfg.target in TARGETS
        assert len(cfg.methods) >= 2

    def test_unreadable_config(self, tmp_path):
        with pytest.raises(InvalidConfigError):
            load_config(tmp_path / "missing.cfg")

    def test_overrides_win(self):
        cfg = load_config(CONFIGS[0], {"seed": 7, "n": 12})
        assert cfg.seed == 7 and cfg.n == 12


class TestTargets:
    def test_double_well_origin(self):
        m = build_target("double-well")
        assert m.grad([[0.0]])[0, 0] == 0.0
        assert m.hess([[0.0]])[0, 0, 0] == -2.0
        assert m.f([[0.0]])[0] == 0.5

    def test_gauss1d(self):
        x = np.linspace(-3, 3, 7)[:, None]
        m = build_target("gauss1d")
        np.testing.assert_allclose(m.f(x) - m.f([[0.0]]), 0.5 * x[:, 0] ** 2, atol=1e-14)

    def test_unknown(self):
        with pytest.raises(InvalidConfigError, match="unknown target"):
            build_target("banana")

    def test_bad_params(self):
        with pytest.raises(InvalidConfigError):
            build_target("double-well", {"radius": 2.0})

    @pytest.mark.parametrize("name", ["gauss1d", "double-well", "bimodal2d", "double-banana"])
    def test_models_pass_validation(self, name):
        m = build_target(name)
        probes = np.random.default_rng(42).normal(size=(16, m.dim))
        assert validate_model(m, probes).ok(1e-5)

    def test_gauss_newton_banana_gradient_exact(self):
        m = build_target("double-banana", {"gauss_newton": True})
        probes = np.random.default_rng(42).normal(size=(16, 2))
        assert validate_model(m, probes).gradient_error <= 1e-5

    def test_blr_synthetic_gradient(self):
        m = build_target("blr-synthetic", {"batch_size": None, "n_train": 100, "n_test": 10})
        probes = np.random.default_rng(42).normal(size=(8, 5))
        assert validate_model(m, probes).ok(1e-5)


class TestBLR:
    def test_labels_validated(self):
        with pytest.raises(InvalidConfigError):
            BLRDataset(np.zeros((2, 1)), np.array([0.0, 2.0]), np.zeros((1, 1)), np.array([1.0]))

    def test_missing_features(self):
        with pytest.raises(InvalidConfigError):
            BLRDataset(np.array([[np.nan]]), np.array([1.0]), np.zeros((1, 1)), np.array([1.0]))

    def test_zero_features_is_prior(self):
        data = BLRDataset(np.zeros((20, 3)), np.tile([0.0, 1.0], 10), np.zeros((4, 3)), np.array([0.0, 1, 0, 1]))
        m = build_blr_posterior(data, prior_scale=2.0, batch_size=None)
        w = np.random.default_rng(42).normal(size=(5, 3))
        np.testing.assert_allclose(m.grad(w), w / 4.0, rtol=1e-14)
        np.testing.assert_allclose(m.hess(w), np.broadcast_to(np.eye(3) / 4.0, (5, 3, 3)), rtol=1e-14)

    def test_map_matches_grid_search(self):
        x = np.array([[1.0, 0.5], [2.0, 1.0], [0.5, 2.0], [-1.0, -0.5], [-2.0, 0.3], [-0.3, -1.5]])
        y = np.array([1.0, 1, 1, 0, 0, 0])
        m = build_blr_posterior(BLRDataset(x, y, x, y), prior_scale=1.0, batch_size=None)
        w = np.zeros((1, 2))
        for _ in range(50):
            w = w - np.linalg.solve(m.hess(w)[0], m.grad(w)[0])[None]
        # coarse grid, then a fine grid around the best coarse point
        best = np.zeros(2)
        for half, pts in ((5.0, 201), (0.1, 401)):
            g = np.linspace(-half, half, pts)
            G = np.stack(np.meshgrid(best[0] + g, best[1] + g, indexing="ij"), -1).reshape(-1, 2)
            best = G[np.argmin(m.f(G))]
        np.testing.assert_allclose(w[0], best, atol=1e-3)

    def test_full_batch_gradient(self):
        data = synthetic_dataset(n_train=50, n_test=10, seed=42)
        full = build_blr_posterior(data, batch_size=None)
        batched = build_blr_posterior(data, batch_size=50)
        assert batched.refresh is None
        w = np.random.default_rng(42).normal(size=(4, 5))
        np.testing.assert_allclose(batched.grad(w), full.grad(w), rtol=1e-14)

    def test_minibatch_scaling_unbiased(self):
        data = synthetic_dataset(n_train=60, n_test=10, seed=42)
        m = build_blr_posterior(data, batch_size=20, seed=3)
        w = np.random.default_rng(42).normal(size=(1, 5))
        mean = np.mean([m.refresh(k).grad(w)[0] for k in range(3000)], axis=0)
        np.testing.assert_allclose(mean, m.grad(w)[0], atol=0.25)

    def test_minibatch_deterministic(self):
        data = synthetic_dataset(n_train=60, n_test=10, seed=42)
        w = np.ones((1, 5))
        a = build_blr_posterior(data, batch_size=10, seed=3).refresh(4).grad(w)
        b = build_blr_posterior(data, batch_size=10, seed=3).refresh(4).grad(w)
        np.testing.assert_array_equal(a, b)

    def test_empty_batch(self):
        with pytest.raises(InvalidConfigError):
            build_blr_posterior(synthetic_dataset(n_train=10, n_test=5), batch_size=0)

    def test_hessian_spd(self):
        m = build_blr_posterior(synthetic_dataset(n_train=100, n_test=5, seed=42), batch_size=None)
        H = m.hess(np.random.default_rng(42).normal(scale=3, size=(10, 5)))
        assert np.all(np.linalg.eigvalsh(H) >= 1.0 - 1e-12)

    def test_zero_weights_balanced(self):
        x = np.random.default_rng(42).normal(size=(10, 3))
        y = np.tile([0.0, 1.0], 5)
        out = predictive_metrics(np.zeros((4, 3)), x, y)
        assert out["test_accuracy"] == 0.5
        assert out["test_loglik"] == pytest.approx(np.log(0.5), rel=1e-14)

    def test_csv_ingestion(self, tmp_path):
        path = tmp_path / "data.csv"
        rows = ["a,b,label"] + [f"{i},{-i},{i % 2}" for i in range(10)]
        path.write_text("\n".join(rows) + "\n")
        data = load_csv_dataset(path, test_fraction=0.2, seed=42)
        assert data.x_train.shape == (8, 2) and data.x_test.shape == (2, 2)
        np.testing.assert_array_equal(data.x_train[:, 0] % 2, data.y_train)

    @pytest.mark.parametrize("body", ["a,label\n1,0\n,1\n", "a,label\n1,0\nx,1\n", "a,label\n", "a,label\n1,3\n"])
    def test_csv_rejects(self, tmp_path, body):
        path = tmp_path / "bad.csv"
        path.write_text(body)
        with pytest.raises(InvalidConfigError):
            load_csv_dataset(path)


class TestMetrics:
    def test_pairwise_sorted_identity(self):
        a = np.random.default_rng(42).normal(size=(300, 1))
        brute = np.abs(a - a.T).mean()
        assert mean_pairwise_distance(a) == pytest.approx(brute, rel=1e-12)

    def test_self_distance_zero(self):
        a = np.random.default_rng(42).normal(size=(200, 2))
        assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_same_law_small(self):
        rng = np.random.default_rng(42)
        assert energy_distance(rng.normal(size=(2000, 1)), rng.normal(size=(2000, 1))) < 5e-3

    def test_shifted_gaussians_monte_carlo(self):
        rng = np.random.default_rng(42)
        x = rng.normal(0.0, 1.0, size=(4000, 1))
        y = rng.normal(3.0, 1.0, size=(4000, 1))
        # Monte Carlo oracle from independent pairs
        a, b, c = rng.normal(size=10**6), rng.normal(3.0, 1.0, size=10**6), rng.normal(size=10**6)
        oracle = 2 * np.mean(np.abs(a - b)) - 2 * np.mean(np.abs(a - c))
        assert energy_distance(x, y) == pytest.approx(oracle, rel=0.02)
        # sanity on the oracle via the folded-normal mean
        exact = 2 * (np.sqrt(2) * np.sqrt(2 / np.pi) * np.exp(-9 / 4) + 3 * (1 - 2 * norm.cdf(-3 / np.sqrt(2))))
        exact -= 2 * np.sqrt(2) * np.sqrt(2 / np.pi)
        assert oracle == pytest.approx(exact, rel=0.01)

    def test_cached_reference(self):
        rng = np.random.default_rng(42)
        ref, x = rng.normal(size=(500, 2)), rng.normal(size=(50, 2))
        assert EnergyDistance(ref)(x) == pytest.approx(energy_distance(x, ref), rel=1e-12)

    def test_moment_errors(self):
        ref = np.random.default_rng(42).normal(size=(1000, 2))
        out = moment_errors(ref + [3.0, 4.0], ref)
        assert out["mean_error"] == pytest.approx(5.0, rel=1e-12)
        assert out["cov_error"] == pytest.approx(0.0, abs=1e-12)

    def test_grid_reference_gaussian(self):
        s = grid_reference_samples(build_target("gauss1d"), 20_000, 42, [(-8, 8)])
        assert abs(s.mean()) < 0.03 and abs(s.var() - 1) < 0.05

    def test_grid_reference_2d_and_dim_error(self):
        s = grid_reference_samples(build_target("gaussNd"), 5000, 42, [(-6, 6), (-6, 6)], points=401)
        assert s.shape == (5000, 2) and np.all(np.abs(s.mean(axis=0)) < 0.06)
        with pytest.raises(InvalidConfigError):
            grid_reference_samples(build_target("gaussNd", {"mean": [0, 0, 0], "cov": 1.0}), 10, 0, [(-1, 1)] * 3)

    def test_langevin_reference(self):
        m = build_target("gauss1d", {"mean": 1.0, "var": 2.0})
        s = langevin_reference(m.grad, np.zeros((50, 1)), 3000, 0.01, 42, burn_in=500, thin=5)
        assert s.shape == (50 * 500, 1)
        assert abs(s.mean() - 1.0) < 0.1 and abs(s.var() - 2.0) < 0.2


def _small_cfg(tmp_path, **kw):
    entries = {"target": "double-well", "methods": ["wgf", "wnewton-a"], "n": 30, "max_iter": 4,
               "reference_n": 2000, "out": str(tmp_path / "out"), **kw}
    return build_config(entries)


class TestRunExperiment:
    def test_files_and_rows(self, tmp_path):
        res = run_experiment(_small_cfg(tmp_path, snapshots=[2, 4]))
        out = tmp_path / "out"
        assert (out / "summary.json").exists()
        assert (out / "snapshots" / "iter002.csv").exists() and (out / "snapshots" / "iter004.csv").exists()
        rows = _read_csv(out / "metrics.csv")
        for m in ("wgf", "wnewton-a"):
            iters = [int(r["iteration"]) for r in rows if r["method"] == m and r["metric"] == "energy_distance"]
            assert iters == list(range(5))
            traj = _read_csv(out / f"trajectory_{m}.csv")
            assert [int(r["iteration"]) for r in traj] == list(range(5))
            assert "energy_distance" in traj[0]
        assert len(res.trajectories) == 2

    def test_zero_iterations(self, tmp_path):
        run_experiment(_small_cfg(tmp_path, max_iter=0, snapshots=[0]))
        rows = _read_csv(tmp_path / "out" / "metrics.csv")
        assert rows and {r["iteration"] for r in rows} == {"0"}
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert all(v["iterations_completed"] == 0 for v in summary["methods"].values())

    def test_byte_identical_rerun(self, tmp_path):
        run_experiment(_small_cfg(tmp_path / "a", snapshots=[2]))
        run_experiment(_small_cfg(tmp_path / "b", snapshots=[2]), parallel=True)
        for name in ("metrics.csv", "trajectory_wgf.csv", "trajectory_wnewton-a.csv", "snapshots/iter002.csv"):
            assert (tmp_path / "a" / "out" / name).read_bytes() == (tmp_path / "b" / "out" / name).read_bytes()

    def test_failure_recorded_others_proceed(self, tmp_path):
        # a huge HALLD step near the singular ring blows up only that method
        cfg = _small_cfg(tmp_path, methods=["wgf", "halld"], **{"halld.step_size": 1e12, "init_mean": [0.57735]})
        res = run_experiment(cfg)
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["methods"]["wgf"]["error"] is None
        assert summary["methods"]["wgf"]["iterations_completed"] == 4
        assert res.trajectories["wgf"].error is None

    @pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
    def test_repo_config_end_to_end(self, tmp_path, path):
        import time

        t0 = time.perf_counter()
        res = run_experiment(load_config(path, {"out": str(tmp_path / "run")}))
        assert time.perf_counter() - t0 < 300
        assert all(tr.records for tr in res.trajectories.values())

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(InvalidConfigError):
            run_experiment(_small_cfg(tmp_path, out=str(blocker / "sub")))

    def test_no_reference(self, tmp_path):
        res = run_experiment(_small_cfg(tmp_path, reference="none"), write=False)
        assert res.files == []
        assert all(not tr.records or {r["metric"] for r in tr.records} <= {"energy_distance"}
                   for tr in res.trajectories.values())

    def test_blr_metrics(self, tmp_path):
        cfg = build_config({"target": "blr-synthetic", "methods": ["old"], "n": 10, "max_iter": 2,
                            "target.n_train": 100, "target.n_test": 50, "target.batch_size": 20,
                            "out": str(tmp_path / "blr")})
        res = run_experiment(cfg)
        names = {r["metric"] for r in res.trajectories["old"].records}
        assert {"test_accuracy", "test_loglik"} <= names


class TestOracleAndGridModes:
    def test_gaussian_oracle_side_by_side(self):
        rows = gaussian_oracle(0.25, 1.0, 2.0, mu0=2.0, n_out=5)
        assert [r["t"] for r in rows] == [0.0, 0.5, 1.0, 1.5, 2.0]
        for r in rows:
            assert {"sim_mean", "sim_var", "nld_mean", "nld_var", "old_lld_var", "hamcmc_var"} <= set(r)
            mu, var = closed_form_1d("nld", 2.0, 0.25, 0.0, 1.0, r["t"])
            assert r["nld_var"] == var and r["nld_mean"] == mu
            assert abs(r["sim_var"] - var) < 1e-4 and abs(r["sim_mean"] - mu) < 1e-4

    def test_gaussian_oracle_invalid(self):
        with pytest.raises(InvalidConfigError):
            gaussian_oracle(-1.0, 1.0, 1.0)

    def test_grid_mode(self):
        res = grid_experiment("gauss1d", 201, steps=5, dt=0.1, bounds=(-6, 6))
        for metric in ("w", "fr"):
            kl = [r["kl"] for r in res["kl"] if r["metric"] == metric]
            assert len(kl) == 6 and np.all(np.diff(kl) <= 1e-12)
            rho = res["final"][metric]
            assert np.dot(rho.weights, rho.values) == pytest.approx(1.0, abs=1e-12)

    def test_grid_mode_nonconvex_target(self):
        res = grid_experiment("double-well", 201, steps=5, dt=0.1, bounds=(-4, 4))
        kl = [r["kl"] for r in res["kl"] if r["metric"] == "w"]
        assert len(kl) == 6 and np.all(np.diff(kl) <= 1e-12)
        assert len([r for r in res["kl"] if r["metric"] == "fr"]) == 6

    def test_grid_mode_rejects_2d(self):
        with pytest.raises(InvalidConfigError):
            grid_experiment("bimodal2d", 101)


class TestCli:
    def test_run(self, tmp_path, capsys):
        cfg = tmp_path / "dw.cfg"
        cfg.write_text("target = double-well\nmethods = wgf, wnewton-k\nn = 20\nmax_iter = 2\nreference_n = 500\n")
        assert main(["run", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "r")]) == 0
        assert (tmp_path / "r" / "metrics.csv").exists()
        assert json.loads((tmp_path / "r" / "summary.json").read_text())["seed"] == 3
        assert "wnewton-k" in capsys.readouterr().out

    def test_compare(self, tmp_path):
        out = tmp_path / "c"
        argv = ["compare", "--target", "gauss1d", "--methods", "wgf,halld", "--n", "20", "--iters", "2",
                "--out", str(out), "--set", "reference_n=500"]
        assert main(argv) == 0
        rows = _read_csv(out / "metrics.csv")
        assert {r["method"] for r in rows} == {"wgf", "halld"}

    def test_gaussian_oracle(self, tmp_path, capsys):
        assert main(["gaussian-oracle", "--sigma0", "0.25", "--sigmastar", "1", "--t", "1", "--mu0", "2",
                     "--points", "3", "--out", str(tmp_path)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("t,sim_mean,sim_var,nld_mean")
        assert len(_read_csv(tmp_path / "gaussian_oracle.csv")) == 3

    def test_grid(self, tmp_path, capsys):
        assert main(["grid", "--target", "gauss1d", "--points", "101", "--steps", "3", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "grid_kl.csv").exists() and (tmp_path / "final_w.csv").exists()
        assert "KL" in capsys.readouterr().out

    def test_validate(self, capsys):
        assert main(["validate", "--target", "double-well"]) == 0
        assert "ok" in capsys.readouterr().out

    @pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
    def test_validate_configs(self, path):
        assert main(["validate", "--config", str(path)]) == 0

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("target = nowhere\n")
        assert main(["run", "--config", str(bad)]) == 2
        assert "error" in capsys.readouterr().err

    def test_bad_override(self, tmp_path):
        assert main(["run", "--config", str(CONFIGS[0]), "--set", "oops"]) == 2

    def test_presets_cover_registered_targets(self):
        assert set(PRESETS) <= set(TARGETS)
