import json
import os

import numpy as np
import pytest

from isb.cli import (
    ConfigError,
    RunConfig,
    _read_samples_csv,
    _write_samples_csv,
    build_problem,
    load_config,
    main,
)


def write_config(tmp_path, doc, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def smoke_config(tmp_path, name="run.json", **over):
    doc = {
        "task": "gauss_shift",
        "seed": 5,
        "out_dir": str(tmp_path / "out"),
        "n_outer": 1,
        "n_particles": 40,
        "grid_steps": 8,
        "inner_iters": 30,
        "cache_refresh": 30,
        "batch_size": 16,
    }
    doc.update(over)
    return write_config(tmp_path, doc, name=name)


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = load_config(smoke_config(tmp_path))
        again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path, {"task": "gauss_shift", "bogus": 1})
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_task_rejected(self, tmp_path):
        path = write_config(tmp_path, {"task": "nope"})
        with pytest.raises(ConfigError):
            load_config(path)

    def test_custom_requires_boundaries(self, tmp_path):
        path = write_config(tmp_path, {"task": "custom"})
        with pytest.raises(ConfigError):
            load_config(path)

    def test_env_out_dir_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ISB_OUT_DIR", str(tmp_path / "elsewhere"))
        cfg = load_config(smoke_config(tmp_path))
        assert cfg.out_dir == str(tmp_path / "elsewhere")

    def test_preset_fills_task_defaults(self, tmp_path):
        path = write_config(tmp_path, {"task": "two_circles"})
        cfg = load_config(path)
        assert cfg.n_outer == 6
        assert cfg.kappa["kind"] == "exponential"
        assert cfg.g["squared"] is True


class TestSamplesCsv:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(17, 3))
        path = str(tmp_path / "s.csv")
        _write_samples_csv(path, X)
        assert np.array_equal(_read_samples_csv(path), X)


class TestMakeData:
    def test_two_circles_writes_samples(self, tmp_path):
        out = str(tmp_path / "data")
        rc = main(["make-data", "--task", "two_circles", "--out", out, "--n", "1000"])
        assert rc == 0
        pi0 = _read_samples_csv(os.path.join(out, "pi0.csv"))
        piT = _read_samples_csv(os.path.join(out, "piT.csv"))
        assert pi0.shape == (1000, 2)
        assert piT.shape == (1000, 2)
        assert os.path.exists(os.path.join(out, "obs.csv"))

    def test_benes_observations_snap_to_grid(self, tmp_path):
        out = str(tmp_path / "data")
        rc = main(["make-data", "--task", "benes", "--out", out, "--n", "50"])
        assert rc == 0
        from isb.eval_bench import benes_grid
        from isb.particle_filter import load_observations_csv

        obs = load_observations_csv(os.path.join(out, "obs.csv"), benes_grid())
        assert obs.n_observations == 10

    def test_deterministic_across_invocations(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        main(["make-data", "--task", "two_moons", "--out", a, "--seed", "3"])
        main(["make-data", "--task", "two_moons", "--out", b, "--seed", "3"])
        assert np.array_equal(
            _read_samples_csv(os.path.join(a, "piT.csv")),
            _read_samples_csv(os.path.join(b, "piT.csv")),
        )

    def test_unknown_task_exit_code(self, tmp_path):
        assert main(["make-data", "--task", "fractal", "--out", str(tmp_path)]) == 2


class TestTrain:
    def test_zero_outer_writes_initial_checkpoints(self, tmp_path):
        path = smoke_config(tmp_path, n_outer=0)
        assert main(["train", "-c", path]) == 0
        out = str(tmp_path / "out")
        assert os.path.exists(os.path.join(out, "net_fwd_l0.json"))
        assert os.path.exists(os.path.join(out, "diagnostics.json"))

    def test_smoke_run_writes_diagnostics(self, tmp_path):
        path = smoke_config(tmp_path)
        assert main(["train", "-c", path]) == 0
        out = str(tmp_path / "out")
        doc = json.loads(open(os.path.join(out, "diagnostics.json")).read())
        assert "1" in doc["iterations"]
        entry = doc["iterations"]["1"]
        assert np.isfinite(entry["control_cost"])
        assert os.path.exists(os.path.join(out, "net_fwd_l1.json"))

    def test_invalid_config_exit_2(self, tmp_path):
        path = write_config(tmp_path, {"task": "custom"})
        assert main(["train", "-c", path]) == 2

    def test_determinism_excluding_wallclock(self, tmp_path):
        p1 = smoke_config(tmp_path, out_dir=str(tmp_path / "o1"))
        p2 = smoke_config(tmp_path, out_dir=str(tmp_path / "o2"), name="run2.json")
        assert main(["train", "-c", p1]) == 0
        assert main(["train", "-c", p2]) == 0

        def load_stripped(p):
            doc = json.loads(open(os.path.join(p, "diagnostics.json")).read())
            for entry in doc["iterations"].values():
                entry.pop("wallclock_s")
            doc["config"].pop("out_dir")
            return json.dumps(doc, sort_keys=True)

        assert load_stripped(str(tmp_path / "o1")) == load_stripped(str(tmp_path / "o2"))

    def test_plots_do_not_change_diagnostics(self, tmp_path):
        p1 = smoke_config(tmp_path, out_dir=str(tmp_path / "p1"))
        p2 = smoke_config(tmp_path, out_dir=str(tmp_path / "p2"),
                          emit_plots=True, emit_trajectories=True, name="run2.json")
        assert main(["train", "-c", p1]) == 0
        assert main(["train", "-c", p2]) == 0

        def load_stripped(p):
            doc = json.loads(open(os.path.join(p, "diagnostics.json")).read())
            for entry in doc["iterations"].values():
                entry.pop("wallclock_s")
            doc["config"].pop("out_dir")
            doc["config"].pop("emit_plots")
            doc["config"].pop("emit_trajectories")
            return json.dumps(doc, sort_keys=True)

        assert load_stripped(str(tmp_path / "p1")) == load_stripped(str(tmp_path / "p2"))
        assert os.path.exists(os.path.join(str(tmp_path / "p2"), "marginal_k0.svg"))
        assert os.path.exists(os.path.join(str(tmp_path / "p2"), "marginal_k0.csv"))
        assert os.path.exists(os.path.join(str(tmp_path / "p2"), "trajectories.csv"))


class TestEvaluate:
    def test_emd_of_file_with_itself_is_zero(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        samples = rng.normal(size=(64, 2))
        spath = str(tmp_path / "piT.csv")
        _write_samples_csv(spath, samples)
        cfg = smoke_config(tmp_path)
        assert main(["evaluate", "-c", cfg, "--metric", "emd", "--samples", spath]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["emd"] == pytest.approx(0.0, abs=1e-12)

    def test_ess_metric_with_no_observations(self, tmp_path, capsys):
        cfg = smoke_config(tmp_path)
        assert main(["train", "-c", cfg]) == 0
        rc = main(["evaluate", "-c", cfg, "--metric", "ess",
                   "--checkpoint-dir", str(tmp_path / "out")])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["observation_times"] == []

    def test_nlpd_requires_benes(self, tmp_path):
        cfg = smoke_config(tmp_path)
        assert main(["train", "-c", cfg]) == 0
        rc = main(["evaluate", "-c", cfg, "--metric", "nlpd",
                   "--checkpoint-dir", str(tmp_path / "out")])
        assert rc == 2

    def test_evaluate_emd_from_checkpoints(self, tmp_path, capsys):
        cfg = smoke_config(tmp_path)
        assert main(["train", "-c", cfg]) == 0
        rc = main(["evaluate", "-c", cfg, "--metric", "emd",
                   "--checkpoint-dir", str(tmp_path / "out")])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["metric"] == "emd" and np.isfinite(doc["emd"])
