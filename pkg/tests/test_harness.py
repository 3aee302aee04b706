import csv
import io
import json
import math
from contextlib import redirect_stdout

import numpy as np
import numpy.testing as npt
import pytest

from localzo import harness, snn
from localzo import zo_surrogate as zo
from localzo.errors import ConfigurationError, TrainingError

SMALL_DATA = {"kind": "synthetic", "num_classes": 4, "d": 30, "T": 15, "n_train": 100, "n_test": 40}


def small_config(kind="localzo", **kw):
    mode = {"kind": kind, "delta": 0.05}
    mode.update({"localzo": {"distribution": "normal"}}.get(kind, {"surrogate_kind": "expected_normal"}))
    raw = {"mode": mode, "dims": [30, 24, 24, 4], "epochs": 2, "batch_size": 32, "seed": 3, "data": dict(SMALL_DATA)}
    raw.update(kw)
    return harness.ExperimentConfig.from_dict(raw)


def run_cli(argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = harness.main(argv)
    return code, buf.getvalue()


class TestConfig:
    def test_ambiguous_localzo(self):
        with pytest.raises(ConfigurationError, match="ambiguous"):
            harness.ModeSpec("localzo", distribution="normal", surrogate_kind="sigmoid", k=30.63)

    @pytest.mark.parametrize("mode", [
        {"kind": "bptt"},
        {"kind": "localzo"},
        {"kind": "surrogate"},
        {"kind": "localzo", "distribution": "cauchy"},
        {"kind": "surrogate", "surrogate_kind": "sigmoid"},
        {"kind": "localzo", "distribution": "normal", "delta": 0.0},
        {"kind": "localzo", "distribution": "normal", "m": 0},
        {"kind": "surrogate", "surrogate_kind": "expected_normal", "b_th": 0.1},
    ])
    def test_invalid_modes(self, mode):
        with pytest.raises(ConfigurationError):
            harness.ExperimentConfig.from_dict({"mode": mode})

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="learning_rate"):
            harness.ExperimentConfig.from_dict({"mode": {"kind": "localzo", "distribution": "normal"},
                                                "learning_rate": 0.1})

    def test_defaults_round_trip(self):
        cfg = harness.ExperimentConfig.from_dict({"mode": {"kind": "localzo", "distribution": "normal"}})
        d = cfg.to_dict()
        assert d["dims"] == [100, 200, 200, 10] and d["batch_size"] == 128 and d["epochs"] == 20
        assert harness.ExperimentConfig.from_dict(d) == cfg

    def test_bundled_configs_parse(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        names = sorted(p.name for p in root.glob("*.json"))
        assert names
        for p in root.glob("*.json"):
            cfg = harness.ExperimentConfig.from_json(p)
            assert cfg.name == p.stem

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{nope")
        with pytest.raises(ConfigurationError):
            harness.ExperimentConfig.from_json(p)


class TestBuildMode:
    def test_sparsegrad_auto_threshold(self):
        mode, info = harness.build_mode(harness.ModeSpec("sparsegrad", surrogate_kind="expected_normal", delta=0.05))
        npt.assert_allclose(mode.b_th, 0.05 * math.sqrt(2 / math.pi), rtol=1e-9)
        assert info["b_th_source"] == "expected_threshold"

    def test_sparsegrad_auto_threshold_m5(self):
        mode, _ = harness.build_mode(harness.ModeSpec("sparsegrad", surrogate_kind="expected_uniform", delta=1.0, m=5))
        npt.assert_allclose(mode.b_th, math.sqrt(3) * 5 / 6, rtol=1e-12)

    def test_sparsegrad_override(self):
        mode, info = harness.build_mode(harness.ModeSpec("sparsegrad", surrogate_kind="expected_normal", b_th=0.2))
        assert mode.b_th == 0.2 and "b_th_source" not in info

    def test_sigmoid_sparsegrad_pairs_with_derived_threshold(self):
        mode, _ = harness.build_mode(harness.ModeSpec("sparsegrad", surrogate_kind="sigmoid", k=30.63, delta=0.05))
        assert abs(mode.b_th / 0.05 - 0.766) < 2e-3

    def test_localzo_from_sigmoid(self):
        mode, info = harness.build_mode(harness.ModeSpec("localzo", surrogate_kind="sigmoid", k=30.63, delta=0.05))
        assert isinstance(mode, snn.LocalZO)
        assert abs(info["scale_c"] - 1.0) < 1e-3

    def test_surrogate_kinds(self):
        mode, _ = harness.build_mode(harness.ModeSpec("surrogate", surrogate_kind="fastsigmoid", k=100.0))
        npt.assert_allclose(mode.g(0.0), 1.0)
        mode, _ = harness.build_mode(harness.ModeSpec("surrogate", distribution="laplace", delta=1.0))
        npt.assert_allclose(mode.g(0.0), zo.expected_surrogate("laplace", 0.0, 1.0))


class TestRunTraining:
    def test_zero_epochs(self, tmp_path):
        cfg = small_config(epochs=0, dims=[100, 200, 200, 10],
                           data={"kind": "synthetic", "n_train": 50, "n_test": 2000})
        summary = harness.run_training(cfg, tmp_path)
        assert (tmp_path / "metrics.csv").read_text().splitlines() == [
            "update,loss,fwd_ms,bwd_ms,mac_fwd,mac_bwd,active_pct_layer1,active_pct_layer2"]
        assert summary["num_updates"] == 0
        # chance for 10 classes; the band is wide because an untrained net is near-constant
        assert 0.0 <= summary["test_acc"] <= 0.25

    def test_row_count_and_columns(self, tmp_path):
        cfg = small_config(epochs=3, batch_size=32)
        summary = harness.run_training(cfg, tmp_path)
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 * math.ceil(100 / 32) == summary["num_updates"]
        assert [int(r["update"]) for r in rows] == list(range(1, len(rows) + 1))
        assert all(float(r["active_pct_layer1"]) <= 100 for r in rows)
        assert len(summary["epochs"]) == 3
        assert summary["status"] == "ok"
        assert summary["config"]["mode"]["distribution"] == "normal"
        assert summary["backward_speedup"] is None

    def test_summary_materializes_defaults(self, tmp_path):
        summary = harness.run_training(small_config(epochs=1), tmp_path)
        saved = json.loads((tmp_path / "summary.json").read_text())
        assert saved["config"]["lr"] == 1e-3 and saved["config"]["beta"] == 0.9
        assert saved["metrics_digest"] == summary["metrics_digest"]

    def test_checkpoint_written(self, tmp_path):
        harness.run_training(small_config(epochs=1), tmp_path)
        net = snn.load_checkpoint(tmp_path / "network.lzonet")
        assert net.dims == [30, 24, 24, 4]

    def test_paired_speedups(self, tmp_path):
        base = tmp_path / "base"
        harness.run_training(small_config("surrogate", epochs=1), base)
        summary = harness.run_training(small_config("localzo", epochs=1, baseline=str(base)), tmp_path / "lzo")
        assert summary["backward_speedup"] > 0
        assert summary["overall_speedup"] > 0
        assert 0 < summary["mac_ratio_backward"] < 1

    def test_paired_modes_share_data_order(self, tmp_path):
        a = harness.run_training(small_config("surrogate", epochs=2), tmp_path / "a")
        b = harness.run_training(small_config("sparsegrad", epochs=2), tmp_path / "b")
        assert a["data_digest"] == b["data_digest"]

    def test_baseline_must_match(self, tmp_path):
        harness.run_training(small_config("surrogate", epochs=1, seed=4), tmp_path / "base")
        with pytest.raises(ConfigurationError, match="seed"):
            harness.run_training(small_config(epochs=1, baseline=str(tmp_path / "base")), tmp_path / "x")

    def test_data_dims_must_match(self, tmp_path):
        with pytest.raises(ConfigurationError):
            harness.run_training(small_config(dims=[31, 24, 4]), tmp_path)

    def test_determinism(self, tmp_path):
        a = harness.run_training(small_config(), tmp_path / "a")
        b = harness.run_training(small_config(), tmp_path / "b")
        assert a["metrics_digest"] == b["metrics_digest"]
        c = harness.run_training(small_config(seed=9), tmp_path / "c")
        assert c["metrics_digest"] != a["metrics_digest"]

    def test_digest_ignores_timing(self, tmp_path):
        p, q = tmp_path / "p.csv", tmp_path / "q.csv"
        p.write_text("update,loss,fwd_ms,bwd_ms\n1,0.5,1.0,2.0\n")
        q.write_text("update,loss,fwd_ms,bwd_ms\n1,0.5,7.0,9.0\n")
        assert harness.metrics_digest(p) == harness.metrics_digest(q)

    def test_divergence_writes_partial_output(self, tmp_path):
        cfg = small_config("surrogate", lr=1e300)
        with pytest.raises(TrainingError):
            harness.run_training(cfg, tmp_path)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["status"] == "diverged"
        rows = (tmp_path / "metrics.csv").read_text().splitlines()
        assert len(rows) >= 2
        assert np.all(np.isfinite(snn.load_checkpoint(tmp_path / "network.lzonet").layers[0]))

    def test_event_file_data(self, tmp_path):
        from localzo import data
        tr, te = data.synth_task(4, 30, 15, 1.0, 0.2, np.random.default_rng(0), 40, 20)
        data.write_events(tmp_path / "tr.csv", tr)
        data.write_events(tmp_path / "te.csv", te)
        cfg = small_config(epochs=1, data={"kind": "events", "train_path": str(tmp_path / "tr.csv"),
                                           "test_path": str(tmp_path / "te.csv")})
        summary = harness.run_training(cfg, tmp_path / "run")
        assert summary["num_updates"] == 2


class TestCli:
    def write_config(self, tmp_path, **kw):
        cfg = small_config(**kw).to_dict()
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_train_and_baseline(self, tmp_path):
        base = self.write_config(tmp_path, kind="surrogate", epochs=1)
        code, out = run_cli(["train", str(base), "--output-dir", str(tmp_path / "base")])
        assert code == 0
        lzo = self.write_config(tmp_path, epochs=1)
        code, out = run_cli(["train", str(lzo), "--output-dir", str(tmp_path / "lzo"), "--baseline",
                             str(tmp_path / "base")])
        assert code == 0
        assert json.loads(out)["mac_ratio_backward"] < 1

    def test_output_dir_from_environment(self, tmp_path, monkeypatch):
        path = self.write_config(tmp_path, epochs=0)
        monkeypatch.setenv("LOCALZO_OUTPUT_DIR", str(tmp_path / "envroot"))
        code, _ = run_cli(["train", str(path)])
        assert code == 0
        assert (tmp_path / "envroot" / "run" / "summary.json").exists()

    def test_epochs_override(self, tmp_path):
        path = self.write_config(tmp_path, epochs=5)
        code, out = run_cli(["train", str(path), "--epochs", "1", "--output-dir", str(tmp_path / "o")])
        assert code == 0 and json.loads(out)["num_updates"] == 4

    def test_invalid_config_exit_code(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"mode": {"kind": "localzo", "distribution": "normal",
                                             "surrogate_kind": "sigmoid", "k": 3.0}}))
        code, _ = run_cli(["train", str(path)])
        assert code == 2

    def test_divergence_exit_code(self, tmp_path):
        path = self.write_config(tmp_path, kind="surrogate", lr=1e300)
        code, _ = run_cli(["train", str(path), "--output-dir", str(tmp_path / "o")])
        assert code == 3
        assert len((tmp_path / "o" / "metrics.csv").read_text().splitlines()) >= 2

    def test_thresholds(self):
        code, out = run_cli(["thresholds", "--mc-trials", "20000"])
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        table = {(r["family"], int(r["m"])): float(r["quadrature"]) for r in rows}
        assert abs(table[("normal", 1)] - 0.798) <= 1e-3
        assert abs(table[("uniform", 5)] - 1.443) <= 1e-3
        assert abs(table[("sigmoid", 1)] - 0.0383) <= 1e-4
        assert ("fastsigmoid", 1) in table
        for r in rows:
            assert abs(float(r["monte_carlo"]) - float(r["quadrature"])) < 5 * float(r["mc_se"])

    @pytest.mark.parametrize("kind,delta,u,expected", [
        ("normal", 1.0, 0.0, 0.39894),
        ("laplace", 1.0, 0.0, 0.35355),
        ("uniform", 0.5, 1.0, 0.0),
    ])
    def test_curves(self, kind, delta, u, expected):
        code, out = run_cli(["curves", "--kind", kind, "--delta", str(delta), "--u-min", "-1", "--u-max", "1",
                             "--points", "5", "--mc-draws", "200000"])
        assert code == 0
        rows = [r for r in csv.DictReader(io.StringIO(out)) if float(r["u"]) == u]
        assert len(rows) == 1
        assert abs(float(rows[0]["value"]) - expected) < 1e-5
        se = float(rows[0]["mc_se"])
        assert abs(float(rows[0]["mc_mean"]) - expected) <= max(3 * se, 1e-12)

    def test_curves_need_k(self):
        code, _ = run_cli(["curves", "--kind", "sigmoid", "--points", "3", "--mc-draws", "0"])
        assert code == 2

    def test_verify_quick(self):
        code, out = run_cli(["verify", "quick"])
        assert code == 0, out
        assert "0 failed" in out

    def test_verify_tampered(self):
        saved = zo.SIGMOID_A
        code, out = run_cli(["verify", "quick", "--tamper", "a"])
        assert code != 0
        assert "FAIL roundtrip_sigmoid" in out
        assert zo.SIGMOID_A == saved
