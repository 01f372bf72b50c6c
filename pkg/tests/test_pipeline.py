"""Pipeline orchestration: dataset generation, phase ordering, config handling,
routing, and artifact bookkeeping. Uses a scaled-down config so the full run
stays fast; accuracy-bearing end-to-end checks live in test_acceptance."""

import copy
import json
import os

import numpy as np
import pytest

from scenekd import pipeline, tnsr
from scenekd.errors import ConfigError, PhaseOrderError
from scenekd.model import build_network, tiny_student_config
from scenekd.pipeline import (DEFAULT_CONFIG, Experiment, ModelRouter,
                              baseline_accuracy, config_hash,
                              generate_synthetic_dataset, load_dataset,
                              resolve_config, set_dotted, validate_config)


def small_config(**over):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    cfg["data"]["per_class"] = 6
    cfg["teachers"]["recipe"] = [[1.0, [0, 0, 0]], [1.5, [0, 0, 0]]]
    cfg["teachers"]["epochs"] = 2
    cfg["combiner"]["epochs"] = 1
    cfg["optimizer"]["epochs"] = 2
    cfg["quantization"]["calib_batches"] = 2
    for k, v in over.items():
        cfg[k] = v
    return cfg


class TestConfig:
    def test_defaults_valid(self):
        validate_config(resolve_config())

    def test_file_and_override_merge(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"kd": {"alpha": 0.7}}))
        cfg = resolve_config(path=p)
        assert cfg["kd"]["alpha"] == 0.7
        assert cfg["kd"]["temperature"] == DEFAULT_CONFIG["kd"]["temperature"]

    def test_set_dotted(self):
        cfg = resolve_config()
        set_dotted(cfg, "kd.alpha", "0.25")
        assert cfg["kd"]["alpha"] == 0.25
        set_dotted(cfg, "fusion_mode", "a1z1z2")
        assert cfg["fusion_mode"] == "a1z1z2"
        with pytest.raises(ConfigError):
            set_dotted(cfg, "kd.bogus", "1")
        with pytest.raises(ConfigError):
            set_dotted(cfg, "nope.alpha", "1")

    def test_validation_rejects_bad_values(self):
        for key, value in [("class_count", 1), ("student", "huge"),
                           ("fusion_mode", "b2")]:
            cfg = resolve_config()
            cfg[key] = value
            with pytest.raises(ConfigError):
                validate_config(cfg)
        cfg = resolve_config()
        cfg["augmentation"]["m_min"] = 0.95
        with pytest.raises(ConfigError):
            validate_config(cfg)

    def test_config_hash_sensitivity(self):
        a = resolve_config()
        b = resolve_config()
        assert config_hash(a) == config_hash(b)
        b["seed"] = 1
        assert config_hash(a) != config_hash(b)


class TestSyntheticDataset:
    def test_same_seed_byte_identical(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        for d in (d1, d2):
            generate_synthetic_dataset(3, 4, 5, 2, [1, 8, 6], d)
        for rel in sorted(os.listdir(d1 / "features")):
            assert (d1 / "features" / rel).read_bytes() == (d2 / "features" / rel).read_bytes()
        assert (d1 / "manifest.json").read_bytes() == (d2 / "manifest.json").read_bytes()

    def test_zero_noise_identical_within_device(self, tmp_path):
        generate_synthetic_dataset(0, 2, 6, 2, [1, 8, 6], tmp_path / "d", noise=0.0)
        ds = load_dataset(tmp_path / "d")
        for c in range(2):
            for dev in ("dev0", "dev1"):
                mask = (ds["y"] == c) & (ds["devices"] == dev)
                xs = ds["x"][mask]
                assert len(xs) >= 2
                np.testing.assert_array_equal(xs, np.broadcast_to(xs[0], xs.shape))

    def test_manifest_schema(self, tmp_path):
        man = generate_synthetic_dataset(1, 3, 4, 2, [1, 8, 6], tmp_path / "d")
        assert man["class_count"] == 3
        assert man["devices"] == ["dev0", "dev1"]
        for e in man["entries"]:
            assert 0 <= e["label"] < 3
            arr = tnsr.read_tensor(tmp_path / "d" / e["feature_path"])
            assert arr.shape == (1, 8, 6)
            assert e["split"] in ("train", "val")

    def test_baseline_learnable(self, tmp_path):
        cfg = DEFAULT_CONFIG
        generate_synthetic_dataset(0, cfg["class_count"], 20, 3,
                                   cfg["input_shape"], tmp_path / "d")
        assert baseline_accuracy(tmp_path / "d", seed=0) >= 0.90

    def test_load_without_gen_raises(self, tmp_path):
        with pytest.raises(PhaseOrderError):
            load_dataset(tmp_path / "missing")


class TestRouter:
    def _router(self):
        g = build_network(tiny_student_config(4), seed=0, dtype=np.float64, input_hw=(8, 8))
        d = build_network(tiny_student_config(4), seed=1, dtype=np.float64, input_hw=(8, 8))
        return ModelRouter(global_model=g, device_models={"dev0": d}), g, d

    def test_known_device_uses_its_model(self):
        router, _, d = self._router()
        x = np.random.default_rng(2).standard_normal((1, 1, 8, 8))
        assert router.route_and_classify(x, "dev0") == int(d.forward(x).argmax())
        assert router.calls == {"dev0": 1}

    def test_unknown_device_uses_global(self):
        router, g, _ = self._router()
        x = np.random.default_rng(3).standard_normal((1, 1, 8, 8))
        assert router.route_and_classify(x, "dev9") == int(g.forward(x).argmax())
        assert router.calls == {"__global__": 1}

    def test_empty_map_identical_to_global(self):
        g = build_network(tiny_student_config(4), seed=4, dtype=np.float64, input_hw=(8, 8))
        router = ModelRouter(global_model=g)
        rng = np.random.default_rng(5)
        for i in range(10):
            x = rng.standard_normal((1, 1, 8, 8))
            assert router.route_and_classify(x, f"dev{i}") == int(g.forward(x).argmax())
        assert router.calls == {"__global__": 10}


class TestPhases:
    def test_phase_order_enforced(self, tmp_path):
        exp = Experiment(small_config(), tmp_path / "run")
        with pytest.raises(PhaseOrderError):
            exp.run_phase("distill")
        with pytest.raises(PhaseOrderError):
            exp.run_phase("train-teachers")

    def test_unknown_phase(self, tmp_path):
        with pytest.raises(ConfigError):
            Experiment(small_config(), tmp_path / "run").run_phase("explode")

    def test_full_run_artifacts_and_noop_rerun(self, tmp_path):
        out = tmp_path / "run"
        cfg = small_config()
        exp = Experiment(cfg, out)
        exp.run_all()
        for rel in ("data/manifest.json", "teachers/teacher0.ck", "combiners/z1.ck",
                    "combiners/z2.ck", "combiners/pool.json", "student/student.ck",
                    "student/train_log.jsonl", "quant/student_int8.ck",
                    "metrics.json", "predictions.json", "state.json"):
            assert (out / rel).exists(), rel

        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["schema"] == 1
        assert set(metrics["phases"]) >= {"gen-data", "train-teachers", "train-combiners",
                                          "distill", "quantize", "evaluate"}
        assert len(metrics["phases"]["evaluate"]["fusion_table"]) == 7

        # a completed phase with an unchanged config hash is a no-op
        stamp = (out / "student/student.ck").stat().st_mtime_ns
        Experiment(cfg, out).run_all()
        assert (out / "student/student.ck").stat().st_mtime_ns == stamp

        # changing the config re-runs from the changed phase
        cfg2 = copy.deepcopy(cfg)
        cfg2["kd"]["alpha"] = 0.9
        exp2 = Experiment(cfg2, out)
        exp2.run_phase("distill")
        assert (out / "student/student.ck").stat().st_mtime_ns != stamp

    def test_predictions_cross_check(self, tmp_path):
        out = tmp_path / "run"
        exp = Experiment(small_config(), out)
        exp.run_all()
        metrics = json.loads((out / "metrics.json").read_text())
        preds = json.loads((out / "predictions.json").read_text())
        rescored = np.mean(np.array(preds["predictions"]) == np.array(preds["labels"]))
        assert rescored == pytest.approx(metrics["phases"]["evaluate"]["student_val_acc"])

    def test_report_complexity_verdicts(self, tmp_path):
        cfg = small_config()
        rec = Experiment(cfg, tmp_path / "a").report_complexity()
        assert rec["verdict"] == "pass"
        assert rec["params"] <= cfg["budget"]["params_cap"]
        tight = small_config()
        tight["budget"] = {"params_cap": 10, "macs_cap": 10}
        rec2 = Experiment(tight, tmp_path / "b").report_complexity()
        assert rec2["verdict"] == "fail"
        assert rec2["params"] > 10

    def test_per_teacher_variation(self, tmp_path):
        out = tmp_path / "run"
        exp = Experiment(small_config(), out)
        exp.run_phase("gen-data")
        exp.run_phase("train-teachers")
        t0 = tnsr.read_checkpoint(out / "teachers/teacher0.ck")
        t1 = tnsr.read_checkpoint(out / "teachers/teacher1.ck")
        shared = set(t0) & set(t1)
        assert any(t0[k].shape != t1[k].shape or not np.array_equal(t0[k], t1[k])
                   for k in shared)
