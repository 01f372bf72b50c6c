"""End-to-end orchestration: synthetic dataset generation, the training phases,
quantization, device-conditional routing, and evaluation with metrics emission.

Phases are content-addressed: each records a hash of the configuration it ran
under, and re-running a completed phase with the same hash is a no-op. All
randomness flows from the config seed, so a full run is reproducible; in
float64 mode the metrics file is bitwise reproducible.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import distill, fusion, model, quantize, tnsr
from .errors import ConfigError, InputError, PhaseOrderError
from .nn import Linear, Network, ReLU
from .optim import Adam

PHASES = ("gen-data", "train-teachers", "train-combiners", "distill", "quantize", "evaluate")

DEFAULT_CONFIG = {
    "seed": 0,
    "class_count": 10,
    "input_shape": [1, 16, 12],
    "student": "tiny",
    "data": {"per_class": 40, "device_count": 3, "noise": 0.25, "val_fraction": 0.2},
    "teachers": {
        "recipe": [[1.0, [1, 0, 0]], [1.5, [0, 0, 0]], [1.5, [0, 1, 0]], [2.0, [0, 0, 0]]],
        "lr": 3e-3, "batch": 32, "epochs": 30, "freeze_in_joint_phase": False,
    },
    "combiner": {"lr": 3e-3, "batch": 32, "epochs": 12, "lambda": 1.0, "z2_mode": "per-class-linear"},
    "kd": {"temperature": 2.0, "alpha": 0.5},
    "optimizer": {"lr": 1e-4, "batch": 64, "epochs": 350},
    "fusion_mode": "a1z1",
    "augmentation": {"lo_pct": 10, "hi_pct": 90, "m_min": 0.1, "m_max": 0.9},
    "quantization": {"enabled": True, "calib_batches": 4},
    "budget": {"params_cap": 128000, "macs_cap": 30000000},
    "float64": False,
}


def resolve_config(overrides: dict | None = None, path=None) -> dict:
    """Defaults, optionally updated from a JSON file, then explicit overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            _deep_update(cfg, json.load(fh))
    if overrides:
        _deep_update(cfg, overrides)
    validate_config(cfg)
    return cfg


def set_dotted(cfg: dict, key: str, value: str) -> None:
    """Apply a --set KEY=VALUE override; the value is parsed as JSON if possible."""
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config path {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        node[parts[-1]] = json.loads(value)
    except json.JSONDecodeError:
        node[parts[-1]] = value


def validate_config(cfg: dict) -> None:
    if cfg["class_count"] < 2:
        raise ConfigError("class_count must be >= 2")
    if cfg["student"] not in ("tiny", "default"):
        raise ConfigError(f"unknown student recipe {cfg['student']!r}")
    if cfg["fusion_mode"] not in fusion.FUSION_MODES:
        raise ConfigError(f"fusion_mode must be one of {fusion.FUSION_MODES}")
    distill.KDConfig(cfg["kd"]["temperature"], cfg["kd"]["alpha"])
    if cfg["optimizer"]["lr"] <= 0 or cfg["optimizer"]["batch"] < 1 or cfg["optimizer"]["epochs"] < 0:
        raise ConfigError("optimizer settings must be positive")
    aug = cfg["augmentation"]
    if not 0 <= aug["m_min"] <= aug["m_max"] <= 1:
        raise ConfigError("augmentation mix bounds must satisfy 0 <= m_min <= m_max <= 1")
    if not 0 <= aug["lo_pct"] < aug["hi_pct"] <= 100:
        raise ConfigError("augmentation percentiles must satisfy 0 <= lo < hi <= 100")


def _deep_update(base: dict, upd: dict):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def student_config(cfg: dict) -> model.StudentConfig:
    if cfg["student"] == "default":
        return model.default_student_config(cfg["class_count"])
    return model.tiny_student_config(cfg["class_count"])


def _dtype(cfg):
    return np.float64 if cfg["float64"] else np.float32


def _atomic_json(path, obj):
    d = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".json-")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


# ---------------------------------------------------------------- dataset

def generate_synthetic_dataset(seed: int, class_count: int, per_class: int,
                               device_count: int, input_shape, out_dir,
                               noise: float = 0.25, val_fraction: float = 0.2) -> dict:
    """Procedural spectrogram dataset: per-class band-energy prototypes, a fixed
    multiplicative spectral tilt per device, and per-sample noise. Deterministic
    given the seed; per-sample randomness derives from (seed, sample index)."""
    if min(class_count, per_class, device_count) < 1:
        raise InputError("class_count, per_class and device_count must all be >= 1")
    _, h, w = input_shape
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)

    protos = []
    for c in range(class_count):
        rc = np.random.default_rng([seed, 777, c])
        pat = np.zeros((h, w))
        rows = rc.choice(h, size=max(2, h // 5), replace=False)
        for r in rows:
            phase = rc.uniform(0, 2 * np.pi)
            pat[r, :] = 1.5 + np.sin(np.linspace(0, 2 * np.pi, w) + phase)
        protos.append(pat)

    tilts = []
    for d in range(device_count):
        rd = np.random.default_rng([seed, 888, d])
        slope = rd.uniform(0.2, 0.6) * rd.choice([-1.0, 1.0])
        tilts.append(np.exp(np.linspace(-slope, slope, h))[:, None])

    entries = []
    n_val = max(1, int(round(per_class * val_fraction)))
    idx = 0
    for c in range(class_count):
        for i in range(per_class):
            ri = np.random.default_rng([seed, idx])
            dev = idx % device_count
            sample = protos[c] * tilts[dev] + noise * ri.standard_normal((h, w))
            rel = f"features/{idx:05d}.tnsr"
            tnsr.write_tensor(os.path.join(out_dir, rel),
                              sample[None, :, :].astype(np.float32))
            entries.append({
                "feature_path": rel,
                "label": c,
                "device_id": f"dev{dev}",
                "split": "val" if i >= per_class - n_val else "train",
            })
            idx += 1
    manifest = {
        "schema": 1,
        "class_count": class_count,
        "devices": [f"dev{d}" for d in range(device_count)],
        "input_shape": list(input_shape),
        "entries": entries,
    }
    _atomic_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def load_dataset(data_dir, dtype=np.float32) -> dict:
    mpath = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(mpath):
        raise PhaseOrderError(f"missing dataset manifest {mpath}; run gen-data first")
    with open(mpath) as fh:
        manifest = json.load(fh)
    x, y, dev, split = [], [], [], []
    for e in manifest["entries"]:
        x.append(tnsr.read_tensor(os.path.join(data_dir, e["feature_path"])).astype(dtype))
        y.append(e["label"])
        dev.append(e["device_id"])
        split.append(e["split"])
    x = np.stack(x)
    y = np.array(y)
    split = np.array(split)
    tr, va = split == "train", split == "val"
    return {
        "manifest": manifest,
        "x": x, "y": y, "devices": np.array(dev),
        "train": (x[tr], y[tr]),
        "val": (x[va], y[va]),
        "val_devices": np.array(dev)[va],
    }


def baseline_accuracy(data_dir, seed: int = 0, epochs: int = 60, lr: float = 3e-3) -> float:
    """Train a 2-layer reference classifier on the flattened features; used to
    verify the generator produces a learnable-but-nontrivial task."""
    ds = load_dataset(data_dir, np.float64)
    x_tr, y_tr = ds["train"]
    x_va, y_va = ds["val"]
    n_feat = int(np.prod(x_tr.shape[1:]))
    rng = np.random.default_rng(seed)
    fc1 = Linear(n_feat, 32, rng, "fc1", np.float64)
    act = ReLU()
    fc2 = Linear(32, ds["manifest"]["class_count"], rng, "fc2", np.float64)
    opt = Adam(fc1.parameters() + fc2.parameters(), lr=lr)
    xf = x_tr.reshape(len(x_tr), -1)
    order_rng = np.random.default_rng(seed + 1)
    from . import ops
    for _ in range(epochs):
        order = order_rng.permutation(len(xf))
        for start in range(0, len(order), 32):
            idx = order[start : start + 32]
            opt.zero_grad()
            logits = fc2.forward(act.forward(fc1.forward(xf[idx])))
            g = ops.cross_entropy_batch_grad(logits, y_tr[idx])
            fc1.backward(act.backward(fc2.backward(g)))
            opt.step()
    logits = fc2.forward(act.forward(fc1.forward(x_va.reshape(len(x_va), -1))))
    return float((logits.argmax(axis=1) == y_va).mean())


# ---------------------------------------------------------------- routing

@dataclass
class ModelRouter:
    """Device-conditional dispatch: known devices get their own model, unknown
    devices fall back to the always-present global model."""

    global_model: Network
    device_models: dict[str, Network] = field(default_factory=dict)
    calls: dict[str, int] = field(default_factory=dict)

    def route_and_classify(self, sample: np.ndarray, device_id: str) -> int:
        if sample.ndim == 3:
            sample = sample[None]
        if device_id in self.device_models:
            net = self.device_models[device_id]
            self.calls[device_id] = self.calls.get(device_id, 0) + 1
        else:
            net = self.global_model
            self.calls["__global__"] = self.calls.get("__global__", 0) + 1
        return int(net.forward(sample).argmax(axis=1)[0])


def route_and_classify(router: ModelRouter, sample: np.ndarray, device_id: str) -> int:
    return router.route_and_classify(sample, device_id)


# ---------------------------------------------------------------- phases

class Experiment:
    """Phase runner over one output directory."""

    def __init__(self, cfg: dict, out_dir):
        self.cfg = cfg
        self.out = os.fspath(out_dir)
        os.makedirs(self.out, exist_ok=True)
        self.dtype = _dtype(cfg)
        self.base = student_config(cfg)
        self.input_hw = tuple(cfg["input_shape"][1:])

    # -- bookkeeping

    def _state(self) -> dict:
        p = os.path.join(self.out, "state.json")
        if os.path.exists(p):
            with open(p) as fh:
                return json.load(fh)
        return {}

    def _phase_done(self, phase: str) -> bool:
        return self._state().get(phase) == config_hash(self.cfg)

    def _mark_done(self, phase: str):
        st = self._state()
        st[phase] = config_hash(self.cfg)
        _atomic_json(os.path.join(self.out, "state.json"), st)

    def _require(self, phase: str, artifact: str):
        path = os.path.join(self.out, artifact)
        if not os.path.exists(path):
            raise PhaseOrderError(f"phase requires {artifact} (produced by {phase}); "
                                  f"run {phase} first")
        return path

    def _record_metrics(self, phase: str, record: dict):
        p = os.path.join(self.out, "metrics.json")
        doc = {"schema": 1, "phases": {}}
        if os.path.exists(p):
            with open(p) as fh:
                doc = json.load(fh)
        doc["phases"][phase] = record
        _atomic_json(p, doc)

    # -- model plumbing

    def teacher_configs(self) -> list[model.StudentConfig]:
        return [model.make_teacher_variant(self.base, mult, tuple(depth))
                for mult, depth in self.cfg["teachers"]["recipe"]]

    def _load_teachers(self, directory: str) -> fusion.TeacherPool:
        nets = []
        for t, tc in enumerate(self.teacher_configs()):
            path = self._require("train-teachers", f"{directory}/teacher{t}.ck")
            nets.append(model.load_network(path, tc, self.dtype, self.input_hw))
        frozen = [bool(self.cfg["teachers"]["freeze_in_joint_phase"])] * len(nets)
        return fusion.TeacherPool(nets, frozen)

    def _load_combiners(self):
        t = len(self.cfg["teachers"]["recipe"])
        z1_cfg = model.tiny_student_config(t) if self.cfg["student"] == "tiny" \
            else model.default_student_config(t)
        z1 = fusion.Z1Head(model.load_network(
            self._require("train-combiners", "combiners/z1.ck"), z1_cfg,
            self.dtype, self.input_hw))
        z2 = fusion.Z2Head(t, self.cfg["class_count"], self.cfg["combiner"]["z2_mode"],
                           dtype=self.dtype)
        z2.load_state(tnsr.read_checkpoint(self._require("train-combiners", "combiners/z2.ck")))
        return z1, z2

    def ensemble_targets(self, x: np.ndarray) -> np.ndarray:
        pool = self._load_teachers("combiners")
        z1, z2 = self._load_combiners()
        tl = fusion.teacher_logits(pool, x)
        return fusion.fuse(self.cfg["fusion_mode"], tl, x=x, z1=z1, z2=z2)

    # -- phases

    def gen_data(self):
        if self._phase_done("gen-data"):
            return
        d = self.cfg["data"]
        generate_synthetic_dataset(self.cfg["seed"], self.cfg["class_count"], d["per_class"],
                                   d["device_count"], self.cfg["input_shape"],
                                   os.path.join(self.out, "data"), d["noise"],
                                   d["val_fraction"])
        self._record_metrics("gen-data", {
            "samples": self.cfg["class_count"] * d["per_class"],
            "devices": d["device_count"],
        })
        self._mark_done("gen-data")

    def train_teachers(self):
        if self._phase_done("train-teachers"):
            return
        self._require("gen-data", "data/manifest.json")
        ds = load_dataset(os.path.join(self.out, "data"), self.dtype)
        tcfg = self.cfg["teachers"]
        os.makedirs(os.path.join(self.out, "teachers"), exist_ok=True)
        accs = []
        for t, tc in enumerate(self.teacher_configs()):
            net = model.build_network(tc, seed=self.cfg["seed"] * 1000 + 100 + t,
                                      dtype=self.dtype, input_hw=self.input_hw)
            # per-teacher hyperparameter jitter keeps the pool diverse
            lr = tcfg["lr"] * (0.7 + 0.15 * t)
            _ce_train(net, ds["train"], lr, tcfg["batch"], tcfg["epochs"],
                      seed=self.cfg["seed"] * 1000 + 200 + t)
            model.save_network(os.path.join(self.out, f"teachers/teacher{t}.ck"), net)
            accs.append(distill.accuracy(net, *ds["val"]))
        self._record_metrics("train-teachers", {"val_acc": accs})
        self._mark_done("train-teachers")

    def train_combiners(self):
        if self._phase_done("train-combiners"):
            return
        ds = load_dataset(os.path.join(self.out, "data"), self.dtype)
        pool = self._load_teachers("teachers")
        t = pool.num_teachers
        ccfg = self.cfg["combiner"]
        z1_cfg = model.tiny_student_config(t) if self.cfg["student"] == "tiny" \
            else model.default_student_config(t)
        z1 = fusion.Z1Head(model.build_network(z1_cfg, seed=self.cfg["seed"] * 1000 + 300,
                                               dtype=self.dtype, input_hw=self.input_hw))
        z2 = fusion.Z2Head(t, self.cfg["class_count"], ccfg["z2_mode"],
                           seed=self.cfg["seed"] * 1000 + 301, dtype=self.dtype)
        log = fusion.train_combiners(pool, z1, z2, ds["train"],
                                     fusion.CombinerTrainConfig(
                                         lr=ccfg["lr"], batch=ccfg["batch"],
                                         epochs=ccfg["epochs"], lam=ccfg["lambda"],
                                         seed=self.cfg["seed"] * 1000 + 302))
        os.makedirs(os.path.join(self.out, "combiners"), exist_ok=True)
        for i, net in enumerate(pool.teachers):
            model.save_network(os.path.join(self.out, f"combiners/teacher{i}.ck"), net)
        model.save_network(os.path.join(self.out, "combiners/z1.ck"), z1.network)
        tnsr.write_checkpoint(os.path.join(self.out, "combiners/z2.ck"), z2.state_tensors())
        _atomic_json(os.path.join(self.out, "combiners/pool.json"), {
            "teachers": t, "classes": self.cfg["class_count"],
            "fusion_mode": self.cfg["fusion_mode"], "lambda": ccfg["lambda"],
            "frozen": pool.frozen, "z2_mode": ccfg["z2_mode"],
        })
        self._record_metrics("train-combiners", {
            "final_loss": log[-1]["loss"],
            "mode_acc": {m: log[-1][f"acc_{m}"] for m in fusion.FUSION_MODES},
        })
        self._mark_done("train-combiners")

    def distill(self):
        if self._phase_done("distill"):
            return
        self._require("train-combiners", "combiners/pool.json")
        ds = load_dataset(os.path.join(self.out, "data"), self.dtype)
        x_tr, y_tr = ds["train"]
        targets = self.ensemble_targets(x_tr)
        student = model.build_network(self.base, seed=self.cfg["seed"] * 1000 + 400,
                                      dtype=self.dtype, input_hw=self.input_hw)
        ocfg = self.cfg["optimizer"]
        os.makedirs(os.path.join(self.out, "student"), exist_ok=True)
        log_path = os.path.join(self.out, "student/train_log.jsonl")
        if os.path.exists(log_path):
            os.unlink(log_path)
        log = distill.train_student(
            student, targets, {"train": (x_tr, y_tr), "val": ds["val"]},
            distill.KDConfig(self.cfg["kd"]["temperature"], self.cfg["kd"]["alpha"]),
            distill.OptConfig(ocfg["lr"], ocfg["batch"], ocfg["epochs"],
                              seed=self.cfg["seed"] * 1000 + 401),
            log_path=log_path)
        model.save_network(os.path.join(self.out, "student/student.ck"), student)
        self._record_metrics("distill", {
            "epochs": len(log),
            "final": {k: log[-1][k] for k in ("loss_total", "loss_ce", "loss_kd",
                                              "train_acc", "val_acc", "mean_kl")} if log else {},
            "first_mean_kl": log[0]["mean_kl"] if log else None,
        })
        self._mark_done("distill")

    def quantize(self):
        if self._phase_done("quantize"):
            return
        spath = self._require("distill", "student/student.ck")
        ds = load_dataset(os.path.join(self.out, "data"), self.dtype)
        student = model.load_network(spath, self.base, self.dtype, self.input_hw)
        x_tr, _ = ds["train"]
        nb = self.cfg["quantization"]["calib_batches"]
        batches = [x_tr[i::nb] for i in range(nb)]
        qm = quantize.calibrate(student, batches)
        os.makedirs(os.path.join(self.out, "quant"), exist_ok=True)
        quantize.save_quant_model(os.path.join(self.out, "quant/student_int8.ck"), qm)
        x_va, _ = ds["val"]
        agree = float(np.mean(qm.int_forward(x_va).argmax(axis=1)
                              == student.forward(x_va).argmax(axis=1)))
        self._record_metrics("quantize", {"argmax_agreement": agree,
                                          "warnings": qm.warnings})
        self._mark_done("quantize")

    def evaluate(self):
        if self._phase_done("evaluate"):
            return
        spath = self._require("distill", "student/student.ck")
        ds = load_dataset(os.path.join(self.out, "data"), self.dtype)
        student = model.load_network(spath, self.base, self.dtype, self.input_hw)
        x_va, y_va = ds["val"]

        pred = student.forward(x_va).argmax(axis=1)
        overall = float((pred == y_va).mean())
        per_device = {}
        for dev in ds["manifest"]["devices"]:
            mask = ds["val_devices"] == dev
            if mask.any():
                per_device[dev] = float((pred[mask] == y_va[mask]).mean())

        pool = self._load_teachers("combiners")
        z1, z2 = self._load_combiners()
        table = fusion.mode_accuracies(pool, z1, z2, x_va, y_va)
        ensemble_acc = table[f"acc_{self.cfg['fusion_mode']}"]

        record = {
            "student_val_acc": overall,
            "per_device_acc": per_device,
            "fusion_table": {m: table[f"acc_{m}"] for m in fusion.FUSION_MODES},
            "ensemble_acc": ensemble_acc,
            "gap_to_ensemble": ensemble_acc - overall,
        }
        qpath = os.path.join(self.out, "quant/student_int8.ck")
        if os.path.exists(qpath):
            qm = quantize.load_quant_model(qpath)
            qpred = qm.int_forward(x_va).argmax(axis=1)
            record["int8_val_acc"] = float((qpred == y_va).mean())
        _atomic_json(os.path.join(self.out, "predictions.json"), {
            "schema": 1,
            "predictions": [int(p) for p in pred],
            "labels": [int(v) for v in y_va],
        })
        self._record_metrics("evaluate", record)
        self._mark_done("evaluate")

    def report_complexity(self) -> dict:
        shape = (self.cfg["input_shape"][0],) + tuple(self.input_hw)
        rep = model.count_complexity(self.base, shape)
        budget = self.cfg["budget"]
        record = {
            "params": rep.params,
            "macs": rep.macs,
            "params_cap": budget["params_cap"],
            "macs_cap": budget["macs_cap"],
            "verdict": "pass" if rep.params <= budget["params_cap"]
                       and rep.macs <= budget["macs_cap"] else "fail",
        }
        self._record_metrics("report-complexity", record)
        return record

    def run_phase(self, phase: str):
        dispatch = {
            "gen-data": self.gen_data,
            "train-teachers": self.train_teachers,
            "train-combiners": self.train_combiners,
            "distill": self.distill,
            "quantize": self.quantize,
            "evaluate": self.evaluate,
            "report-complexity": self.report_complexity,
        }
        if phase not in dispatch:
            raise ConfigError(f"unknown phase {phase!r}")
        return dispatch[phase]()

    def run_all(self):
        for phase in PHASES:
            if phase == "quantize" and not self.cfg["quantization"]["enabled"]:
                continue
            self.run_phase(phase)


def _ce_train(net: Network, train_set, lr: float, batch: int, epochs: int, seed: int):
    """Plain cross-entropy training, used for the teacher pool."""
    from . import ops
    x_tr, y_tr = train_set
    opt = Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(x_tr))
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            opt.zero_grad()
            logits = net.forward(x_tr[idx], train=True)
            net.backward(ops.cross_entropy_batch_grad(logits, y_tr[idx]).astype(logits.dtype))
            opt.step()
