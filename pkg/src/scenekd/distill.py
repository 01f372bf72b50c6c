"""Temperature-scaled distillation objective and the student training loop.

The combined loss is (1 - alpha) * CE(student, label) + alpha * T^2 *
KL(softened ensemble || softened student). Only the student receives
gradients; the ensemble target is a frozen function of the input.
"""

from __future__ import annotations

import json
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import InputError, ParameterError
from .nn import Network
from .optim import Adam


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 2.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if not 0 <= self.alpha <= 1:
            raise ParameterError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class OptConfig:
    lr: float = 1e-4
    batch: int = 64
    epochs: int = 80
    seed: int = 0


@dataclass
class DistillBatchResult:
    loss_total: float
    loss_ce: float
    loss_kd: float
    student_logit_grads: np.ndarray


def soften(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / T); T=1 is plain softmax, large T approaches uniform."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    return ops.softmax(np.asarray(logits) / temperature, axis=-1)


def kd_term(student_logits: np.ndarray, ensemble_logits: np.ndarray,
            temperature: float) -> float:
    """T^2 * KL(softened ensemble || softened student), for one logit vector."""
    s = np.asarray(student_logits, dtype=np.float64)
    e = np.asarray(ensemble_logits, dtype=np.float64)
    if s.shape != e.shape:
        raise InputError(f"student logits {s.shape} vs ensemble logits {e.shape}")
    # both sides in log space so identical logits cancel exactly to zero
    log_q = ops.log_softmax(e / temperature, axis=-1)
    log_p = ops.log_softmax(s / temperature, axis=-1)
    return float(temperature**2 * np.sum(np.exp(log_q) * (log_q - log_p)))


def kd_term_grad(student_logits: np.ndarray, ensemble_logits: np.ndarray,
                 temperature: float) -> np.ndarray:
    """Analytic gradient of kd_term w.r.t. the student logits: T * (p_T - q_T)."""
    p = soften(student_logits, temperature)
    q = soften(ensemble_logits, temperature)
    return temperature * (p - q)


def distill_loss(student_logits: np.ndarray, ensemble_logits: np.ndarray,
                 label: int, config: KDConfig) -> DistillBatchResult:
    """Single-sample combined loss; gradients flow only into the student logits."""
    loss_ce = ops.cross_entropy(np.asarray(student_logits), label)
    loss_kd = kd_term(student_logits, ensemble_logits, config.temperature)
    a = config.alpha
    grad = (1 - a) * (ops.softmax(np.asarray(student_logits, dtype=np.float64))
                      - np.eye(len(student_logits))[int(label)])
    grad = grad + a * kd_term_grad(student_logits, ensemble_logits, config.temperature)
    return DistillBatchResult(
        loss_total=(1 - a) * loss_ce + a * loss_kd,
        loss_ce=loss_ce,
        loss_kd=loss_kd,
        student_logit_grads=grad,
    )


def _kl_rows(p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) with the 0*log 0 convention, vectorized."""
    plogp = np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0)
    return (plogp - p * log_q).sum(axis=-1)


def distill_loss_batch(student_logits: np.ndarray, ensemble_logits: np.ndarray,
                       labels: np.ndarray, config: KDConfig) -> DistillBatchResult:
    """Batch-mean combined loss over (N, C) logits."""
    n = student_logits.shape[0]
    t = config.temperature
    loss_ce = ops.cross_entropy_batch(student_logits, labels)
    q = soften(np.asarray(ensemble_logits, dtype=np.float64), t)
    log_p = ops.log_softmax(np.asarray(student_logits, dtype=np.float64) / t, axis=-1)
    loss_kd = float(t**2 * _kl_rows(q, log_p).mean())
    a = config.alpha
    grad = (1 - a) * ops.cross_entropy_batch_grad(student_logits, labels)
    grad = grad + a * kd_term_grad(student_logits, ensemble_logits, t) / n
    return DistillBatchResult((1 - a) * loss_ce + a * loss_kd, loss_ce, loss_kd, grad)


def mean_tempered_kl(student_logits: np.ndarray, ensemble_logits: np.ndarray,
                     temperature: float) -> float:
    """Mean KL(softened student || softened ensemble) over a batch."""
    p = soften(np.asarray(student_logits, dtype=np.float64), temperature)
    log_q = ops.log_softmax(np.asarray(ensemble_logits, dtype=np.float64) / temperature, axis=-1)
    return float(_kl_rows(p, log_q).mean())


def train_student(student: Network,
                  ensemble: Callable[[np.ndarray], np.ndarray] | np.ndarray,
                  dataset: dict[str, tuple[np.ndarray, np.ndarray]],
                  kd_config: KDConfig,
                  opt_config: OptConfig,
                  log_path=None) -> list[dict]:
    """Gradient descent of the student against a frozen ensemble target.

    ensemble is either a callable mapping an input batch to target logits, or a
    precomputed (N, C) array aligned with the training set (the target is
    frozen, so precomputing it once is equivalent). dataset holds "train" and
    optionally "val" (x, y) pairs. Returns per-epoch records; when log_path is
    given they are also appended as JSON lines.
    """
    x_tr, y_tr = dataset["train"]
    if len(x_tr) == 0:
        raise InputError("empty dataset")
    opt = Adam(student.parameters(), lr=opt_config.lr)
    rng = np.random.default_rng(opt_config.seed)
    log = []
    fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(opt_config.epochs):
            order = rng.permutation(len(x_tr))
            tot = np.zeros(3)
            kls, nb = [], 0
            for start in range(0, len(order), opt_config.batch):
                idx = order[start : start + opt_config.batch]
                xb, yb = x_tr[idx], y_tr[idx]
                target = ensemble[idx] if isinstance(ensemble, np.ndarray) else ensemble(xb)
                opt.zero_grad()
                logits = student.forward(xb, train=True)
                res = distill_loss_batch(logits, target, yb, kd_config)
                student.backward(res.student_logit_grads.astype(logits.dtype))
                opt.step()
                tot += (res.loss_total, res.loss_ce, res.loss_kd)
                kls.append(mean_tempered_kl(logits, target, kd_config.temperature))
                nb += 1
            record = {
                "epoch": epoch,
                "loss_total": tot[0] / nb,
                "loss_ce": tot[1] / nb,
                "loss_kd": tot[2] / nb,
                "train_acc": accuracy(student, x_tr, y_tr),
                "val_acc": accuracy(student, *dataset["val"]) if "val" in dataset else None,
                "mean_kl": float(np.mean(kls)),
            }
            log.append(record)
            if fh:
                fh.write(json.dumps(record) + "\n")
    finally:
        if fh:
            fh.close()
    return log


def accuracy(net: Network, x: np.ndarray, y: np.ndarray, batch: int = 256) -> float:
    correct = 0
    for start in range(0, len(x), batch):
        pred = net.forward(x[start : start + batch]).argmax(axis=1)
        correct += int((pred == y[start : start + batch]).sum())
    return correct / len(x)
