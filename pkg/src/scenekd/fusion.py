"""Teacher pool and the two learned logit combiners.

z1 reuses the student backbone to emit one score per teacher; softmaxed scores
become sample-adaptive convex mixture weights over the teachers' logits.
z2 fuses the stacked teacher logits per class (a (C, T) weight matrix) or,
optionally, through a single-hidden-layer MLP over all T*C logits.
Multi-letter fusion modes are the arithmetic mean of their constituents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import FusionError, InputError, PoolError
from .nn import Linear, Network, Parameter, ReLU
from .optim import Adam

FUSION_MODES = ("a1", "z1", "z2", "a1z1", "a1z2", "z1z2", "a1z1z2")


@dataclass
class TeacherPool:
    teachers: list[Network]
    frozen: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.teachers:
            raise PoolError("pool needs at least one teacher")
        if not self.frozen:
            self.frozen = [False] * len(self.teachers)
        if len(self.frozen) != len(self.teachers):
            raise PoolError("frozen flags must match teacher count")
        outs = {t.layers[-1].out_features for t in self.teachers}
        if len(outs) != 1:
            raise PoolError(f"teachers disagree on class count: {sorted(outs)}")

    @property
    def num_teachers(self) -> int:
        return len(self.teachers)

    @property
    def num_classes(self) -> int:
        return self.teachers[0].layers[-1].out_features


def teacher_logits(pool: TeacherPool, x: np.ndarray, train: bool = False) -> np.ndarray:
    """(N, T, C) stack of per-teacher logits.

    Frozen teachers always run in eval mode so their running statistics stay
    bitwise unchanged through the joint combiner phase.
    """
    return np.stack(
        [t.forward(x, train=train and not frozen)
         for t, frozen in zip(pool.teachers, pool.frozen)], axis=1)


def teacher_logits_backward(pool: TeacherPool, grad_tl: np.ndarray):
    """Push (N, T, C) gradients into the unfrozen teachers."""
    for t, (net, frozen) in enumerate(zip(pool.teachers, pool.frozen)):
        if not frozen:
            net.backward(grad_tl[:, t, :])


def fuse_a1(tl: np.ndarray) -> np.ndarray:
    return tl.mean(axis=1)


class Z1Head:
    """Student-backbone network whose head emits one score per teacher."""

    def __init__(self, network: Network):
        self.network = network
        self._cache = None

    @property
    def num_teachers(self) -> int:
        return self.network.layers[-1].out_features

    def parameters(self):
        return self.network.parameters()

    def fuse(self, x: np.ndarray, tl: np.ndarray, train: bool = False):
        """Returns (fused (N, C), weights (N, T)); caches for backward."""
        if tl.shape[1] != self.num_teachers:
            raise FusionError(f"pool has {tl.shape[1]} teachers, z1 head scores {self.num_teachers}")
        scores = self.network.forward(x, train=train)
        weights = ops.softmax(scores, axis=-1)
        fused = np.einsum("nt,ntc->nc", weights, tl)
        self._cache = (weights, tl)
        return fused, weights

    def backward(self, grad_fused: np.ndarray) -> np.ndarray:
        """Backprop through the weighted sum and softmax; returns grad w.r.t. tl."""
        weights, tl = self._cache
        grad_tl = weights[:, :, None] * grad_fused[:, None, :]
        dweights = np.einsum("nc,ntc->nt", grad_fused, tl)
        dscores = weights * (dweights - (weights * dweights).sum(axis=1, keepdims=True))
        self.network.backward(dscores)
        return grad_tl


class Z2Head:
    """Per-class linear fusion (default) or a small MLP over all teacher logits."""

    def __init__(self, num_teachers: int, num_classes: int, mode: str = "per-class-linear",
                 hidden: int = 32, seed: int = 0, dtype=np.float32):
        if mode not in ("per-class-linear", "mlp"):
            raise FusionError(f"unknown z2 mode {mode!r}")
        self.mode = mode
        self.num_teachers = num_teachers
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        if mode == "per-class-linear":
            # uniform init makes z2 start exactly at the a1 average
            self.weight = Parameter("z2.weight",
                                    np.full((num_classes, num_teachers), 1.0 / num_teachers,
                                            dtype=dtype))
            self.bias = Parameter("z2.bias", np.zeros(num_classes, dtype=dtype))
        else:
            self.fc1 = Linear(num_teachers * num_classes, hidden, rng, "z2.fc1", dtype)
            self.act = ReLU("z2.act")
            self.fc2 = Linear(hidden, num_classes, rng, "z2.fc2", dtype)
        self._cache = None

    def parameters(self):
        if self.mode == "per-class-linear":
            return [self.weight, self.bias]
        return self.fc1.parameters() + self.fc2.parameters()

    def fuse(self, tl: np.ndarray, train: bool = False) -> np.ndarray:
        n, t, c = tl.shape
        if t != self.num_teachers or c != self.num_classes:
            raise FusionError(
                f"teacher stack ({t} teachers, {c} classes) does not match z2 head "
                f"({self.num_teachers}, {self.num_classes})")
        if self.mode == "per-class-linear":
            self._cache = tl
            return np.einsum("ct,ntc->nc", self.weight.value, tl) + self.bias.value
        flat = tl.reshape(n, t * c)
        h = self.act.forward(self.fc1.forward(flat, train), train)
        return self.fc2.forward(h, train)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self.mode == "per-class-linear":
            tl = self._cache
            self.weight.grad += np.einsum("nc,ntc->ct", grad_out, tl)
            self.bias.grad += grad_out.sum(axis=0)
            return self.weight.value.T[None, :, :] * grad_out[:, None, :]
        g = self.fc2.backward(grad_out)
        g = self.act.backward(g)
        g = self.fc1.backward(g)
        return g.reshape(-1, self.num_teachers, self.num_classes)

    def state_tensors(self):
        if self.mode == "per-class-linear":
            return {p.name: p.value for p in self.parameters()}
        return {**self.fc1.state_tensors(), **self.fc2.state_tensors()}

    def load_state(self, tensors):
        if self.mode == "per-class-linear":
            self.weight.value = tensors["z2.weight"].astype(self.weight.value.dtype)
            self.bias.value = tensors["z2.bias"].astype(self.bias.value.dtype)
        else:
            self.fc1.load_state(tensors)
            self.fc2.load_state(tensors)


def fuse(mode: str, tl: np.ndarray, x: np.ndarray | None = None,
         z1: Z1Head | None = None, z2: Z2Head | None = None) -> np.ndarray:
    """Evaluate one of the seven fusion modes on a teacher-logit stack."""
    if mode not in FUSION_MODES:
        raise FusionError(f"unknown fusion mode {mode!r}; choose from {FUSION_MODES}")
    parts = []
    if "a1" in mode:
        parts.append(fuse_a1(tl))
    if "z1" in mode:
        if z1 is None or x is None:
            raise FusionError(f"mode {mode!r} needs a z1 head and the network input")
        parts.append(z1.fuse(x, tl)[0])
    if "z2" in mode:
        if z2 is None:
            raise FusionError(f"mode {mode!r} needs a z2 head")
        parts.append(z2.fuse(tl))
    return sum(parts) / len(parts)


def combiner_loss(z1_fused: np.ndarray, z2_out: np.ndarray, labels: np.ndarray,
                  lam: float = 1.0) -> float:
    """Batch-mean CE on the z1 mixture plus lambda times batch-mean CE on z2."""
    if lam < 0:
        raise InputError("lambda must be nonnegative")
    return ops.cross_entropy_batch(z1_fused, labels) + lam * ops.cross_entropy_batch(z2_out, labels)


@dataclass
class CombinerTrainConfig:
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 10
    lam: float = 1.0
    seed: int = 0


def train_combiners(pool: TeacherPool, z1: Z1Head, z2: Z2Head,
                    dataset: tuple[np.ndarray, np.ndarray],
                    config: CombinerTrainConfig) -> list[dict]:
    """Joint gradient descent on the composite loss; teachers receive gradients
    unless their pool freeze flag is set. Returns per-epoch log records."""
    x_all, y_all = dataset
    if len(x_all) == 0:
        raise InputError("empty dataset")
    params = list(z1.parameters()) + list(z2.parameters())
    for net, frozen in zip(pool.teachers, pool.frozen):
        if not frozen:
            params += net.parameters()
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    log = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_all))
        epoch_loss, nb = 0.0, 0
        for start in range(0, len(order), config.batch):
            idx = order[start : start + config.batch]
            xb, yb = x_all[idx], y_all[idx]
            opt.zero_grad()
            tl = teacher_logits(pool, xb, train=True)
            z1_fused, _ = z1.fuse(xb, tl, train=True)
            z2_out = z2.fuse(tl, train=True)
            loss = combiner_loss(z1_fused, z2_out, yb, config.lam)
            d_fused = ops.cross_entropy_batch_grad(z1_fused, yb)
            d_z2 = config.lam * ops.cross_entropy_batch_grad(z2_out, yb)
            grad_tl = z1.backward(d_fused) + z2.backward(d_z2)
            teacher_logits_backward(pool, grad_tl)
            opt.step()
            epoch_loss += loss
            nb += 1
        record = {"epoch": epoch, "loss": epoch_loss / nb}
        record.update(mode_accuracies(pool, z1, z2, x_all, y_all))
        log.append(record)
    return log


def mode_accuracies(pool: TeacherPool, z1: Z1Head, z2: Z2Head,
                    x: np.ndarray, y: np.ndarray, batch: int = 256) -> dict[str, float]:
    """Accuracy of every fusion mode, prefixed acc_<mode>."""
    correct = {m: 0 for m in FUSION_MODES}
    for start in range(0, len(x), batch):
        xb, yb = x[start : start + batch], y[start : start + batch]
        tl = teacher_logits(pool, xb)
        for m in FUSION_MODES:
            pred = fuse(m, tl, x=xb, z1=z1, z2=z2).argmax(axis=1)
            correct[m] += int((pred == yb).sum())
    return {f"acc_{m}": correct[m] / len(x) for m in FUSION_MODES}
