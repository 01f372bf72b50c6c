"""Operator fusion and affine int8 quantization.

Convention: asymmetric per-tensor quantization for activations, symmetric
per-output-channel for weights, int8 operands with integer accumulators.
Requantization between layers uses a fixed-point multiplier (int mantissa +
right shift) so integer inference is bit-reproducible. Rounding is always
half-away-from-zero. ReLU is fused by clamping the requantized output at the
zero point.

GRN and residual adds run on dequantized values between fused conv nodes and
are requantized afterwards; with zero-initialized GRN this is a plain
round trip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tnsr
from .errors import FoldError, ParameterError, StateError
from .nn import Block, Conv2d, GlobalAvgPool, Linear, Network
from .ops import ConvSpec, conv2d, global_avg_pool, grn, linear, relu

SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ParameterError("scale must be positive")
        if not -128 <= self.zero_point <= 127:
            raise ParameterError("zero_point must lie in [-128, 127]")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_tensor(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    q = round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, -128, 127).astype(np.int8)


def dequantize(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    return (q.astype(np.float64) - qp.zero_point) * qp.scale


def fake_quant(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Forward of the straight-through fake-quantization round trip."""
    return dequantize(quantize_tensor(x, qp), qp)


def fake_quant_grad_mask(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """STE gradient multiplier: 1 inside the representable clamp range, 0 outside."""
    lo = (-128 - qp.zero_point) * qp.scale
    hi = (127 - qp.zero_point) * qp.scale
    return ((x >= lo) & (x <= hi)).astype(np.float64)


def activation_qparams(min_obs: float, max_obs: float) -> QuantParams:
    scale = (max_obs - min_obs) / 255.0
    if scale < SCALE_FLOOR:
        return QuantParams(SCALE_FLOOR, 0)
    zp = int(np.clip(round_half_away(np.array(-min_obs / scale)) - 128, -128, 127))
    return QuantParams(scale, zp)


def weight_qparams(w: np.ndarray) -> np.ndarray:
    """Per-output-channel symmetric scales, floored for all-zero channels."""
    flat = np.abs(w.reshape(w.shape[0], -1)).max(axis=1) / 127.0
    return np.maximum(flat, SCALE_FLOOR)


def quantize_multiplier(m_real: float) -> tuple[int, int]:
    """Represent m_real as mantissa * 2^-shift with a 31-bit mantissa."""
    if m_real == 0:
        return 0, 0
    frac, exp = math.frexp(m_real)  # m_real = frac * 2^exp, frac in [0.5, 1)
    mant = int(round(frac * (1 << 31)))
    if mant == 1 << 31:
        mant >>= 1
        exp += 1
    return mant, 31 - exp


def fixed_point_mul(acc: np.ndarray, mantissa: int, shift: int) -> np.ndarray:
    """round_half_away(acc * mantissa * 2^-shift) in pure integer arithmetic."""
    prod = acc.astype(np.int64) * np.int64(mantissa)
    if shift <= 0:
        return prod << (-shift)
    half = np.int64(1) << (shift - 1)
    mag = (np.abs(prod) + half) >> shift
    return np.where(prod >= 0, mag, -mag)


def fold_norm(conv_w: np.ndarray, conv_b: np.ndarray, mu: np.ndarray, var: np.ndarray,
              gamma: np.ndarray, beta: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Fold per-channel normalization statistics into conv weights and bias."""
    cout = conv_w.shape[0]
    for name, v in (("mu", mu), ("var", var), ("gamma", gamma), ("beta", beta)):
        if np.shape(v) != (cout,):
            raise FoldError(f"{name} length {np.shape(v)} does not match {cout} output channels")
    if conv_b.shape != (cout,):
        raise FoldError(f"bias length {conv_b.shape} does not match {cout} output channels")
    inv = gamma / np.sqrt(var + eps)
    w = conv_w * inv.reshape(-1, *([1] * (conv_w.ndim - 1)))
    b = (conv_b - mu) * inv + beta
    return w, b


@dataclass
class FusedConv:
    """A conv-norm-activation triple collapsed to one float node."""

    name: str
    spec: ConvSpec
    weight: np.ndarray
    bias: np.ndarray
    relu: bool

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = conv2d(x, self.weight, self.bias, self.spec)
        return relu(y) if self.relu else y


@dataclass
class BlockTail:
    """Residual add plus GRN, applied after a block's fused project conv."""

    name: str
    residual: bool
    gamma: np.ndarray
    beta: np.ndarray
    eps: float

    def forward(self, y: np.ndarray, block_in: np.ndarray) -> np.ndarray:
        if self.residual:
            y = y + block_in
        return grn(y, self.gamma, self.beta, self.eps)


def fuse_network(net: Network) -> list:
    """Collapse a float network into [FusedConv | BlockTail | gap | head] nodes."""
    nodes = []
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            nodes.append(FusedConv(layer.name, layer.spec,
                                   layer.weight.value.astype(np.float64),
                                   layer.bias.value.astype(np.float64), relu=False))
        elif isinstance(layer, Block):
            for conv, bn, act in ((layer.expand, layer.expand_bn, True),
                                  (layer.dw, layer.dw_bn, True),
                                  (layer.project, layer.project_bn, False)):
                w, b = fold_norm(conv.weight.value.astype(np.float64),
                                 conv.bias.value.astype(np.float64),
                                 bn.running_mean.astype(np.float64),
                                 bn.running_var.astype(np.float64),
                                 bn.gamma.value.astype(np.float64),
                                 bn.beta.value.astype(np.float64), bn.eps)
                nodes.append(FusedConv(conv.name, conv.spec, w, b, relu=act))
            nodes.append(BlockTail(f"{layer.name}.tail", layer.residual,
                                   layer.grn.gamma.value.astype(np.float64),
                                   layer.grn.beta.value.astype(np.float64), layer.grn.eps))
        elif isinstance(layer, GlobalAvgPool):
            nodes.append("gap")
        elif isinstance(layer, Linear):
            nodes.append(("head", layer.weight.value.astype(np.float64),
                          layer.bias.value.astype(np.float64)))
        else:
            raise StateError(f"layer {layer.name} has no fused form")
    return nodes


def fused_forward(nodes: list, x: np.ndarray, observer=None) -> np.ndarray:
    """Run the fused float graph; optionally record per-tensor ranges."""
    if observer is not None:
        observer.update("input", x)
    block_in = None
    for node in nodes:
        if isinstance(node, FusedConv):
            if node.name.endswith(".expand"):
                block_in = x
            x = node.forward(x)
        elif isinstance(node, BlockTail):
            x = node.forward(x, block_in)
        elif node == "gap":
            x = global_avg_pool(x)
        else:
            _, w, b = node
            x = linear(x, w, b)
            continue  # head logits stay float and unobserved
        if observer is not None:
            name = node if node == "gap" else node.name
            observer.update(name, x)
    return x


class RangeObserver:
    """Monotone per-tensor min/max tracker; ranges only ever widen."""

    def __init__(self):
        self.ranges: dict[str, tuple[float, float]] = {}

    def update(self, name: str, arr: np.ndarray):
        lo, hi = float(arr.min()), float(arr.max())
        if name in self.ranges:
            plo, phi = self.ranges[name]
            lo, hi = min(lo, plo), max(hi, phi)
        self.ranges[name] = (lo, hi)

    def qparams(self) -> tuple[dict[str, QuantParams], list[str]]:
        out, warnings = {}, []
        for name, (lo, hi) in self.ranges.items():
            qp = activation_qparams(lo, hi)
            if qp.scale == SCALE_FLOOR:
                warnings.append(f"{name}: degenerate range [{lo}, {hi}], scale floored")
            out[name] = qp
        return out, warnings


@dataclass
class QConv:
    name: str
    spec: ConvSpec
    weight_q: np.ndarray  # int8
    bias_q: np.ndarray  # int64, scale s_in * s_w[o]
    in_qp: QuantParams
    out_qp: QuantParams
    mantissa: np.ndarray  # per output channel
    shift: np.ndarray
    relu: bool

    def run(self, q_in: np.ndarray) -> np.ndarray:
        acc = _int_conv(q_in, self.in_qp.zero_point, self.weight_q, self.spec)
        acc += self.bias_q.reshape(1, -1, 1, 1)
        out = np.empty_like(acc)
        for o in range(acc.shape[1]):
            out[:, o] = fixed_point_mul(acc[:, o], int(self.mantissa[o]), int(self.shift[o]))
        out += self.out_qp.zero_point
        if self.relu:
            out = np.maximum(out, self.out_qp.zero_point)
        return np.clip(out, -128, 127).astype(np.int8)


def _int_conv(q_in: np.ndarray, zp_in: int, w_q: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Integer conv accumulation: sum (q - zp) * w over the receptive field."""
    x = q_in.astype(np.int64) - zp_in
    w = w_q.astype(np.int64)
    return conv2d(x, w, np.zeros(spec.out_channels, dtype=np.int64), spec)


class QuantModel:
    """Integer-inference model: int8 fused convs, float GRN/residual glue."""

    def __init__(self, nodes: list, input_qp: QuantParams, tail_qps: dict[str, QuantParams],
                 gap_qp: QuantParams, head, warnings: list[str]):
        self.nodes = nodes  # QConv | BlockTail
        self.input_qp = input_qp
        self.tail_qps = tail_qps
        self.gap_qp = gap_qp
        self.head = head  # (weight_q int8, w_scales, bias float)
        self.warnings = warnings

    def int_forward(self, x: np.ndarray) -> np.ndarray:
        """int8 inference on a float input batch; returns float logits."""
        q = quantize_tensor(x, self.input_qp)
        qp = self.input_qp
        block_in, block_in_qp = None, None
        for node in self.nodes:
            if isinstance(node, QConv):
                if node.name.endswith(".expand"):
                    block_in, block_in_qp = q, qp
                q = node.run(q)
                qp = node.out_qp
            else:  # BlockTail: dequantized glue, then requantize
                y = dequantize(q, qp)
                if node.residual:
                    y = y + dequantize(block_in, block_in_qp)
                y = grn(y, node.gamma, node.beta, node.eps)
                qp = self.tail_qps[node.name]
                q = quantize_tensor(y, qp)
        # integer global average pool at unchanged scale
        n, c, h, w = q.shape
        acc = (q.astype(np.int64) - qp.zero_point).sum(axis=(2, 3))
        mant, sh = quantize_multiplier(1.0 / (h * w))
        pooled = fixed_point_mul(acc, mant, sh) + self.gap_qp.zero_point
        q = np.clip(pooled, -128, 127).astype(np.int8)
        w_q, w_scales, bias = self.head
        acc = (q.astype(np.int64) - self.gap_qp.zero_point) @ w_q.astype(np.int64).T
        return acc * (self.gap_qp.scale * w_scales) + bias


def quantize_conv_node(fc: FusedConv, in_qp: QuantParams, out_qp: QuantParams) -> QConv:
    w_scales = weight_qparams(fc.weight)
    w_q = np.clip(round_half_away(fc.weight / w_scales.reshape(-1, *([1] * (fc.weight.ndim - 1)))),
                  -127, 127).astype(np.int8)
    bias_q = round_half_away(fc.bias / (in_qp.scale * w_scales)).astype(np.int64)
    mantissa = np.zeros(fc.spec.out_channels, dtype=np.int64)
    shift = np.zeros(fc.spec.out_channels, dtype=np.int64)
    for o in range(fc.spec.out_channels):
        mantissa[o], shift[o] = quantize_multiplier(in_qp.scale * w_scales[o] / out_qp.scale)
    return QConv(fc.name, fc.spec, w_q, bias_q, in_qp, out_qp, mantissa, shift, fc.relu)


def calibrate(net: Network, calib_batches: list[np.ndarray]) -> QuantModel:
    """Fold, observe activation ranges on calibration data, and build the int model."""
    if not calib_batches:
        raise StateError("calibration requires at least one batch")
    fused = fuse_network(net)
    obs = RangeObserver()
    for xb in calib_batches:
        fused_forward(fused, np.asarray(xb, dtype=np.float64), observer=obs)
    qps, warnings = obs.qparams()

    qnodes = []
    tail_qps = {}
    cur_qp = qps["input"]
    for node in fused:
        if isinstance(node, FusedConv):
            qnodes.append(quantize_conv_node(node, cur_qp, qps[node.name]))
            cur_qp = qps[node.name]
        elif isinstance(node, BlockTail):
            qnodes.append(node)
            tail_qps[node.name] = qps[node.name]
            cur_qp = qps[node.name]
        elif node == "gap":
            gap_qp = qps["gap"]
        else:
            _, w, b = node
            w_scales = weight_qparams(w)
            w_q = np.clip(round_half_away(w / w_scales[:, None]), -127, 127).astype(np.int8)
            head = (w_q, w_scales, b)
    return QuantModel(qnodes, qps["input"], tail_qps, gap_qp, head, warnings)


class FakeQuantLayer:
    """Straight-through fake quantization at a fixed calibrated range."""

    def __init__(self, qp: QuantParams, name: str):
        self.name = name
        self.qp = qp
        self._x = None

    def parameters(self):
        return []

    def state_tensors(self):
        return {}

    def load_state(self, tensors):
        pass

    def forward(self, x, train=False):
        self._x = x
        return fake_quant(x, self.qp).astype(x.dtype)

    def backward(self, grad_out):
        return grad_out * fake_quant_grad_mask(self._x, self.qp).astype(grad_out.dtype)

    def out_channels_hw(self, c, h, w):
        return c, h, w


def qat_network(net: Network, calib_batches: list[np.ndarray]) -> Network:
    """Wrap a trained network for quantization-aware fine-tuning: fake-quant
    nodes at the calibrated activation points, parameters shared with net."""
    fused = fuse_network(net)
    obs = RangeObserver()
    for xb in calib_batches:
        fused_forward(fused, np.asarray(xb, dtype=np.float64), observer=obs)
    qps, _ = obs.qparams()
    layers = [FakeQuantLayer(qps["input"], "fq.input")]
    for layer in net.layers:
        layers.append(layer)
        if isinstance(layer, Conv2d) and layer.name in qps:
            layers.append(FakeQuantLayer(qps[layer.name], f"fq.{layer.name}"))
        elif isinstance(layer, Block):
            layers.append(FakeQuantLayer(qps[f"{layer.name}.tail"], f"fq.{layer.name}"))
        elif isinstance(layer, GlobalAvgPool):
            layers.append(FakeQuantLayer(qps["gap"], "fq.gap"))
    return Network(layers, net.input_shape)


def save_quant_model(path, qm: QuantModel) -> None:
    tensors = {}
    meta = {"format": "scenekd-quant", "format_version": 1,
            "input_qp": [qm.input_qp.scale, qm.input_qp.zero_point],
            "gap_qp": [qm.gap_qp.scale, qm.gap_qp.zero_point],
            "warnings": qm.warnings, "nodes": []}
    for i, node in enumerate(qm.nodes):
        if isinstance(node, QConv):
            meta["nodes"].append({
                "kind": "conv", "name": node.name, "relu": node.relu,
                "spec": [node.spec.in_channels, node.spec.out_channels, node.spec.kernel_h,
                         node.spec.kernel_w, node.spec.stride, node.spec.padding,
                         node.spec.groups],
                "in_qp": [node.in_qp.scale, node.in_qp.zero_point],
                "out_qp": [node.out_qp.scale, node.out_qp.zero_point],
            })
            tensors[f"n{i}.weight_q"] = node.weight_q
            tensors[f"n{i}.bias_q"] = node.bias_q.astype(np.float64)
            tensors[f"n{i}.mantissa"] = node.mantissa.astype(np.float64)
            tensors[f"n{i}.shift"] = node.shift.astype(np.float64)
        else:
            qp = qm.tail_qps[node.name]
            meta["nodes"].append({"kind": "tail", "name": node.name,
                                  "residual": node.residual, "eps": node.eps,
                                  "out_qp": [qp.scale, qp.zero_point]})
            tensors[f"n{i}.gamma"] = node.gamma.astype(np.float64)
            tensors[f"n{i}.beta"] = node.beta.astype(np.float64)
    w_q, w_scales, bias = qm.head
    tensors["head.weight_q"] = w_q
    tensors["head.w_scales"] = w_scales.astype(np.float64)
    tensors["head.bias"] = np.asarray(bias, dtype=np.float64)
    tnsr.write_checkpoint(path, tensors, meta=meta)


def load_quant_model(path) -> QuantModel:
    meta = tnsr.read_checkpoint_meta(path)
    if meta.get("format") != "scenekd-quant" or meta.get("format_version") != 1:
        raise StateError("not a version-1 quantized checkpoint")
    tensors = tnsr.read_checkpoint(path)
    nodes, tail_qps = [], {}
    for i, nd in enumerate(meta["nodes"]):
        if nd["kind"] == "conv":
            nodes.append(QConv(
                nd["name"], ConvSpec(*nd["spec"]),
                tensors[f"n{i}.weight_q"], tensors[f"n{i}.bias_q"].astype(np.int64),
                QuantParams(*_qp(nd["in_qp"])), QuantParams(*_qp(nd["out_qp"])),
                tensors[f"n{i}.mantissa"].astype(np.int64),
                tensors[f"n{i}.shift"].astype(np.int64), nd["relu"]))
        else:
            nodes.append(BlockTail(nd["name"], nd["residual"],
                                   tensors[f"n{i}.gamma"], tensors[f"n{i}.beta"], nd["eps"]))
            tail_qps[nd["name"]] = QuantParams(*_qp(nd["out_qp"]))
    head = (tensors["head.weight_q"], tensors["head.w_scales"], tensors["head.bias"])
    return QuantModel(nodes, QuantParams(*_qp(meta["input_qp"])), tail_qps,
                      QuantParams(*_qp(meta["gap_qp"])), head, meta.get("warnings", []))


def _qp(pair):
    return float(pair[0]), int(pair[1])
