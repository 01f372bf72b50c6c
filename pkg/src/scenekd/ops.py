"""Dense NCHW tensor operations: forward evaluation plus exact analytic gradients.

Every differentiable operation here comes in a forward/backward pair. There is
no autograd graph; networks apply the chain rule in reverse layer order and
each backward is independently testable against finite differences.

Activations use NCHW layout. Accumulation happens in the input dtype, so
float64 inputs give float64 accumulation (the test-precision mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError, ParameterError, SpecError


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        for f in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "groups"):
            if getattr(self, f) < 1:
                raise SpecError(f"{f} must be a positive integer")
        if self.padding < 0:
            raise SpecError("padding must be nonnegative")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise SpecError(
                f"channels ({self.in_channels} in, {self.out_channels} out) "
                f"not divisible by groups={self.groups}"
            )

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise DimensionError(
                f"spatial input {h}x{w} too small for kernel "
                f"{self.kernel_h}x{self.kernel_w} stride {self.stride} pad {self.padding}"
            )
        return oh, ow


def _conv_windows(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Strided (N, G, Cin/G, Ho, Wo, Kh, Kw) view of the padded input."""
    n, c = x.shape[:2]
    p, s = spec.padding, spec.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    win = win[:, :, ::s, ::s]
    g = spec.groups
    return win.reshape(n, g, c // g, *win.shape[2:])


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Grouped 2-D convolution (cross-correlation), direct MAC semantics."""
    _check_conv_shapes(x, weight, bias, spec)
    n = x.shape[0]
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    if _is_pointwise(spec):
        out = np.tensordot(weight[:, :, 0, 0], x, axes=([1], [1])).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(out) + bias.reshape(1, -1, 1, 1)
    if spec.depthwise:
        # shift-and-add: one fused multiply-add per kernel tap, no window views
        s, p = spec.stride, spec.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        out = np.zeros((n, spec.out_channels, oh, ow), dtype=x.dtype)
        for i in range(spec.kernel_h):
            for j in range(spec.kernel_w):
                out += xp[:, :, i : i + oh * s : s, j : j + ow * s : s] \
                    * weight[None, :, 0, i, j, None, None]
        return out + bias.reshape(1, -1, 1, 1)
    win = _conv_windows(x, spec)
    if spec.groups == 1:
        # (N,1,C,Ho,Wo,Kh,Kw) x (Co,C,Kh,Kw) -> (N,Ho,Wo,Co), BLAS-backed
        out = np.tensordot(win[:, 0], weight, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
    else:
        wg = weight.reshape(spec.groups, spec.out_channels // spec.groups,
                            spec.in_channels // spec.groups, spec.kernel_h, spec.kernel_w)
        out = np.einsum("ngchwkl,gockl->ngohw", win, wg, optimize=True)
        out = out.reshape(n, spec.out_channels, oh, ow)
    out = np.ascontiguousarray(out.reshape(n, spec.out_channels, oh, ow))
    return out + bias.reshape(1, -1, 1, 1)


def _is_pointwise(spec: ConvSpec) -> bool:
    return (spec.kernel_h == spec.kernel_w == 1 and spec.stride == 1
            and spec.padding == 0 and spec.groups == 1)


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, spec: ConvSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss through conv2d w.r.t. input, weight, bias."""
    _check_conv_shapes(x, weight, np.zeros(spec.out_channels, x.dtype), spec)
    n, _, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != forward output {(n, spec.out_channels, oh, ow)}"
        )
    g = spec.groups
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding

    grad_bias = grad_out.sum(axis=(0, 2, 3))

    if _is_pointwise(spec):
        grad_weight = np.tensordot(grad_out, x, axes=([0, 2, 3], [0, 2, 3]))
        grad_weight = grad_weight.reshape(weight.shape)
        grad_input = np.tensordot(weight[:, :, 0, 0], grad_out,
                                  axes=([0], [1])).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(grad_input), grad_weight, grad_bias
    if spec.depthwise:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        grad_weight = np.empty_like(weight)
        dx_pad = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = xp[:, :, i : i + oh * s : s, j : j + ow * s : s]
                grad_weight[:, 0, i, j] = (grad_out * sl).sum(axis=(0, 2, 3))
                dx_pad[:, :, i : i + oh * s : s, j : j + ow * s : s] += \
                    grad_out * weight[None, :, 0, i, j, None, None]
        grad_input = dx_pad[:, :, p : p + h, p : p + w] if p else dx_pad
        return grad_input, grad_weight, grad_bias

    win = _conv_windows(x, spec)
    if g == 1:
        grad_weight = np.tensordot(grad_out, win[:, 0], axes=([0, 2, 3], [0, 2, 3]))
        gwin = np.tensordot(grad_out, weight, axes=([1], [0]))  # (N,Ho,Wo,C,Kh,Kw)
        gwin = gwin.transpose(0, 3, 1, 2, 4, 5)
    else:
        gog = grad_out.reshape(n, g, spec.out_channels // g, oh, ow)
        grad_weight = np.einsum("ngchwkl,ngohw->gockl", win, gog, optimize=True)
        grad_weight = grad_weight.reshape(weight.shape)
        wg = weight.reshape(g, spec.out_channels // g, spec.in_channels // g, kh, kw)
        gwin = np.einsum("gockl,ngohw->ngchwkl", wg, gog, optimize=True)
        gwin = gwin.reshape(n, spec.in_channels, oh, ow, kh, kw)
    dx_pad = np.zeros((n, spec.in_channels, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dx_pad[:, :, i : i + oh * s : s, j : j + ow * s : s] += gwin[..., i, j]
    grad_input = dx_pad[:, :, p : p + h, p : p + w] if p else dx_pad
    return grad_input, grad_weight, grad_bias


def _check_conv_shapes(x, weight, bias, spec: ConvSpec):
    if x.ndim != 4:
        raise DimensionError(f"input must be rank 4 (N,C,H,W), got rank {x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"input channel axis is {x.shape[1]}, spec says {spec.in_channels}")
    expect_w = (spec.out_channels, spec.in_channels // spec.groups, spec.kernel_h, spec.kernel_w)
    if weight.shape != expect_w:
        raise DimensionError(f"weight shape {weight.shape} != {expect_w}")
    if bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias length {bias.shape} != ({spec.out_channels},)")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def batch_norm(x, mean, var, gamma, beta, eps: float = 1e-6):
    """Inference-style per-channel normalization with supplied statistics."""
    if eps <= 0:
        raise ParameterError("eps must be positive")
    for name, v in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        if np.shape(v) != (x.shape[1],):
            raise DimensionError(f"{name} length {np.shape(v)} != channel axis ({x.shape[1]},)")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = (1.0 / np.sqrt(var + eps)).reshape(shape)
    return (x - mean.reshape(shape)) * inv * gamma.reshape(shape) + beta.reshape(shape)


def batch_norm_backward(grad_out, x, mean, var, gamma, eps: float = 1e-6):
    """Gradients of batch_norm treating mean/var as constants (inference mode)."""
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    axes = (0,) + tuple(range(2, x.ndim))
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    grad_input = grad_out * (gamma * inv).reshape(shape)
    return grad_input, grad_gamma, grad_beta


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"expected rank-4 input, got rank {x.ndim}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out: np.ndarray, x_shape) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(grad_out[:, :, None, None], (n, c, h, w)) / (h * w)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x (N, In) @ weight (Out, In)^T + bias."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    return x @ weight.T + bias


def linear_backward(grad_out, x, weight):
    grad_input = grad_out @ weight
    grad_weight = grad_out.T @ x
    grad_bias = grad_out.sum(axis=0)
    return grad_input, grad_weight, grad_bias


def grn(x, gamma, beta, eps: float = 1e-6):
    """Global response normalization: divisive channel competition on spatial L2
    energy, learnable per-channel affine, residual pass-through.

    Zero-initialized gamma/beta make this the exact identity.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    if np.shape(gamma) != (x.shape[1],) or np.shape(beta) != (x.shape[1],):
        raise DimensionError(f"gamma/beta must have length {x.shape[1]}")
    g = np.sqrt((x * x).sum(axis=(2, 3), keepdims=True))
    nrm = g / (g.mean(axis=1, keepdims=True) + eps)
    return x + beta.reshape(1, -1, 1, 1) + gamma.reshape(1, -1, 1, 1) * x * nrm


def grn_backward(grad_out, x, gamma, eps: float = 1e-6):
    if grad_out.shape != x.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    c = x.shape[1]
    gam = gamma.reshape(1, -1, 1, 1)
    g = np.sqrt((x * x).sum(axis=(2, 3), keepdims=True))  # (N, C, 1, 1)
    d = g.mean(axis=1, keepdims=True) + eps
    nrm = g / d

    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * x * nrm).sum(axis=(0, 2, 3))

    grad_input = grad_out * (1.0 + gam * nrm)
    # through the norm statistic: s = dL/dNrm per (n, c)
    s = (grad_out * gam * x).sum(axis=(2, 3), keepdims=True)
    dg = s / d - (s * g).sum(axis=1, keepdims=True) / (d * d * c)
    grad_input = grad_input + np.where(g > 0, dg / np.maximum(g, 1e-300), 0.0) * x
    return grad_input, grad_gamma, grad_beta


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def kl_div(p: np.ndarray, log_q: np.ndarray) -> float:
    """Sum_c p_c (log p_c - log q_c) with the 0*log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    log_q = np.asarray(log_q, dtype=np.float64)
    if p.shape != log_q.shape:
        raise DimensionError(f"p shape {p.shape} != log_q shape {log_q.shape}")
    if np.any(p < -1e-12):
        raise InputError("p has negative entries")
    if abs(p.sum() - 1.0) > 1e-6:
        raise InputError(f"p sums to {p.sum():.8f}, not 1 within 1e-6")
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - log_q[mask])))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label] for a single logit vector."""
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise DimensionError("cross_entropy takes a rank-1 logit vector")
    c = logits.shape[0]
    if not 0 <= int(label) < c:
        raise InputError(f"label {label} out of range [0, {c})")
    return float(-log_softmax(logits)[int(label)])


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over a (N, C) batch."""
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"labels outside [0, {c})")
    ls = log_softmax(logits, axis=-1)
    return float(-ls[np.arange(len(labels)), labels].mean())


def cross_entropy_batch_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean batch cross-entropy w.r.t. the logits."""
    n = logits.shape[0]
    g = softmax(logits, axis=-1)
    g[np.arange(n), np.asarray(labels)] -= 1.0
    return g / n
