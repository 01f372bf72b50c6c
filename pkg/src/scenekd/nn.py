"""Layers with explicit forward/backward, assembled into sequential networks.

No autograd graph: each layer caches what its backward needs, and the network
applies the chain rule in reverse layer order. Parameters accumulate gradients
in-place; an optimizer consumes them.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import DimensionError
from .ops import ConvSpec


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base layer; subclasses cache forward state for the matching backward."""

    name: str = ""

    def parameters(self) -> list[Parameter]:
        return []

    def state_tensors(self) -> dict[str, np.ndarray]:
        """All persistent tensors (learnable + running stats) for checkpoints."""
        return {p.name: p.value for p in self.parameters()}

    def load_state(self, tensors: dict[str, np.ndarray]):
        for p in self.parameters():
            p.value = tensors[p.name].astype(p.value.dtype)
            p.grad = np.zeros_like(p.value)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_channels_hw(self, c: int, h: int, w: int) -> tuple[int, int, int]:
        """Analytic shape propagation, (C, H, W) -> (C, H, W)."""
        return c, h, w


class Conv2d(Layer):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, name: str, dtype=np.float32):
        self.name = name
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel_h * spec.kernel_w
        wshape = (spec.out_channels, spec.in_channels // spec.groups, spec.kernel_h, spec.kernel_w)
        self.weight = Parameter(f"{name}.weight", he_uniform(rng, wshape, fan_in, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.out_channels, dtype=dtype))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        self._x = x
        return ops.conv2d(x, self.weight.value, self.bias.value, self.spec)

    def backward(self, grad_out):
        gx, gw, gb = ops.conv2d_backward(grad_out, self._x, self.weight.value, self.spec)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def out_channels_hw(self, c, h, w):
        if c != self.spec.in_channels:
            raise DimensionError(f"{self.name}: got {c} channels, expected {self.spec.in_channels}")
        oh, ow = self.spec.out_hw(h, w)
        return self.spec.out_channels, oh, ow


class BatchNorm2d(Layer):
    """Per-channel batch norm; batch statistics in training, running stats at eval."""

    def __init__(self, channels: int, name: str, eps: float = 1e-6, momentum: float = 0.1,
                 dtype=np.float32):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def state_tensors(self):
        return {
            self.gamma.name: self.gamma.value,
            self.beta.name: self.beta.value,
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def load_state(self, tensors):
        super().load_state(tensors)
        self.running_mean = tensors[f"{self.name}.running_mean"].astype(self.running_mean.dtype)
        self.running_var = tensors[f"{self.name}.running_var"].astype(self.running_var.dtype)

    def forward(self, x, train=False):
        axes = (0, 2, 3)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(x.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        self._cache = (xhat, inv, train)
        return self.gamma.value.reshape(1, -1, 1, 1) * xhat + self.beta.value.reshape(1, -1, 1, 1)

    def backward(self, grad_out):
        xhat, inv, train = self._cache
        axes = (0, 2, 3)
        self.gamma.grad += (grad_out * xhat).sum(axis=axes)
        self.beta.grad += grad_out.sum(axis=axes)
        dxhat = grad_out * self.gamma.value.reshape(1, -1, 1, 1)
        if not train:
            return dxhat * inv.reshape(1, -1, 1, 1)
        m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return (inv.reshape(1, -1, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        self.name = name
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return ops.relu(x)

    def backward(self, grad_out):
        return ops.relu_backward(grad_out, self._x)


class GRN(Layer):
    """Global response normalization; gamma/beta start at zero (exact identity)."""

    def __init__(self, channels: int, name: str, eps: float = 1e-6, dtype=np.float32):
        self.name = name
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.zeros(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self._x = None

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x, train=False):
        self._x = x
        return ops.grn(x, self.gamma.value, self.beta.value, self.eps)

    def backward(self, grad_out):
        gx, gg, gb = ops.grn_backward(grad_out, self._x, self.gamma.value, self.eps)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx


class GlobalAvgPool(Layer):
    def __init__(self, name: str = "gap"):
        self.name = name
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return ops.global_avg_pool(x)

    def backward(self, grad_out):
        return ops.global_avg_pool_backward(grad_out, self._shape)

    def out_channels_hw(self, c, h, w):
        return c, 1, 1


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 name: str, dtype=np.float32):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            f"{name}.weight", he_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, dtype=dtype))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        self._x = x
        return ops.linear(x, self.weight.value, self.bias.value)

    def backward(self, grad_out):
        gx, gw, gb = ops.linear_backward(grad_out, self._x, self.weight.value)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def out_channels_hw(self, c, h, w):
        return self.out_features, 1, 1


class Block(Layer):
    """Expand-depthwise-project block with optional residual and trailing GRN."""

    def __init__(self, in_ch: int, out_ch: int, hidden: int, kernel: int, stride: int,
                 rng: np.random.Generator, name: str, dtype=np.float32, eps: float = 1e-6):
        self.name = name
        self.residual = stride == 1 and in_ch == out_ch
        pad = kernel // 2
        self.expand = Conv2d(ConvSpec(in_ch, hidden, 1, 1), rng, f"{name}.expand", dtype)
        self.expand_bn = BatchNorm2d(hidden, f"{name}.expand_bn", eps, dtype=dtype)
        self.expand_act = ReLU(f"{name}.expand_act")
        self.dw = Conv2d(
            ConvSpec(hidden, hidden, kernel, kernel, stride, pad, groups=hidden),
            rng, f"{name}.dw", dtype)
        self.dw_bn = BatchNorm2d(hidden, f"{name}.dw_bn", eps, dtype=dtype)
        self.dw_act = ReLU(f"{name}.dw_act")
        self.project = Conv2d(ConvSpec(hidden, out_ch, 1, 1), rng, f"{name}.project", dtype)
        self.project_bn = BatchNorm2d(out_ch, f"{name}.project_bn", eps, dtype=dtype)
        self.grn = GRN(out_ch, f"{name}.grn", eps, dtype=dtype)

    def sublayers(self) -> list[Layer]:
        return [self.expand, self.expand_bn, self.expand_act,
                self.dw, self.dw_bn, self.dw_act,
                self.project, self.project_bn, self.grn]

    def parameters(self):
        return [p for sub in self.sublayers() for p in sub.parameters()]

    def state_tensors(self):
        out = {}
        for sub in self.sublayers():
            out.update(sub.state_tensors())
        return out

    def load_state(self, tensors):
        for sub in self.sublayers():
            sub.load_state(tensors)

    def forward(self, x, train=False):
        y = x
        for sub in self.sublayers()[:-1]:
            y = sub.forward(y, train)
        if self.residual:
            y = y + x
        return self.grn.forward(y, train)

    def backward(self, grad_out):
        g = self.grn.backward(grad_out)
        g_res = g if self.residual else None
        for sub in reversed(self.sublayers()[:-1]):
            g = sub.backward(g)
        if g_res is not None:
            g = g + g_res
        return g

    def out_channels_hw(self, c, h, w):
        for sub in (self.expand, self.dw, self.project):
            c, h, w = sub.out_channels_hw(c, h, w)
        return c, h, w


class Network:
    """A plain sequence of layers with reverse-order backprop."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, int, int]):
        self.layers = layers
        self.input_shape = input_shape  # (C, H, W)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            try:
                x = layer.forward(x, train)
            except DimensionError as e:
                raise DimensionError(f"layer {layer.name}: {e}") from e
        return x

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.state_tensors())
        return out

    def load_state(self, tensors: dict[str, np.ndarray]):
        for layer in self.layers:
            layer.load_state(tensors)

    def output_shapes(self) -> list[tuple[int, int, int]]:
        """Analytic per-layer output shapes from the declared input shape."""
        shapes = []
        c, h, w = self.input_shape
        for layer in self.layers:
            c, h, w = layer.out_channels_hw(c, h, w)
            shapes.append((c, h, w))
        return shapes
