"""Declarative student/teacher architecture: config types, network construction,
and exact parameter / MAC accounting against the complexity budget."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tnsr
from .errors import ConfigError
from .nn import Block, Conv2d, GlobalAvgPool, Linear, Network
from .ops import ConvSpec


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    expand_ratio: float = 3.0
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("block channels must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.hidden < 1:
            raise ConfigError("expand_ratio too small: hidden width < 1")

    @property
    def hidden(self) -> int:
        return int(round(self.in_channels * self.expand_ratio))

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


@dataclass(frozen=True)
class StageConfig:
    blocks: tuple[BlockConfig, ...]

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("stage has no blocks")
        for a, b in zip(self.blocks, self.blocks[1:]):
            if a.out_channels != b.in_channels:
                raise ConfigError(
                    f"adjacent blocks disagree: out {a.out_channels} vs in {b.in_channels}")


@dataclass(frozen=True)
class StudentConfig:
    input_channels: int
    stem: ConvSpec
    stages: tuple[StageConfig, ...]
    num_outputs: int

    def __post_init__(self):
        if len(self.stages) != 3:
            raise ConfigError(f"stages: exactly 3 required, got {len(self.stages)}")
        if self.num_outputs < 1:
            raise ConfigError("num_outputs must be positive")
        if self.stem.in_channels != self.input_channels:
            raise ConfigError("stem.in_channels must equal input_channels")
        prev = self.stem.out_channels
        for si, stage in enumerate(self.stages):
            for bi, blk in enumerate(stage.blocks):
                if blk.in_channels != prev:
                    raise ConfigError(
                        f"stages[{si}].blocks[{bi}].in_channels={blk.in_channels}, "
                        f"previous width is {prev}")
                prev = blk.out_channels
        for w in self.channel_widths():
            if w % 8:
                raise ConfigError(f"channel width {w} is not a multiple of 8")

    def channel_widths(self) -> list[int]:
        widths = [self.stem.out_channels]
        for stage in self.stages:
            widths.extend(b.out_channels for b in stage.blocks)
        return widths

    def final_width(self) -> int:
        return self.stages[-1].blocks[-1].out_channels

    def all_blocks(self) -> list[BlockConfig]:
        return [b for s in self.stages for b in s.blocks]


@dataclass(frozen=True)
class ComplexityReport:
    params: int
    macs: int

    def as_dict(self) -> dict:
        return {"params": self.params, "macs": self.macs}


def default_student_config(num_outputs: int = 10) -> StudentConfig:
    """The ~60k-parameter / <=30M-MAC recipe at the 1x64x44 reference input."""
    s = lambda *blocks: StageConfig(tuple(blocks))
    b = BlockConfig
    return StudentConfig(
        input_channels=1,
        stem=ConvSpec(1, 16, 3, 3, stride=2, padding=1),
        stages=(
            s(b(16, 24), b(24, 24)),
            s(b(24, 32, stride=2), b(32, 32)),
            s(b(32, 48, stride=2), b(48, 48), b(48, 48)),
        ),
        num_outputs=num_outputs,
    )


REFERENCE_INPUT_SHAPE = (1, 64, 44)  # mel bins as height, frames as width


def tiny_student_config(num_outputs: int = 10, input_shape=(1, 16, 12)) -> StudentConfig:
    """A desk-scale miniature with the same topology, for fast experiments."""
    del input_shape
    s = lambda *blocks: StageConfig(tuple(blocks))
    b = BlockConfig
    return StudentConfig(
        input_channels=1,
        stem=ConvSpec(1, 8, 3, 3, stride=1, padding=1),
        stages=(
            s(b(8, 8, expand_ratio=2.0),),
            s(b(8, 16, expand_ratio=2.0, stride=2),),
            s(b(16, 16, expand_ratio=2.0),),
        ),
        num_outputs=num_outputs,
    )


def build_network(config: StudentConfig, seed: int, dtype=np.float32,
                  input_hw: tuple[int, int] | None = None) -> Network:
    """Deterministic construction: same config + seed gives identical weights."""
    rng = np.random.default_rng(seed)
    layers = [Conv2d(config.stem, rng, "stem", dtype)]
    for si, stage in enumerate(config.stages):
        for bi, blk in enumerate(stage.blocks):
            layers.append(Block(blk.in_channels, blk.out_channels, blk.hidden,
                                blk.kernel, blk.stride, rng,
                                f"stage{si}.block{bi}", dtype))
    layers.append(GlobalAvgPool())
    layers.append(Linear(config.final_width(), config.num_outputs, rng, "head", dtype))
    h, w = input_hw if input_hw else REFERENCE_INPUT_SHAPE[1:]
    return Network(layers, (config.input_channels, h, w))


def count_complexity(config: StudentConfig, input_shape=REFERENCE_INPUT_SHAPE) -> ComplexityReport:
    """Analytic parameter and MAC counts; convs and linears contribute MACs,
    norm/activation/GRN/pooling contribute zero."""
    _, h, w = input_shape
    params = 0
    macs = 0

    def conv(spec: ConvSpec, h, w):
        nonlocal params, macs
        cpg = spec.in_channels // spec.groups
        params += spec.out_channels * cpg * spec.kernel_h * spec.kernel_w + spec.out_channels
        oh, ow = spec.out_hw(h, w)
        macs += spec.kernel_h * spec.kernel_w * cpg * spec.out_channels * oh * ow
        return oh, ow

    h, w = conv(config.stem, h, w)
    for blk in config.all_blocks():
        hdn = blk.hidden
        h, w = conv(ConvSpec(blk.in_channels, hdn, 1, 1), h, w)
        params += 2 * hdn  # expand norm affine
        h, w = conv(ConvSpec(hdn, hdn, blk.kernel, blk.kernel, blk.stride,
                             blk.kernel // 2, groups=hdn), h, w)
        params += 2 * hdn  # depthwise norm affine
        h, w = conv(ConvSpec(hdn, blk.out_channels, 1, 1), h, w)
        params += 2 * blk.out_channels  # project norm affine
        params += 2 * blk.out_channels  # GRN gamma/beta
    fw = config.final_width()
    params += fw * config.num_outputs + config.num_outputs
    macs += fw * config.num_outputs
    return ComplexityReport(params=params, macs=macs)


def instrumented_mac_count(network: Network, x: np.ndarray) -> int:
    """Multiply-count by instrumenting an actual forward pass: walk the layers,
    run them, and for each conv/linear count the multiplies its output implies
    from real array shapes. Independent of the analytic counter."""
    total = 0

    def walk(layer, x):
        nonlocal total
        if isinstance(layer, Block):
            y = x
            for sub in layer.sublayers()[:-1]:
                y = walk(sub, y)
            if layer.residual:
                y = y + x
            return layer.grn.forward(y)
        y = layer.forward(x)
        if isinstance(layer, Conv2d):
            spec = layer.spec
            n, _, oh, ow = y.shape
            total += n * oh * ow * spec.out_channels * (
                spec.in_channels // spec.groups) * spec.kernel_h * spec.kernel_w
        elif isinstance(layer, Linear):
            total += y.shape[0] * layer.in_features * layer.out_features
        return y

    for layer in network.layers:
        x = walk(layer, x)
    return total


def make_teacher_variant(base: StudentConfig, width_multiplier: float,
                         depth_additions: tuple[int, int, int] = (0, 0, 0)) -> StudentConfig:
    """Scale widths (re-rounded to multiples of 8) and append stride-1 blocks."""
    if width_multiplier < 1:
        raise ConfigError("width_multiplier must be >= 1")
    if len(depth_additions) != 3 or any(d < 0 for d in depth_additions):
        raise ConfigError("depth_additions must be three nonnegative ints")

    def scale(w: int) -> int:
        return max(8, int(round(w * width_multiplier / 8)) * 8)

    stem = replace(base.stem, out_channels=scale(base.stem.out_channels))
    prev = stem.out_channels
    stages = []
    for si, stage in enumerate(base.stages):
        blocks = []
        for blk in stage.blocks:
            out = scale(blk.out_channels)
            blocks.append(replace(blk, in_channels=prev, out_channels=out))
            prev = out
        for _ in range(depth_additions[si]):
            blocks.append(replace(blocks[-1], in_channels=prev, out_channels=prev, stride=1))
        stages.append(StageConfig(tuple(blocks)))
    return StudentConfig(base.input_channels, stem, tuple(stages), base.num_outputs)


DEFAULT_TEACHER_RECIPE = (
    (1.5, (0, 0, 0)),
    (2.0, (1, 0, 0)),
    (2.0, (0, 1, 0)),
    (3.0, (0, 0, 1)),
    (4.0, (0, 0, 0)),
)


def save_network(path, network: Network):
    tnsr.write_checkpoint(path, network.state_tensors())


def load_network(path, config: StudentConfig, dtype=np.float32,
                 input_hw: tuple[int, int] | None = None) -> Network:
    net = build_network(config, seed=0, dtype=dtype, input_hw=input_hw)
    net.load_state(tnsr.read_checkpoint(path))
    return net
