"""Dual-branch tiny Darknet-style feature extractor.

Layout of one branch (every conv is followed by batch norm)::

    stem   3x3/2 conv + SiLU, 2x2 max pool           -> stride 4
    stageN 3x3/2 conv + SiLU, then residual blocks    -> strides 8, 16, 32
    block  1x1 reduce (+SiLU), 3x3 expand, add input, SiLU

A level's *inactive* map is the tensor that feeds its final SiLU: the last
block's residual sum, or the downsampling conv's normalized output for a
stage without blocks. Hence ``activated == silu(inactive)`` exactly.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .blocks import INFER, ForwardContext, conv_bn
from .errors import ConfigError, ShapeError, WeightsError
from .nn import max_pool
from .tensor import Tensor, silu
from .weights import ModelWeights, add_conv_bn

BRANCHES = ("rgb", "t")
STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 8
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    blocks_per_stage: tuple[int, int, int] = (1, 2, 2)
    activation: str = "silu"

    def __post_init__(self):
        if len(self.stage_channels) != 3 or len(self.blocks_per_stage) != 3:
            raise ConfigError("backbone needs exactly 3 stages")
        for c in (self.stem_channels, *self.stage_channels):
            if c < 4 or c % 2:
                raise ConfigError(f"channel counts must be even and >= 4, got {c}")
        if any(b < 0 for b in self.blocks_per_stage):
            raise ConfigError("blocks_per_stage must be non-negative")
        if self.activation != "silu":
            raise ConfigError("only the SiLU activation is supported")


@dataclass
class PyramidLevel:
    stride: int
    activated: Tensor
    inactive: Tensor | None = None


@dataclass
class FeaturePyramid:
    levels: list[PyramidLevel] = field(default_factory=list)

    def activated(self) -> list[Tensor]:
        return [lv.activated for lv in self.levels]

    def inactive(self) -> list[Tensor]:
        return [lv.inactive for lv in self.levels]


def branch_seed(seed: int, branch: str) -> int:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(branch.encode())])
    return int(ss.generate_state(1, np.uint64)[0])


def init_branch(config: BackboneConfig, seed: int, branch: str) -> ModelWeights:
    w = ModelWeights()
    sub = branch_seed(seed, branch)
    pre = f"backbone.{branch}"
    add_conv_bn(w, sub, f"{pre}.stem", 3, config.stem_channels, 3)
    c_prev = config.stem_channels
    for i, (c, nb) in enumerate(zip(config.stage_channels, config.blocks_per_stage), start=1):
        add_conv_bn(w, sub, f"{pre}.stage{i}.down", c_prev, c, 3)
        for j in range(nb):
            add_conv_bn(w, sub, f"{pre}.stage{i}.block{j}.reduce", c, c // 2, 1)
            add_conv_bn(w, sub, f"{pre}.stage{i}.block{j}.expand", c // 2, c, 3)
        c_prev = c
    return w


def init_weights(config: BackboneConfig, seed: int, branches=BRANCHES) -> ModelWeights:
    """Both branches, each from its own sub-seed derived from ``seed``."""
    w = ModelWeights()
    for b in branches:
        w.update(init_branch(config, seed, b))
    return w


def branch_param_count(config: BackboneConfig) -> int:
    """Closed-form trainable parameter count of one branch."""
    s = config.stem_channels
    total = 27 * s + 2 * s
    c_prev = s
    for c, nb in zip(config.stage_channels, config.blocks_per_stage):
        total += 9 * c_prev * c + 2 * c
        total += nb * ((c * (c // 2) + 2 * (c // 2)) + (9 * (c // 2) * c + 2 * c))
        c_prev = c
    return total


def extract_features(
    image: Tensor,
    weights: Mapping,
    branch: str,
    emit_inactive: bool = False,
    config: BackboneConfig | None = None,
    ctx: ForwardContext = INFER,
) -> FeaturePyramid:
    """Run one modality branch over ``3 x H x W`` (or ``N x 3 x H x W``) input."""
    config = config or infer_config(weights, branch)
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise ShapeError(f"expected 3-channel image, got {image.shape}")
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"input {h}x{w} must be divisible by 32")
    pre = f"backbone.{branch}"
    if f"{pre}.stem.conv.weight" not in weights:
        raise WeightsError(f"weights contain no {branch!r} backbone branch")

    x = max_pool(conv_bn(ctx, weights, f"{pre}.stem", image, stride=2))
    pyramid = FeaturePyramid()
    for i, (stride, nb) in enumerate(zip(STRIDES, config.blocks_per_stage), start=1):
        x_pre = conv_bn(ctx, weights, f"{pre}.stage{i}.down", x, stride=2, activate=False)
        x = silu(x_pre)
        for j in range(nb):
            y = conv_bn(ctx, weights, f"{pre}.stage{i}.block{j}.reduce", x)
            y = conv_bn(ctx, weights, f"{pre}.stage{i}.block{j}.expand", y, activate=False)
            x_pre = x + y
            x = silu(x_pre)
        pyramid.levels.append(PyramidLevel(stride, x, x_pre if emit_inactive else None))
    return pyramid


def infer_config(weights: Mapping, branch: str) -> BackboneConfig:
    """Recover the structural config from tensor names and shapes."""
    pre = f"backbone.{branch}"
    try:
        stem = weights[f"{pre}.stem.conv.weight"].shape[0]
        chans, blocks = [], []
        for i in (1, 2, 3):
            chans.append(weights[f"{pre}.stage{i}.down.conv.weight"].shape[0])
            nb = 0
            while f"{pre}.stage{i}.block{nb}.reduce.conv.weight" in weights:
                nb += 1
            blocks.append(nb)
    except KeyError:
        raise WeightsError(f"weights contain no complete {branch!r} backbone branch") from None
    return BackboneConfig(stem, tuple(chans), tuple(blocks))
