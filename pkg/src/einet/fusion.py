"""Erasure-based RGB/thermal interaction for one pyramid level.

Flow for RGB features ``F_rgb``, thermal activated ``F_t`` and thermal
inactive (pre-activation) ``F_ti``::

    D        = F_rgb + neg_silu(F_ti)                    # background erased
    W_fore   = spatial_attention(D), W_back = 1 - W_fore
    W_ch     = channel_attention(D)
    W_fusion = sigmoid(W_fore*W_ch*F_rgb + W_back*W_ch*neg_silu(F_ti))
    F_new    = conv1x1[cat(F_rgb + W_fusion*F_rgb, F_rgb + W_fusion*F_t)]

Erasure is one-directional: thermal inputs are read, never updated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .blocks import INFER, ForwardContext, conv_bn, param
from .errors import ConfigError, ShapeError
from .nn import channel_max, channel_mean, concat, conv2d, fully_connected, global_avg_pool
from .tensor import Tensor, neg_silu, relu, reshape, sigmoid
from .weights import ModelWeights, add_conv_bn, add_linear, kaiming_uniform

SPATIAL_KERNEL = 7
CHANNEL_REDUCTION = 4


@dataclass(frozen=True)
class AttentionWeights:
    fore: Tensor  # 1 x H x W
    back: Tensor  # 1 - fore
    ch: Tensor  # C x 1 x 1

    @classmethod
    def from_fore(cls, fore: Tensor, ch: Tensor) -> "AttentionWeights":
        return cls(fore, 1.0 - fore, ch)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: {a.shape} vs {b.shape}")


def spatial_attention(F: Tensor, params: Mapping, prefix: str) -> Tensor:
    """sigmoid(conv7x7([mean_c F, max_c F])) -> 1 x H x W."""
    if F.shape[-1] < 1 or F.shape[-2] < 1:
        raise ShapeError(f"spatial attention needs H, W >= 1, got {F.shape}")
    pooled = concat([channel_mean(F), channel_max(F)], axis=-3)
    return sigmoid(conv2d(pooled, param(params, f"{prefix}.weight"), padding=SPATIAL_KERNEL // 2))


def channel_attention(F: Tensor, params: Mapping, prefix: str, reduction: int = CHANNEL_REDUCTION) -> Tensor:
    """sigmoid(fc2(relu(fc1(GAP F)))) -> C x 1 x 1."""
    c = F.shape[-3]
    if c % reduction:
        raise ConfigError(f"channel count {c} not divisible by reduction {reduction}")
    g = global_avg_pool(F)
    lead = g.shape[:-3]
    z = reshape(g, (-1, c))
    z = relu(fully_connected(z, param(params, f"{prefix}.fc1.weight"), param(params, f"{prefix}.fc1.bias")))
    z = fully_connected(z, param(params, f"{prefix}.fc2.weight"), param(params, f"{prefix}.fc2.bias"))
    return reshape(sigmoid(z), lead + (c, 1, 1))


def erase_noise(F_rgb: Tensor, F_t_inact: Tensor) -> Tensor:
    _same_shape(F_rgb, F_t_inact, "erase_noise")
    return F_rgb + neg_silu(F_t_inact)


def fusion_weight(F_rgb: Tensor, F_t_inact: Tensor, att: AttentionWeights) -> Tensor:
    _same_shape(F_rgb, F_t_inact, "fusion_weight")
    return sigmoid(att.fore * att.ch * F_rgb + att.back * att.ch * neg_silu(F_t_inact))


def erasure_fuse(F_rgb: Tensor, F_t: Tensor, w_fusion: Tensor, params: Mapping, prefix: str,
                 ctx: ForwardContext = INFER) -> Tensor:
    _same_shape(F_rgb, F_t, "erasure_fuse")
    both = concat([F_rgb + w_fusion * F_rgb, F_rgb + w_fusion * F_t], axis=-3)
    return conv_bn(ctx, params, f"{prefix}.fuse", both)


def fuse_level(F_rgb: Tensor, F_t: Tensor, F_t_inact: Tensor, params: Mapping, prefix: str,
               ctx: ForwardContext = INFER) -> Tensor:
    _same_shape(F_rgb, F_t, "fuse_level")
    _same_shape(F_rgb, F_t_inact, "fuse_level")
    denoised = erase_noise(F_rgb, F_t_inact)
    att = AttentionWeights.from_fore(
        spatial_attention(denoised, params, f"{prefix}.spatial"),
        channel_attention(denoised, params, f"{prefix}.channel"),
    )
    return erasure_fuse(F_rgb, F_t, fusion_weight(F_rgb, F_t_inact, att), params, prefix, ctx)


def cat_fuse(F_rgb: Tensor, F_t: Tensor, params: Mapping, prefix: str, ctx: ForwardContext = INFER) -> Tensor:
    """Plain concatenation + 1x1 conv, the non-erasure fusion baseline."""
    _same_shape(F_rgb, F_t, "cat_fuse")
    return conv_bn(ctx, params, f"{prefix}.cat", concat([F_rgb, F_t], axis=-3))


def init_erasure_level(w: ModelWeights, seed: int, prefix: str, c: int,
                       reduction: int = CHANNEL_REDUCTION) -> None:
    if c % reduction:
        raise ConfigError(f"channel count {c} not divisible by reduction {reduction}")
    k = SPATIAL_KERNEL
    w[f"{prefix}.spatial.weight"] = kaiming_uniform(seed, f"{prefix}.spatial.weight", (1, 2, k, k))
    add_linear(w, seed, f"{prefix}.channel.fc1", c, c // reduction)
    add_linear(w, seed, f"{prefix}.channel.fc2", c // reduction, c)
    add_conv_bn(w, seed, f"{prefix}.fuse", 2 * c, c, 1)


def init_cat_level(w: ModelWeights, seed: int, prefix: str, c: int) -> None:
    add_conv_bn(w, seed, f"{prefix}.cat", 2 * c, c, 1)
