"""Full detector: backbones -> temporal enhancement -> RGBT fusion -> neck -> heads.

Variants (ablation rows):

=============  ==========  =======  ==================
variant        modalities  TPE      fusion
=============  ==========  =======  ==================
baseline_rgb   RGB         no       -
baseline_t     T           no       -
tpe_only       RGB         yes      -
mi_cat         RGB + T     no       concat + 1x1 conv
mi_erasure     RGB + T     no       erasure
full           RGB + T     yes      erasure
=============  ==========  =======  ==================
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import fusion as fusion_mod
from .backbone import BackboneConfig, extract_features, init_branch
from .blocks import INFER, ForwardContext
from .errors import ConfigError, ShapeError, WeightsError, WindowError
from .head import (DEFAULT_HEAD_WIDTH, EVAL_CONF, NMS_IOU, NUM_CLASSES, Detection, RawPrediction,
                   decode, detect_heads, init_head, init_neck, nms, pafpn)
from .nn import count_macs
from .tensor import Tensor, concat
from .tpe import DEFAULT_WINDOW, TemporalWindow, tpe_fuse_window
from .weights import ModelWeights, merge

VARIANTS = ("baseline_rgb", "baseline_t", "tpe_only", "mi_cat", "mi_erasure", "full")
TABLE_ORDER = ("baseline_rgb", "tpe_only", "mi_cat", "mi_erasure", "full")


@dataclass(frozen=True)
class VariantConfig:
    variant: str = "full"
    window: TemporalWindow = DEFAULT_WINDOW
    include_current_residual: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")

    @property
    def uses_rgb(self) -> bool:
        return self.variant != "baseline_t"

    @property
    def uses_thermal(self) -> bool:
        return self.variant in ("baseline_t", "mi_cat", "mi_erasure", "full")

    @property
    def uses_tpe(self) -> bool:
        return self.variant in ("tpe_only", "full")

    @property
    def fusion(self) -> str | None:
        return {"mi_cat": "cat", "mi_erasure": "erasure", "full": "erasure"}.get(self.variant)

    def rgb_offsets(self) -> tuple[int, ...]:
        if not self.uses_rgb:
            return ()
        if not self.uses_tpe:
            return (0,)
        return self.window.offsets + ((0,) if self.include_current_residual else ())

    def thermal_offsets(self) -> tuple[int, ...]:
        if not self.uses_thermal:
            return ()
        if not self.uses_tpe:
            return (0,)
        # the current thermal frame always runs: its inactive maps feed the erasure
        return self.window.offsets + (0,)


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = NUM_CLASSES
    head_width: int = DEFAULT_HEAD_WIDTH
    input_size: int = 64

    def __post_init__(self):
        if self.input_size % 32:
            raise ConfigError(f"input size {self.input_size} must be divisible by 32")

    @property
    def channels(self) -> tuple[int, int, int]:
        return tuple(self.backbone.stage_channels)


def weight_prefixes(cfg: VariantConfig) -> tuple[str, ...]:
    pre = []
    if cfg.uses_rgb:
        pre.append("backbone.rgb.")
    if cfg.uses_thermal:
        pre.append("backbone.t.")
    if cfg.fusion == "cat":
        pre += [f"fusion.l{i}.cat." for i in range(3)]
    elif cfg.fusion == "erasure":
        pre += [f"fusion.l{i}.{part}." for i in range(3) for part in ("spatial", "channel", "fuse")]
    return tuple(pre) + ("neck.", "head.")


def init_detector(cfg: VariantConfig, seed: int, det: DetectorConfig | None = None) -> ModelWeights:
    """Weights for exactly the modules ``cfg`` uses."""
    det = det or DetectorConfig()
    parts = []
    if cfg.uses_rgb:
        parts.append(init_branch(det.backbone, seed, "rgb"))
    if cfg.uses_thermal:
        parts.append(init_branch(det.backbone, seed, "t"))
    rest = ModelWeights()
    for i, c in enumerate(det.channels):
        if cfg.fusion == "erasure":
            fusion_mod.init_erasure_level(rest, seed, f"fusion.l{i}", c)
        elif cfg.fusion == "cat":
            fusion_mod.init_cat_level(rest, seed, f"fusion.l{i}", c)
    init_neck(rest, seed, det.channels)
    init_head(rest, seed, det.channels, det.num_classes, det.head_width)
    return merge(*parts, rest)


def check_weights(weights: Mapping, cfg: VariantConfig) -> None:
    for p in weight_prefixes(cfg):
        if not any(k.startswith(p) for k in weights):
            raise WeightsError(f"variant {cfg.variant!r} needs weights under {p!r}")


def _run_branch(frames: Mapping[int, Tensor], offsets, params, branch, det, ctx):
    """One backbone pass over all requested frames stacked on the batch axis."""
    missing = [o for o in offsets if o not in frames]
    if missing:
        raise WindowError(f"{branch} frames missing for offsets {missing}")
    batch = [frames[o] if frames[o].ndim == 4 else frames[o].reshape((1,) + frames[o].shape) for o in offsets]
    n = batch[0].shape[0]
    for b in batch:
        if b.shape != batch[0].shape:
            raise ShapeError(f"{branch} frames disagree in shape: {[x.shape for x in batch]}")
    pyr = extract_features(concat(batch, axis=0), params, branch, emit_inactive=(branch == "t"),
                           config=det.backbone, ctx=ctx)
    per_offset = {}
    for k, o in enumerate(offsets):
        sl = slice(k * n, (k + 1) * n)
        per_offset[o] = (
            [lv.activated[sl] for lv in pyr.levels],
            [lv.inactive[sl] if lv.inactive is not None else None for lv in pyr.levels],
        )
    return per_offset


def _temporal(per_offset, cfg: VariantConfig) -> list[Tensor]:
    current = per_offset[0][0] if cfg.include_current_residual else None
    return [
        tpe_fuse_window({o: per_offset[o][0][i] for o in cfg.window.offsets}, cfg.window,
                        current=current[i] if current is not None else None)
        for i in range(3)
    ]


def forward(rgb_frames: Mapping[int, Tensor], t_frames: Mapping[int, Tensor], params: Mapping,
            cfg: VariantConfig, det: DetectorConfig | None = None,
            ctx: ForwardContext = INFER) -> RawPrediction:
    """Raw head outputs for batched (``N x 3 x H x W``) or single frames keyed by offset."""
    det = det or DetectorConfig()
    rgb = _run_branch(rgb_frames, cfg.rgb_offsets(), params, "rgb", det, ctx) if cfg.uses_rgb else None
    th = _run_branch(t_frames, cfg.thermal_offsets(), params, "t", det, ctx) if cfg.uses_thermal else None

    if cfg.variant == "baseline_t":
        feats = th[0][0]
    elif cfg.uses_tpe:
        feats = _temporal(rgb, cfg)
    else:
        feats = rgb[0][0]

    if cfg.fusion is not None:
        t_act = _temporal(th, cfg) if cfg.uses_tpe else th[0][0]
        t_inact = th[0][1]
        fused = []
        for i in range(3):
            if cfg.fusion == "cat":
                fused.append(fusion_mod.cat_fuse(feats[i], t_act[i], params, f"fusion.l{i}", ctx))
            else:
                fused.append(fusion_mod.fuse_level(feats[i], t_act[i], t_inact[i], params, f"fusion.l{i}", ctx))
        feats = fused

    return detect_heads(pafpn(feats, params, ctx), params, ctx)


def infer(rgb_frames: Mapping[int, Tensor], t_frames: Mapping[int, Tensor], weights: Mapping,
          cfg: VariantConfig, det: DetectorConfig | None = None, conf_threshold: float = EVAL_CONF,
          iou_threshold: float = NMS_IOU) -> list[Detection]:
    """Detections for one current frame in input-image pixels."""
    check_weights(weights, cfg)
    raw = forward(rgb_frames, t_frames, weights, cfg, det)
    if raw.levels[0].cls_logits.ndim == 4:
        raw = raw.image(0)
    return nms(decode(raw, conf_threshold), iou_threshold)


def count_params(weights: Mapping, cfg: VariantConfig | None = None) -> int:
    """Scalar trainable parameters used by ``cfg`` (all trainable ones if None)."""
    names = [k for k in weights if not k.endswith((".running_mean", ".running_var"))]
    if cfg is not None:
        check_weights(weights, cfg)
        prefixes = weight_prefixes(cfg)
        names = [k for k in names if k.startswith(prefixes)]
    return int(sum(np.asarray(weights[k]).size for k in names))


def estimate_flops(cfg: VariantConfig, input_size: int = 64, det: DetectorConfig | None = None) -> int:
    """2 x multiply-accumulates over every conv / FC for one inference."""
    if input_size % 32:
        raise ConfigError(f"input size {input_size} must be divisible by 32")
    det = replace(det or DetectorConfig(), input_size=input_size)
    weights = init_detector(cfg, 0, det)
    blank = Tensor(np.zeros((1, 3, input_size, input_size), dtype=np.float32))
    rgb = {o: blank for o in cfg.rgb_offsets()}
    th = {o: blank for o in cfg.thermal_offsets()}
    with count_macs() as box:
        forward(rgb, th, weights, cfg, det)
    return 2 * box[0]
