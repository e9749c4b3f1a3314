"""Supervised training: target assignment, detection loss, SGD, epoch loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .blocks import ForwardContext
from .data.letterbox import LetterboxTransform, letterbox
from .data.voc import Video
from .detector import DetectorConfig, VariantConfig, forward, init_detector
from .errors import ConfigError, InputError, ShapeError
from .head import RawPrediction
from .tensor import GradTape, Tensor, bce_with_logits, clip, concat, exp, maximum, minimum, relu
from .tpe import TemporalWindow, clamp_triplet
from .weights import ModelWeights, is_buffer, is_norm_param

STRIDES = (8, 16, 32)
LOG_SIZE_CLAMP = 6.0


# ------------------------------------------------------------- assignment

@dataclass
class LevelTargets:
    stride: int
    obj: np.ndarray  # H x W, 1 at assigned cells
    cls: np.ndarray  # H x W int class id, -1 where unassigned
    boxes: np.ndarray  # H x W x 4 assigned ground-truth boxes

    def positives(self) -> tuple[np.ndarray, np.ndarray]:
        return np.nonzero(self.obj > 0)


def assign_level(box: Sequence[float], strides: Sequence[int] = STRIDES) -> int:
    """Index of the largest stride <= max(w, h), clamped to the available levels."""
    x1, y1, x2, y2 = box
    extent = max(x2 - x1, y2 - y1)
    fitting = [i for i, s in enumerate(strides) if s <= extent]
    return fitting[-1] if fitting else 0


def assign_targets(gts: Sequence[tuple[int, Sequence[float]]], input_size: int,
                   strides: Sequence[int] = STRIDES) -> list[LevelTargets]:
    """One positive cell per ground truth: the cell holding its centre.

    Ground truths are placed in order of decreasing area so that, when two
    share a cell, the smaller one keeps it.
    """
    levels = []
    for s in strides:
        n = input_size // s
        levels.append(LevelTargets(s, np.zeros((n, n), np.float32), np.full((n, n), -1, np.int64),
                                   np.zeros((n, n, 4), np.float64)))
    order = sorted(range(len(gts)), key=lambda i: -(gts[i][1][2] - gts[i][1][0]) * (gts[i][1][3] - gts[i][1][1]))
    for i in order:
        cls, box = gts[i]
        lv = levels[assign_level(box, strides)]
        n = lv.obj.shape[0]
        cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
        col = min(max(int(cx // lv.stride), 0), n - 1)
        row = min(max(int(cy // lv.stride), 0), n - 1)
        lv.obj[row, col] = 1.0
        lv.cls[row, col] = cls
        lv.boxes[row, col] = box
    return levels


# ------------------------------------------------------------------- loss

def detection_loss(raw: RawPrediction, targets: Sequence[Sequence[LevelTargets]]) -> Tensor:
    """mean objectness BCE over all cells
    + mean over positives of the class BCE summed over classes
    + mean over positives of (1 - IoU).

    ``raw`` is batched (``N x ...``); ``targets[n]`` belongs to image ``n``.
    """
    n = raw.levels[0].obj_logit.shape[0]
    if len(targets) != n:
        raise ShapeError(f"{len(targets)} target sets for a batch of {n}")
    k = raw.num_classes

    obj_logits, obj_t = [], []
    cls_pos, cls_t, reg_pos = [], [], []
    rows_all, cols_all, strides_all, gt_all = [], [], [], []
    for li, lv in enumerate(raw.levels):
        h, w = lv.obj_logit.shape[-2:]
        obj_logits.append(lv.obj_logit.reshape(n, h * w))
        obj_t.append(np.stack([t[li].obj.reshape(-1) for t in targets]))
        b_idx, r_idx, c_idx = [], [], []
        for b, t in enumerate(targets):
            rr, cc = t[li].positives()
            b_idx.append(np.full(len(rr), b))
            r_idx.append(rr)
            c_idx.append(cc)
        b_idx, r_idx, c_idx = (np.concatenate(a).astype(np.int64) for a in (b_idx, r_idx, c_idx))
        if len(b_idx) == 0:
            continue
        flat = r_idx * w + c_idx
        cls_pos.append(lv.cls_logits.reshape(n, k, h * w)[b_idx, :, flat])
        reg_pos.append(lv.reg.reshape(n, 4, h * w)[b_idx, :, flat])
        onehot = np.zeros((len(b_idx), k), np.float32)
        onehot[np.arange(len(b_idx)), [targets[b][li].cls[r, c] for b, r, c in zip(b_idx, r_idx, c_idx)]] = 1
        cls_t.append(onehot)
        rows_all.append(r_idx)
        cols_all.append(c_idx)
        strides_all.append(np.full(len(b_idx), lv.stride, np.float64))
        gt_all.append(np.stack([targets[b][li].boxes[r, c] for b, r, c in zip(b_idx, r_idx, c_idx)]))

    loss = bce_with_logits(concat(obj_logits, axis=1), np.concatenate(obj_t, axis=1)).mean()
    if not cls_pos:
        return loss

    cls_logits = concat(cls_pos, axis=0)
    p = cls_logits.shape[0]
    loss = loss + bce_with_logits(cls_logits, np.concatenate(cls_t)).sum() * (1.0 / p)

    reg = concat(reg_pos, axis=0)
    dt = reg.dtype
    s = np.concatenate(strides_all)[:, None].astype(dt)
    col = np.concatenate(cols_all)[:, None].astype(dt)
    row = np.concatenate(rows_all)[:, None].astype(dt)
    gt = np.concatenate(gt_all).astype(dt)
    cx = (reg[:, 0:1] + col) * s
    cy = (reg[:, 1:2] + row) * s
    bw = exp(clip(reg[:, 2:3], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP)) * s
    bh = exp(clip(reg[:, 3:4], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP)) * s
    iw = relu(minimum(cx + bw * 0.5, gt[:, 2:3]) - maximum(cx - bw * 0.5, gt[:, 0:1]))
    ih = relu(minimum(cy + bh * 0.5, gt[:, 3:4]) - maximum(cy - bh * 0.5, gt[:, 1:2]))
    inter = iw * ih
    gt_area = (gt[:, 2:3] - gt[:, 0:1]) * (gt[:, 3:4] - gt[:, 1:2])
    iou = inter / (bw * bh + gt_area - inter)
    return loss + (1.0 - iou).mean()


# -------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(weights: ModelWeights, grads: Mapping[str, np.ndarray], state: OptimState,
             lr: float | None = None) -> ModelWeights:
    """``v = m v + g + wd w``; ``w = w - lr v``. No decay on norm scale/shift."""
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        w = weights[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient {name}: {g.shape} vs weight {w.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        d = g if is_norm_param(name) or state.weight_decay == 0 else g + state.weight_decay * w
        v = state.momentum * v + d
        state.velocity[name] = v
        weights[name] = w - lr * v
    return weights


# ------------------------------------------------------------------ loop

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 2
    lr: float = 0.01
    lr_final: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    horizontal_flip: bool = True
    flip_prob: float = 0.5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list[tuple[int, float]]


@dataclass
class PreparedVideo:
    rgb: np.ndarray  # F x 3 x S x S
    thermal: np.ndarray
    gts: list[list[tuple[int, tuple[float, float, float, float]]]]
    frame_ids: list[str] = field(default_factory=list)
    transforms: list[LetterboxTransform] = field(default_factory=list)


def prepare_videos(dataset: Sequence[Video], input_size: int) -> list[PreparedVideo]:
    """Load and letterbox every frame once; boxes mapped into input coordinates."""
    out = []
    for video in dataset:
        rgbs, ths, gts, tfs = [], [], [], []
        for fr in video:
            rgb, th = fr.load()
            rgb_l, tf = letterbox(rgb, input_size)
            th_l, _ = letterbox(th, input_size)
            rgbs.append(rgb_l)
            ths.append(th_l)
            tfs.append(tf)
            gts.append([(o.class_id, tf.forward_box(o.box)) for o in fr.annotation.objects])
        out.append(PreparedVideo(np.stack(rgbs), np.stack(ths), gts, [fr.frame_id for fr in video], tfs))
    return out


def cosine_lr(cfg: TrainConfig, step: int, total: int) -> float:
    if total <= 1:
        return cfg.lr
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * step / (total - 1)))


def _flip_box(box, size):
    x1, y1, x2, y2 = box
    return (size - x2, y1, size - x1, y2)


def make_batch(videos: Sequence[PreparedVideo], items, variant: VariantConfig, input_size: int,
               flips: Sequence[bool] | None = None):
    """Stack frames for ``items`` (video index, frame index) keyed by window offset."""
    flips = flips or [False] * len(items)
    offsets = sorted(set(variant.rgb_offsets()) | set(variant.thermal_offsets()) | {0})
    rgb = {o: [] for o in offsets}
    th = {o: [] for o in offsets}
    targets = []
    for (vi, t), flip in zip(items, flips):
        pv = videos[vi]
        nonzero = [o for o in offsets if o]
        idx = clamp_triplet(len(pv.rgb), t, TemporalWindow(tuple(nonzero))) if nonzero else {}
        idx[0] = t
        for o in offsets:
            r, tt = pv.rgb[idx[o]], pv.thermal[idx[o]]
            if flip:
                r, tt = r[..., ::-1], tt[..., ::-1]
            rgb[o].append(r)
            th[o].append(tt)
        gts = [(c, _flip_box(b, input_size) if flip else b) for c, b in pv.gts[t]]
        targets.append(assign_targets(gts, input_size))
    rgb_t = {o: Tensor(np.stack(v)) for o, v in rgb.items()}
    th_t = {o: Tensor(np.stack(v)) for o, v in th.items()}
    return rgb_t, th_t, targets


def train_loop(dataset: Sequence[Video], cfg: TrainConfig, variant: VariantConfig,
               det: DetectorConfig | None = None, weights: ModelWeights | None = None,
               prepared: Sequence[PreparedVideo] | None = None,
               on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    det = det or DetectorConfig()
    videos = list(prepared) if prepared is not None else prepare_videos(dataset, det.input_size)
    items = [(vi, t) for vi, pv in enumerate(videos) for t in range(len(pv.rgb))]
    if not items:
        raise InputError("cannot train on an empty dataset")
    weights = weights.copy() if weights is not None else init_detector(variant, cfg.seed, det)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    state = OptimState(cfg.lr, cfg.momentum, cfg.weight_decay)
    steps_per_epoch = math.ceil(len(items) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(items))
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            batch = [items[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            draws = rng.random(len(batch))
            flips = [bool(cfg.horizontal_flip and u < cfg.flip_prob) for u in draws]
            rgb, th, targets = make_batch(videos, batch, variant, det.input_size, flips)
            ctx = ForwardContext("train")
            with GradTape() as tape:
                params = {k: (v if is_buffer(k) else tape.watch(v, name=k)) for k, v in weights.items()}
                loss = detection_loss(forward(rgb, th, params, variant, det, ctx), targets)
            grads = tape.gradient(loss)
            sgd_step(weights, grads, state, lr=cosine_lr(cfg, step, total))
            _update_running_stats(weights, ctx, cfg.bn_momentum)
            epoch_loss += loss.item() * len(batch)
            step += 1
        history.append((epoch, epoch_loss / len(items)))
        if on_epoch is not None:
            on_epoch(epoch, history[-1][1])
    return TrainResult(weights, history)


def _update_running_stats(weights: ModelWeights, ctx: ForwardContext, momentum: float) -> None:
    for prefix, (mu, var) in ctx.bn_stats.items():
        rm, rv = f"{prefix}.running_mean", f"{prefix}.running_var"
        weights[rm] = (1 - momentum) * weights[rm] + momentum * mu
        weights[rv] = (1 - momentum) * weights[rv] + momentum * var


def format_history(history: Sequence[tuple[int, float]]) -> str:
    return "epoch,loss\n" + "".join(f"{e},{l:.6f}\n" for e, l in history)
