"""PAFPN-lite neck, decoupled heads, box decoding, IoU and NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .blocks import INFER, ForwardContext, conv, conv_bn
from .errors import InvalidValueError, ShapeError
from .nn import concat, nearest_upsample
from .tensor import Tensor, _sigmoid_np
from .weights import ModelWeights, add_conv, add_conv_bn

NUM_CLASSES = 7
OBJ_PRIOR = 0.01
DEFAULT_HEAD_WIDTH = 16
EVAL_CONF = 0.01
DEMO_CONF = 0.25
NMS_IOU = 0.65


@dataclass
class LevelPrediction:
    stride: int
    cls_logits: Tensor  # [N x] K x H x W
    obj_logit: Tensor  # [N x] 1 x H x W
    reg: Tensor  # [N x] 4 x H x W: dx, dy, log w, log h (in stride units)


@dataclass
class RawPrediction:
    levels: list[LevelPrediction]

    @property
    def num_classes(self) -> int:
        return self.levels[0].cls_logits.shape[-3]

    def image(self, n: int) -> "RawPrediction":
        """Predictions of batch element ``n`` as un-batched tensors."""
        return RawPrediction([
            LevelPrediction(lv.stride, Tensor(lv.cls_logits.data[n]), Tensor(lv.obj_logit.data[n]),
                            Tensor(lv.reg.data[n]))
            for lv in self.levels
        ])


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max in input pixels


# --------------------------------------------------------------------- neck

def init_neck(w: ModelWeights, seed: int, channels: Sequence[int]) -> None:
    c3, c4, c5 = channels
    add_conv_bn(w, seed, "neck.lat5", c5, c4, 1)
    add_conv_bn(w, seed, "neck.td4", 2 * c4, c4, 3)
    add_conv_bn(w, seed, "neck.lat4", c4, c3, 1)
    add_conv_bn(w, seed, "neck.td3", 2 * c3, c3, 3)
    add_conv_bn(w, seed, "neck.down3", c3, c3, 3)
    add_conv_bn(w, seed, "neck.bu4", 2 * c3, c4, 3)
    add_conv_bn(w, seed, "neck.down4", c4, c4, 3)
    add_conv_bn(w, seed, "neck.bu5", 2 * c4, c5, 3)


def pafpn(features: Sequence[Tensor], params: Mapping, ctx: ForwardContext = INFER) -> list[Tensor]:
    """Top-down FPN pass then bottom-up path aggregation; strides preserved."""
    if len(features) != 3:
        raise ShapeError(f"pafpn needs 3 levels, got {len(features)}")
    f3, f4, f5 = features
    for lo, hi in ((f3, f4), (f4, f5)):
        if lo.shape[-2] != 2 * hi.shape[-2] or lo.shape[-1] != 2 * hi.shape[-1]:
            raise ShapeError(f"pyramid levels {lo.shape} / {hi.shape} are not stride-2 apart")
    lat5 = conv_bn(ctx, params, "neck.lat5", f5)
    td4 = conv_bn(ctx, params, "neck.td4", concat([nearest_upsample(lat5), f4]))
    lat4 = conv_bn(ctx, params, "neck.lat4", td4)
    out3 = conv_bn(ctx, params, "neck.td3", concat([nearest_upsample(lat4), f3]))
    d3 = conv_bn(ctx, params, "neck.down3", out3, stride=2)
    out4 = conv_bn(ctx, params, "neck.bu4", concat([d3, lat4]))
    d4 = conv_bn(ctx, params, "neck.down4", out4, stride=2)
    out5 = conv_bn(ctx, params, "neck.bu5", concat([d4, lat5]))
    return [out3, out4, out5]


# --------------------------------------------------------------------- head

def init_head(w: ModelWeights, seed: int, channels: Sequence[int], num_classes: int = NUM_CLASSES,
              width: int = DEFAULT_HEAD_WIDTH) -> None:
    prior = -math.log((1 - OBJ_PRIOR) / OBJ_PRIOR)
    for i, c in enumerate(channels):
        pre = f"head.l{i}"
        add_conv_bn(w, seed, f"{pre}.cls1", c, width, 3)
        add_conv_bn(w, seed, f"{pre}.cls2", width, width, 3)
        add_conv(w, seed, f"{pre}.cls_pred", width, num_classes, 1, bias=prior)
        add_conv_bn(w, seed, f"{pre}.reg1", c, width, 3)
        add_conv_bn(w, seed, f"{pre}.reg2", width, width, 3)
        add_conv(w, seed, f"{pre}.reg_pred", width, 4, 1, bias=0.0)
        add_conv(w, seed, f"{pre}.obj_pred", width, 1, 1, bias=prior)


def detect_heads(features: Sequence[Tensor], params: Mapping, ctx: ForwardContext = INFER,
                 strides: Sequence[int] = (8, 16, 32)) -> RawPrediction:
    levels = []
    for i, (x, s) in enumerate(zip(features, strides)):
        pre = f"head.l{i}"
        c = conv_bn(ctx, params, f"{pre}.cls2", conv_bn(ctx, params, f"{pre}.cls1", x))
        r = conv_bn(ctx, params, f"{pre}.reg2", conv_bn(ctx, params, f"{pre}.reg1", x))
        levels.append(LevelPrediction(
            s, conv(params, f"{pre}.cls_pred", c), conv(params, f"{pre}.obj_pred", r),
            conv(params, f"{pre}.reg_pred", r),
        ))
    return RawPrediction(levels)


# ------------------------------------------------------------------ boxes

def encode_box(box: Sequence[float], stride: int) -> tuple[int, int, float, float, float, float]:
    """(row, col, dx, dy, log w, log h) of the cell holding the box centre."""
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    col, row = int(cx // stride), int(cy // stride)
    return row, col, cx / stride - col, cy / stride - row, math.log((x2 - x1) / stride), math.log((y2 - y1) / stride)


def decode_cell(row: int, col: int, reg: Sequence[float], stride: int) -> tuple[float, float, float, float]:
    dx, dy, lw, lh = reg
    cx, cy = (col + dx) * stride, (row + dy) * stride
    w, h = math.exp(lw) * stride, math.exp(lh) * stride
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def decode(raw: RawPrediction, conf_threshold: float, image_size: tuple[int, int] | None = None) -> list[Detection]:
    """Anchor-free decode of one image's predictions.

    ``score = sigmoid(obj) * max_k sigmoid(cls_k)``; boxes are clipped to
    the image (``image_size = (H, W)``, default: grid extent x stride) and
    dropped if clipping leaves them empty.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise InvalidValueError(f"conf_threshold must lie in [0, 1], got {conf_threshold}")
    lv0 = raw.levels[0]
    if lv0.cls_logits.ndim != 3:
        raise ShapeError("decode expects un-batched predictions; use RawPrediction.image(n)")
    if image_size is None:
        image_size = (lv0.cls_logits.shape[-2] * lv0.stride, lv0.cls_logits.shape[-1] * lv0.stride)
    img_h, img_w = image_size
    out: list[Detection] = []
    for lv in raw.levels:
        s = lv.stride
        cls_p = _sigmoid_np(lv.cls_logits.data.astype(np.float64))
        obj_p = _sigmoid_np(lv.obj_logit.data.astype(np.float64))[0]
        reg = lv.reg.data.astype(np.float64)
        cls_id = cls_p.argmax(axis=0)
        score = obj_p * np.take_along_axis(cls_p, cls_id[None], axis=0)[0]
        rows, cols = np.nonzero(score >= conf_threshold)
        if len(rows) == 0:
            continue
        cx = (cols + reg[0, rows, cols]) * s
        cy = (rows + reg[1, rows, cols]) * s
        w = np.exp(np.minimum(reg[2, rows, cols], 20.0)) * s
        h = np.exp(np.minimum(reg[3, rows, cols], 20.0)) * s
        x1 = np.clip(cx - w / 2, 0, img_w)
        y1 = np.clip(cy - h / 2, 0, img_h)
        x2 = np.clip(cx + w / 2, 0, img_w)
        y2 = np.clip(cy + h / 2, 0, img_h)
        for k in range(len(rows)):
            if x2[k] > x1[k] and y2[k] > y1[k]:
                out.append(Detection(int(cls_id[rows[k], cols[k]]), float(score[rows[k], cols[k]]),
                                     (float(x1[k]), float(y1[k]), float(x2[k]), float(y2[k]))))
    return out


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union; degenerate boxes contribute zero overlap."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = max(ax2 - ax1, 0) * max(ay2 - ay1, 0) + max(bx2 - bx1, 0) * max(by2 - by1, 0) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _nms_key(d: Detection):
    return (-d.score, d.box[0], d.box[1], d.box[2], d.box[3], d.class_id)


def nms(dets: Sequence[Detection], iou_threshold: float = NMS_IOU) -> list[Detection]:
    """Greedy class-wise suppression; a box is dropped when IoU > threshold
    with an already-kept box of its class."""
    if not 0.0 < iou_threshold < 1.0:
        raise InvalidValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    ordered = sorted(dets, key=_nms_key)
    if not ordered:
        return []
    boxes = np.array([d.box for d in ordered])
    classes = np.array([d.class_id for d in ordered])
    keep: list[int] = []
    suppressed = np.zeros(len(ordered), dtype=bool)
    for i in range(len(ordered)):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = np.arange(i + 1, len(ordered))
        rest = rest[(classes[rest] == classes[i]) & ~suppressed[rest]]
        if len(rest):
            suppressed[rest[iou_matrix(boxes[i], boxes[rest])[0] > iou_threshold]] = True
    return [ordered[i] for i in keep]
