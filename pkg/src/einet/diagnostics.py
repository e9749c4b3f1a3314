"""Noise-erasure feature panels: what the thermal branch removes from RGB."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .backbone import STRIDES, extract_features, infer_config
from .data.letterbox import letterbox
from .errors import ConfigError, ShapeError
from .fusion import erase_noise
from .tensor import Tensor

PANEL_NAMES = ("rgb_image", "thermal_image", "rgb_feature", "denoised_feature")


@dataclass
class FeaturePanels:
    """Four single-channel maps at input resolution.

    Feature panels hold the channel-mean absolute activation of one pyramid
    level, nearest-upsampled to the input size.
    """

    maps: dict[str, np.ndarray]
    level: int
    stride: int

    def __getitem__(self, name: str) -> np.ndarray:
        return self.maps[name]


def _abs_mean_map(F: Tensor, size: int, stride: int) -> np.ndarray:
    m = np.abs(F.data.astype(np.float64)).mean(axis=0)
    return np.repeat(np.repeat(m, stride, axis=0), stride, axis=1)[:size, :size]


def erasure_panels(rgb: np.ndarray, thermal: np.ndarray, weights: Mapping, input_size: int,
                   level: int = 0) -> FeaturePanels:
    """Panels for one RGBT pair (``3 x H x W`` arrays in [0, 1])."""
    if not 0 <= level < len(STRIDES):
        raise ConfigError(f"level must be in 0..{len(STRIDES) - 1}, got {level}")
    if rgb.shape != thermal.shape:
        raise ShapeError(f"RGB {rgb.shape} and thermal {thermal.shape} differ")
    rgb_l, _ = letterbox(rgb, input_size)
    th_l, _ = letterbox(thermal, input_size)
    f_rgb = extract_features(Tensor(rgb_l), weights, "rgb", config=infer_config(weights, "rgb")).levels[level]
    f_t = extract_features(Tensor(th_l), weights, "t", emit_inactive=True,
                           config=infer_config(weights, "t")).levels[level]
    denoised = erase_noise(f_rgb.activated, f_t.inactive)
    s = STRIDES[level]
    maps = {
        "rgb_image": rgb_l.mean(axis=0).astype(np.float64),
        "thermal_image": th_l.mean(axis=0).astype(np.float64),
        "rgb_feature": _abs_mean_map(f_rgb.activated, input_size, s),
        "denoised_feature": _abs_mean_map(denoised, input_size, s),
    }
    return FeaturePanels(maps, level, s)


def box_mask(boxes: Sequence[Sequence[float]], size: int, stride: int = 1) -> np.ndarray:
    """True where a pixel (or a ``stride`` cell) touches any box."""
    n = size // stride
    mask = np.zeros((n, n), dtype=bool)
    for x1, y1, x2, y2 in boxes:
        c0, r0 = int(np.floor(x1 / stride)), int(np.floor(y1 / stride))
        c1, r1 = int(np.ceil(x2 / stride)), int(np.ceil(y2 / stride))
        mask[max(r0, 0):min(r1, n), max(c0, 0):min(c1, n)] = True
    return np.repeat(np.repeat(mask, stride, axis=0), stride, axis=1)


def region_means(panels: FeaturePanels, boxes: Sequence[Sequence[float]]) -> dict[str, tuple[float, float]]:
    """(background, foreground) mean of every panel.

    Background cells are feature cells that no ground-truth box touches.
    """
    size = next(iter(panels.maps.values())).shape[0]
    fg = box_mask(boxes, size, panels.stride)
    out = {}
    for name, m in panels.maps.items():
        bg_vals, fg_vals = m[~fg], m[fg]
        out[name] = (float(bg_vals.mean()) if bg_vals.size else float("nan"),
                     float(fg_vals.mean()) if fg_vals.size else float("nan"))
    return out
