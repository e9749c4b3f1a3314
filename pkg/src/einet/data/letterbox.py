"""Aspect-preserving resize onto a padded square canvas."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, InputError

PAD_VALUE = 114.0 / 255.0


@dataclass(frozen=True)
class LetterboxTransform:
    """``dst = src * scale + pad`` per axis."""

    scale_x: float
    scale_y: float
    pad_x: int
    pad_y: int
    src_width: int
    src_height: int

    def forward_box(self, box):
        x1, y1, x2, y2 = box
        return (x1 * self.scale_x + self.pad_x, y1 * self.scale_y + self.pad_y,
                x2 * self.scale_x + self.pad_x, y2 * self.scale_y + self.pad_y)

    def inverse_box(self, box):
        x1, y1, x2, y2 = box
        return ((x1 - self.pad_x) / self.scale_x, (y1 - self.pad_y) / self.scale_y,
                (x2 - self.pad_x) / self.scale_x, (y2 - self.pad_y) / self.scale_y)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a ``C x H x W`` array."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(image.dtype)


def letterbox(image: np.ndarray, target: int) -> tuple[np.ndarray, LetterboxTransform]:
    """Fit ``image`` (C x H x W) into ``target x target``, padding centred with grey."""
    if target % 32:
        raise ConfigError(f"letterbox target {target} must be divisible by 32")
    image = np.asarray(image, dtype=np.float32)
    c, h, w = image.shape
    if h == 0 or w == 0:
        raise InputError("cannot letterbox an empty image")
    scale = min(target / w, target / h)
    new_w = min(target, max(1, int(round(w * scale))))
    new_h = min(target, max(1, int(round(h * scale))))
    pad_x = (target - new_w) // 2
    pad_y = (target - new_h) // 2
    canvas = np.full((c, target, target), PAD_VALUE, dtype=np.float32)
    canvas[:, pad_y:pad_y + new_h, pad_x:pad_x + new_w] = resize_bilinear(image, new_h, new_w)
    return canvas, LetterboxTransform(new_w / w, new_h / h, pad_x, pad_y, w, h)
