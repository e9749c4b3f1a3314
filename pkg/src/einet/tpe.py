"""Temporal Proximity Enhancement.

Each neighbouring frame's features ``F_o`` are weighted by their own
channel descriptor ``P_o = GAP(F_o)`` (C x 1 x 1) and spatial descriptor
``V_o = max_c F_o`` (1 x H x W); the weighted neighbours are summed and
replace the current frame's features::

    F_new = sum_o P_o * V_o * F_o
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .errors import InputError, ShapeError, WindowError
from .nn import channel_max, global_avg_pool
from .tensor import Tensor


@dataclass(frozen=True)
class SCSCStats:
    P: Tensor  # C x 1 x 1
    V: Tensor  # 1 x H x W

    def similarity(self) -> Tensor:
        """Broadcast product ``P x V`` (C x H x W)."""
        return self.P * self.V


@dataclass(frozen=True)
class TemporalWindow:
    offsets: tuple[int, ...]

    def __post_init__(self):
        offs = tuple(int(o) for o in self.offsets)
        object.__setattr__(self, "offsets", offs)
        if not offs:
            raise WindowError("temporal window must contain at least one offset")
        if any(o == 0 for o in offs):
            raise WindowError("offset 0 is the current frame and cannot be a neighbour")
        if any(abs(o) > 2 for o in offs):
            raise WindowError(f"offsets must satisfy |o| <= 2, got {offs}")
        if len(set(offs)) != len(offs):
            raise WindowError(f"duplicate offsets in {offs}")

    @classmethod
    def parse(cls, text: str) -> "TemporalWindow":
        """Accept a group letter (``a``..``h``) or a comma list like ``-1,+1``."""
        key = text.strip().lower()
        if key in WINDOW_GROUPS:
            return WINDOW_GROUPS[key]
        try:
            return cls(tuple(int(t) for t in key.split(",") if t.strip()))
        except ValueError:
            raise WindowError(f"cannot parse temporal window {text!r}") from None

    def __str__(self):
        return ",".join(f"{o:+d}" for o in self.offsets)


# Auxiliary-frame groups from the temporal-window ablation.
WINDOW_GROUPS: dict[str, TemporalWindow] = {
    "a": TemporalWindow((-2,)),
    "b": TemporalWindow((-1,)),
    "c": TemporalWindow((1,)),
    "d": TemporalWindow((2,)),
    "e": TemporalWindow((-2, -1)),
    "f": TemporalWindow((-1, 1)),
    "g": TemporalWindow((1, 2)),
    "h": TemporalWindow((-2, -1, 1, 2)),
}
DEFAULT_WINDOW = WINDOW_GROUPS["f"]


def scsc_stats(F: Tensor) -> SCSCStats:
    return SCSCStats(global_avg_pool(F), channel_max(F))


def _weighted(F: Tensor) -> Tensor:
    s = scsc_stats(F)
    return s.P * s.V * F


def tpe_fuse(F_prev: Tensor, F_next: Tensor) -> Tensor:
    if F_prev.shape != F_next.shape:
        raise ShapeError(f"neighbour shapes differ: {F_prev.shape} vs {F_next.shape}")
    return _weighted(F_prev) + _weighted(F_next)


def tpe_fuse_window(frames: Mapping[int, Tensor], window: TemporalWindow,
                    current: Tensor | None = None) -> Tensor:
    """Sum of self-weighted neighbours over ``window``.

    ``current`` is added as a residual when given. Off by default: the sum
    normally uses neighbours only.
    """
    missing = [o for o in window.offsets if o not in frames]
    if missing:
        raise WindowError(f"frames missing for offsets {missing}")
    shape = frames[window.offsets[0]].shape
    out = None
    for o in window.offsets:
        F = frames[o]
        if F.shape != shape:
            raise ShapeError(f"frame {o:+d} has shape {F.shape}, expected {shape}")
        term = _weighted(F)
        out = term if out is None else out + term
    if current is not None:
        out = out + current
    return out


def clamp_triplet(video_length: int, t: int, window: TemporalWindow) -> dict[int, int]:
    """Neighbour frame indices for frame ``t``, clamped into the video."""
    if video_length < 1:
        raise InputError("empty video")
    if not 0 <= t < video_length:
        raise InputError(f"frame {t} outside video of length {video_length}")
    return {o: min(max(t + o, 0), video_length - 1) for o in window.offsets}
