"""Deterministic synthetic RGB-thermal video benchmark.

Scenes: a cluttered, textured RGB background and a dim, nearly uniform
thermal background. Objects of the seven traffic classes move on linear
trajectories with jitter (reflecting off the borders). In RGB they are
class-coloured textured rectangles/ellipses; in thermal they are flat
shapes whose intensity depends on the class.

Regimes change only the rendering, never the labels:

* ``day``           as above
* ``night``         RGB scaled by 0.2 plus Gaussian noise (sigma 0.1)
* ``motion_blur``   RGB objects smeared along their velocity
* ``distant_small`` smaller objects; those under an area threshold are
                    missing from the thermal image
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigError, InputError
from .voc import ANN_DIR, CLASSES, RGB_DIR, SETS_DIR, T_DIR, AnnotatedObject, Annotation, write_annotation

REGIMES = ("day", "night", "motion_blur", "distant_small")

# (width, height) in pixels at 64 x 64
SIZE_PRIORS = {
    "car": (14, 9), "van": (16, 11), "electromobile": (8, 10), "person": (6, 12),
    "bus": (24, 13), "truck": (21, 13), "bicycle": (9, 8),
}
RECTANGULAR = {"car", "van", "bus", "truck"}
RGB_COLORS = {
    "car": (0.85, 0.15, 0.15), "van": (0.92, 0.92, 0.95), "electromobile": (0.10, 0.55, 0.90),
    "person": (0.95, 0.75, 0.20), "bus": (0.20, 0.75, 0.25), "truck": (0.55, 0.35, 0.20),
    "bicycle": (0.60, 0.20, 0.70),
}
THERMAL_LEVELS = {
    "car": 0.62, "van": 0.55, "electromobile": 0.80, "person": 0.95,
    "bus": 0.48, "truck": 0.42, "bicycle": 0.72,
}
NIGHT_GAIN = 0.2
NIGHT_NOISE = 0.1
SMALL_AREA = 48.0  # px^2 at 64 x 64, scaled with image area
BLUR_SPAN = 4.0  # smear length in frames of motion
BLUR_SAMPLES = 7


@dataclass(frozen=True)
class SyntheticConfig:
    regime: str = "night"
    num_videos: int = 50
    num_test_videos: int = 12
    frames_per_video: int = 6
    image_size: int = 64
    objects_per_frame: tuple[int, int] = (1, 3)
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; choose from {', '.join(REGIMES)}")
        if self.image_size % 32:
            raise ConfigError(f"image size {self.image_size} must be divisible by 32")
        if self.frames_per_video < 3:
            raise ConfigError("frames_per_video must be >= 3 (a temporal window needs neighbours)")
        if self.num_videos < 1 or not 0 <= self.num_test_videos <= self.num_videos:
            raise ConfigError("need num_videos >= 1 and 0 <= num_test_videos <= num_videos")
        lo, hi = self.objects_per_frame
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad objects_per_frame range {self.objects_per_frame}")


@dataclass(frozen=True)
class ObjectRecord:
    """Geometry log entry; centre and size are the continuous render values."""

    video_id: str
    frame_index: int
    class_name: str
    cx: float
    cy: float
    w: float
    h: float
    box: tuple[int, int, int, int]
    thermal_visible: bool

    @property
    def area(self) -> int:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass
class GeneratedDataset:
    root: Path
    config: SyntheticConfig
    records: list[ObjectRecord] = field(default_factory=list)
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)

    def class_counts(self, split: str | None = None) -> dict[str, int]:
        ids = None if split is None else set(self.train_ids if split == "train" else self.test_ids)
        counts = dict.fromkeys(CLASSES, 0)
        for r in self.records:
            if ids is None or f"{r.video_id}_{r.frame_index:06d}" in ids:
                counts[r.class_name] += 1
        return counts


def _pixel_grid(size: int):
    c = np.arange(size) + 0.5
    return c[None, :], c[:, None]  # x (1 x S), y (S x 1)


def _shape_mask(cls: str, cx: float, cy: float, w: float, h: float, size: int) -> np.ndarray:
    px, py = _pixel_grid(size)
    if cls in RECTANGULAR:
        return (np.abs(px - cx) <= w / 2) & (np.abs(py - cy) <= h / 2)
    return ((px - cx) / (w / 2)) ** 2 + ((py - cy) / (h / 2)) ** 2 <= 1.0


def _texture(cls: str, cx: float, cy: float, size: int) -> np.ndarray:
    """Pattern attached to the object so it moves with it."""
    px, py = _pixel_grid(size)
    u, v = px - cx, py - cy
    k = CLASSES.index(cls)
    if k % 3 == 0:
        pat = (np.floor(u / 2) % 2 == 0)
    elif k % 3 == 1:
        pat = (np.floor(v / 2) % 2 == 0)
    else:
        pat = ((np.floor(u / 2) + np.floor(v / 2)) % 2 == 0)
    return np.where(pat, 1.0, 0.7)


def _background(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.linspace(0.0, 1.0, size)[:, None]
    base = np.array([0.62, 0.66, 0.72])[:, None, None] - 0.12 * y[None] + 0.04 * rng.uniform(-1, 1, (3, 1, 1))
    rgb = np.broadcast_to(base, (3, size, size)).copy()
    scale = size / 64
    for _ in range(rng.integers(6, 11)):
        w, h = rng.uniform(4, 18, 2) * scale
        x0, y0 = rng.uniform(0, size - w), rng.uniform(0, size - h)
        color = rng.uniform(0.25, 0.9, 3)
        px, py = _pixel_grid(size)
        m = (px >= x0) & (px <= x0 + w) & (py >= y0) & (py <= y0 + h)
        rgb[:, m] = color[:, None]
    rgb += rng.normal(0, 0.04, rgb.shape)
    th = 0.18 + 0.04 * y * np.ones((1, size)) + rng.normal(0, 0.015, (size, size))
    return np.clip(rgb, 0, 1), np.clip(th, 0, 1)


def _trajectories(rng: np.random.Generator, cfg: SyntheticConfig, regime: str):
    size = cfg.image_size
    scale = size / 64
    obj_scale = scale * (0.65 if regime == "distant_small" else 1.0)
    lo, hi = cfg.objects_per_frame
    objs = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        cls = CLASSES[int(rng.integers(len(CLASSES)))]
        pw, ph = SIZE_PRIORS[cls]
        w = pw * obj_scale * rng.uniform(0.85, 1.15)
        h = ph * obj_scale * rng.uniform(0.85, 1.15)
        cx = rng.uniform(w / 2 + 1, size - w / 2 - 1)
        cy = rng.uniform(h / 2 + 1, size - h / 2 - 1)
        theta = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.3, 1.5) * scale
        vx, vy = speed * np.cos(theta), speed * np.sin(theta)
        track = []
        for _t in range(cfg.frames_per_video):
            track.append((cx, cy, vx, vy))
            cx += vx + rng.normal(0, 0.2 * scale)
            cy += vy + rng.normal(0, 0.2 * scale)
            if not w / 2 + 1 <= cx <= size - w / 2 - 1:
                vx = -vx
                cx = float(np.clip(cx, w / 2 + 1, size - w / 2 - 1))
            if not h / 2 + 1 <= cy <= size - h / 2 - 1:
                vy = -vy
                cy = float(np.clip(cy, h / 2 + 1, size - h / 2 - 1))
        objs.append((cls, w, h, track))
    return objs


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)


def render_video(cfg: SyntheticConfig, video_index: int):
    """Render one video. Returns ``(rgb_frames, thermal_frames, records)``;
    frames are uint8 arrays (H x W x 3 and H x W)."""
    size = cfg.image_size
    scene_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, video_index, 0]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, video_index, 1]))
    bg_rgb, bg_t = _background(scene_rng, size)
    objs = _trajectories(scene_rng, cfg, cfg.regime)
    small_area = SMALL_AREA * (size / 64) ** 2
    video_id = f"v{video_index:03d}"

    rgbs, ths, records = [], [], []
    for t in range(cfg.frames_per_video):
        rgb, th = bg_rgb.copy(), bg_t.copy()
        for cls, w, h, track in objs:
            cx, cy, vx, vy = track[t]
            color = np.array(RGB_COLORS[cls])[:, None, None]
            if cfg.regime == "motion_blur":
                acc_m = np.zeros((size, size))
                acc_c = np.zeros((3, size, size))
                for tau in np.linspace(-0.5, 0.5, BLUR_SAMPLES):
                    ox, oy = cx + tau * BLUR_SPAN * vx, cy + tau * BLUR_SPAN * vy
                    m = _shape_mask(cls, ox, oy, w, h, size)
                    acc_m += m
                    acc_c += color * _texture(cls, ox, oy, size)[None] * m[None]
                alpha = acc_m / BLUR_SAMPLES
                obj_color = acc_c / np.maximum(acc_m, 1e-9)[None]
                rgb = rgb * (1 - alpha[None]) + obj_color * alpha[None]
            else:
                m = _shape_mask(cls, cx, cy, w, h, size)
                rgb = np.where(m[None], color * _texture(cls, cx, cy, size)[None], rgb)
            visible = not (cfg.regime == "distant_small" and w * h < small_area)
            if visible:
                m = _shape_mask(cls, cx, cy, w, h, size)
                th = np.where(m, THERMAL_LEVELS[cls], th)
            box = (
                int(np.clip(round(cx - w / 2), 0, size)), int(np.clip(round(cy - h / 2), 0, size)),
                int(np.clip(round(cx + w / 2), 0, size)), int(np.clip(round(cy + h / 2), 0, size)),
            )
            records.append(ObjectRecord(video_id, t, cls, float(cx), float(cy), float(w), float(h), box, visible))
        if cfg.regime == "night":
            rgb = rgb * NIGHT_GAIN + noise_rng.normal(0, NIGHT_NOISE, rgb.shape)
        rgbs.append(_to_u8(rgb).transpose(1, 2, 0))
        ths.append(_to_u8(th))
    return rgbs, ths, records


def generate_synthetic(cfg: SyntheticConfig, out_root) -> GeneratedDataset:
    """Write the dataset in the VOC RGBT layout plus ``manifest.csv``."""
    root = Path(out_root)
    try:
        for sub in (RGB_DIR, T_DIR, ANN_DIR, SETS_DIR):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot write dataset to {root}: {exc}") from None

    result = GeneratedDataset(root, cfg)
    n_train = cfg.num_videos - cfg.num_test_videos
    for v in range(cfg.num_videos):
        rgbs, ths, records = render_video(cfg, v)
        ids = []
        for t, (rgb, th) in enumerate(zip(rgbs, ths)):
            fid = f"v{v:03d}_{t:06d}"
            ids.append(fid)
            Image.fromarray(rgb, "RGB").save(root / RGB_DIR / f"{fid}.png", format="PNG", compress_level=6)
            Image.fromarray(th, "L").save(root / T_DIR / f"{fid}.png", format="PNG", compress_level=6)
            objects = [AnnotatedObject(r.class_name, r.box) for r in records if r.frame_index == t]
            ann = Annotation(fid, cfg.image_size, cfg.image_size, objects)
            (root / ANN_DIR / f"{fid}.xml").write_text(write_annotation(ann))
        (result.train_ids if v < n_train else result.test_ids).extend(ids)
        result.records.extend(records)

    (root / SETS_DIR / "train.txt").write_text("".join(f"{i}\n" for i in result.train_ids))
    (root / SETS_DIR / "test.txt").write_text("".join(f"{i}\n" for i in result.test_ids))
    with open(root / "manifest.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["video_id", "frame_index", "class", "area", "regime"])
        for r in result.records:
            wr.writerow([r.video_id, r.frame_index, r.class_name, r.area, cfg.regime])
    return result


def config_dict(cfg: SyntheticConfig) -> dict:
    d = asdict(cfg)
    d["objects_per_frame"] = list(cfg.objects_per_frame)
    return d
