"""End-to-end inference sessions, FPS timing and the ablation table."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data.letterbox import letterbox
from .data.voc import Video
from .detector import DetectorConfig, VariantConfig, check_weights, count_params, estimate_flops, forward
from .errors import ConfigError, WindowError
from .evaluate import DetRecord, EvalResult, coco_map, format_csv, format_table, ground_truth
from .head import EVAL_CONF, NMS_IOU, Detection, decode, nms
from .tensor import Tensor
from .train import PreparedVideo, TrainConfig, make_batch, prepare_videos, train_loop
from .weights import ModelWeights

EVAL_BATCH = 16


@dataclass
class DetectorSession:
    """Weights plus everything needed to turn raw frames into detections."""

    weights: ModelWeights
    variant: VariantConfig
    det: DetectorConfig = field(default_factory=DetectorConfig)
    conf_threshold: float = EVAL_CONF
    iou_threshold: float = NMS_IOU

    def __post_init__(self):
        check_weights(self.weights, self.variant)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.variant.rgb_offsets()) | set(self.variant.thermal_offsets()) | {0}))

    def detect(self, rgb_frames: Mapping[int, np.ndarray], t_frames: Mapping[int, np.ndarray]) -> list[Detection]:
        """Detections for the current frame in source-image pixels.

        Frames are ``3 x H x W`` arrays keyed by temporal offset.
        """
        size = self.det.input_size
        rgb, th, tf = {}, {}, None
        for frames, out, offsets in ((rgb_frames, rgb, self.variant.rgb_offsets()),
                                     (t_frames, th, self.variant.thermal_offsets())):
            missing = [o for o in offsets if o not in frames]
            if missing:
                raise WindowError(f"frames missing for offsets {missing}")
            for o in offsets:
                boxed, tf = letterbox(frames[o], size)  # all frames share one geometry
                out[o] = Tensor(boxed[None])
        raw = forward(rgb, th, self.weights, self.variant, self.det).image(0)
        return [_to_source(d, tf) for d in nms(decode(raw, self.conf_threshold), self.iou_threshold)]

    def detect_prepared(self, videos: Sequence[PreparedVideo]) -> list[DetRecord]:
        """Batched detection over already letterboxed videos."""
        out = []
        for vi, pv in enumerate(videos):
            items = [(vi, t) for t in range(len(pv.rgb))]
            for b in range(0, len(items), EVAL_BATCH):
                chunk = items[b:b + EVAL_BATCH]
                rgb, th, _ = make_batch(videos, chunk, self.variant, self.det.input_size)
                raw = forward(rgb, th, self.weights, self.variant, self.det)
                for n, (_, t) in enumerate(chunk):
                    dets = nms(decode(raw.image(n), self.conf_threshold), self.iou_threshold)
                    out.extend(DetRecord(pv.frame_ids[t], d.class_id, d.score, d.box)
                               for d in (_to_source(d, pv.transforms[t]) for d in dets))
        return out


def _to_source(d: Detection, tf) -> Detection:
    x1, y1, x2, y2 = tf.inverse_box(d.box)
    w, h = tf.src_width, tf.src_height
    box = (min(max(x1, 0.0), w), min(max(y1, 0.0), h), min(max(x2, 0.0), w), min(max(y2, 0.0), h))
    return Detection(d.class_id, d.score, box)


def video_windows(video: Video) -> list[tuple[dict[int, np.ndarray], dict[int, np.ndarray]]]:
    """Raw (unletterboxed) frame windows for every frame of ``video`` at offsets -2..2."""
    frames = [fr.load() for fr in video]
    n = len(frames)
    out = []
    for t in range(n):
        idx = {o: min(max(t + o, 0), n - 1) for o in (-2, -1, 0, 1, 2)}
        out.append(({o: frames[i][0] for o, i in idx.items()}, {o: frames[i][1] for o, i in idx.items()}))
    return out


@dataclass
class FPSReport:
    per_run: list[float]
    frames: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_run))

    @property
    def std(self) -> float:
        return float(np.std(self.per_run))


def fps_benchmark(session: DetectorSession, frames, warmup: int = 2, runs: int = 3) -> FPSReport:
    """Frames/second over ``detect`` calls, single-threaded.

    ``frames`` is a sequence of ``(rgb_window, t_window)`` pairs already in
    memory, so disk reads are excluded.
    """
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    if warmup < 0:
        raise ConfigError("warmup must be >= 0")
    frames = list(frames)
    if not frames:
        raise ConfigError("fps_benchmark needs at least one frame")
    per_run = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            session.detect(*frames[0])
        for _ in range(runs):
            start = time.perf_counter()
            for rgb, th in frames:
                session.detect(rgb, th)
            per_run.append(len(frames) / (time.perf_counter() - start))
    return FPSReport(per_run, len(frames))


def evaluate_session(session: DetectorSession, videos: Sequence[Video],
                     prepared: Sequence[PreparedVideo] | None = None) -> EvalResult:
    prepared = prepared if prepared is not None else prepare_videos(videos, session.det.input_size)
    return coco_map(session.detect_prepared(prepared), ground_truth(videos))


# --------------------------------------------------------------- ablation

@dataclass
class AblationRow:
    variant: str
    ap50: float
    ap: float
    params: int
    flops: int
    fps: float

    def cells(self) -> list[str]:
        return [self.variant, f"{100 * self.ap50:.2f}", f"{100 * self.ap:.2f}", f"{self.params / 1e6:.3f}",
                f"{self.flops / 1e6:.2f}", f"{self.fps:.2f}"]


HEADER = ["variant", "AP50", "AP", "Params(M)", "MFLOPs", "FPS"]


@dataclass
class AblationReport:
    rows: list[AblationRow]
    histories: dict[str, list[tuple[int, float]]] = field(default_factory=dict)

    def table(self) -> list[list[str]]:
        return [HEADER] + [r.cells() for r in self.rows]

    def text(self) -> str:
        return format_table(self.table())

    def csv(self) -> str:
        return format_csv(self.table())


def ablation_report(train_videos: Sequence[Video], test_videos: Sequence[Video],
                    variants: Sequence[VariantConfig], train_cfg: TrainConfig,
                    det: DetectorConfig | None = None, fps_frames: int = 8, fps_runs: int = 3,
                    ) -> AblationReport:
    """Train each variant with the same config and seed, then score it."""
    det = det or DetectorConfig()
    prepared_train = prepare_videos(train_videos, det.input_size)
    prepared_test = prepare_videos(test_videos, det.input_size)
    windows = video_windows(test_videos[0])[:fps_frames] if test_videos and fps_frames else []
    rows, histories = [], {}
    for v in variants:
        res = train_loop(train_videos, train_cfg, v, det, prepared=prepared_train)
        session = DetectorSession(res.weights, v, det)
        ev = coco_map(session.detect_prepared(prepared_test), ground_truth(test_videos))
        fps = fps_benchmark(session, windows, warmup=1, runs=fps_runs).mean if windows else float("nan")
        rows.append(AblationRow(v.variant, ev.ap50, ev.ap, count_params(res.weights, v),
                                estimate_flops(v, det.input_size, det), fps))
        histories[v.variant] = res.history
    return AblationReport(rows, histories)
