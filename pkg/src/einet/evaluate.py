"""Detection metrics, per-class object counts and the detections text format."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .data.voc import CLASSES, Video
from .errors import ParseError
from .head import iou_matrix

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class DetRecord(NamedTuple):
    frame_id: str
    class_id: int
    score: float
    box: tuple[float, float, float, float]


class GTRecord(NamedTuple):
    frame_id: str
    class_id: int
    box: tuple[float, float, float, float]
    difficult: bool = False


def match_detections(dets: Sequence[DetRecord], gts: Sequence[GTRecord],
                     iou_threshold: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy score-ordered one-to-one matching for a single class.

    Returns ``(scores, is_tp)`` over the non-ignored detections in rank order,
    plus the number of non-difficult ground truths. A detection whose best
    available match is a difficult ground truth is ignored entirely.
    """
    by_frame: dict[str, list[int]] = {}
    for i, g in enumerate(gts):
        by_frame.setdefault(g.frame_id, []).append(i)
    boxes = np.array([g.box for g in gts], dtype=np.float64).reshape(-1, 4)
    difficult = np.array([g.difficult for g in gts], dtype=bool)
    taken = np.zeros(len(gts), dtype=bool)
    npos = int((~difficult).sum())

    order = sorted(dets, key=lambda d: (-d.score, d.frame_id, tuple(d.box)))
    scores, tp = [], []
    for d in order:
        cand = by_frame.get(d.frame_id, [])
        hit, ignored = False, False
        if cand:
            ious = iou_matrix(np.array([d.box], dtype=np.float64), boxes[cand])[0]
            best, best_iou = -1, -1.0
            for j, v in zip(cand, ious):
                if not taken[j] and not difficult[j] and v >= iou_threshold and v > best_iou:
                    best, best_iou = j, v
            if best >= 0:
                taken[best] = True
                hit = True
            else:
                ignored = any(difficult[j] and v >= iou_threshold for j, v in zip(cand, ious))
        if ignored:
            continue
        scores.append(d.score)
        tp.append(hit)
    return np.array(scores, dtype=np.float64), np.array(tp, dtype=bool), npos


def interpolated_ap(is_tp: np.ndarray, npos: int) -> float:
    """101-point interpolated area under the precision/recall curve."""
    if npos == 0:
        return 0.0
    if len(is_tp) == 0:
        return 0.0
    ctp = np.cumsum(is_tp)
    cfp = np.cumsum(~is_tp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # tolerance: linspace gives 0.35000000000000003 where 7/20 recall is exactly 0.35
    idx = np.searchsorted(recall, RECALL_POINTS - 1e-12, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(dets: Iterable[DetRecord], gts: Iterable[GTRecord],
                      iou_threshold: float = 0.5) -> dict[int, float]:
    """Per-class AP; classes without non-difficult ground truth are absent."""
    dets, gts = list(dets), list(gts)
    out = {}
    for c in sorted({g.class_id for g in gts if not g.difficult}):
        _, tp, npos = match_detections([d for d in dets if d.class_id == c],
                                       [g for g in gts if g.class_id == c], iou_threshold)
        out[c] = interpolated_ap(tp, npos)
    return out


@dataclass
class EvalResult:
    per_class: dict[int, list[float]]  # class -> AP at each of IOU_THRESHOLDS
    ap50: float
    ap: float
    num_gt: dict[int, int] = field(default_factory=dict)
    num_dets: int = 0

    @property
    def absent(self) -> list[int]:
        return [c for c in range(len(CLASSES)) if c not in self.per_class]

    def table(self) -> list[tuple[str, str, str, str]]:
        rows = [("class", "gt", "AP50", "AP")]
        for c in range(len(CLASSES)):
            if c in self.per_class:
                aps = self.per_class[c]
                rows.append((CLASSES[c], str(self.num_gt.get(c, 0)), f"{100 * aps[0]:.2f}",
                             f"{100 * float(np.mean(aps)):.2f}"))
            else:
                rows.append((CLASSES[c], "0", "absent", "absent"))
        rows.append(("all", str(sum(self.num_gt.values())), f"{100 * self.ap50:.2f}", f"{100 * self.ap:.2f}"))
        return rows


def coco_map(dets: Iterable[DetRecord], gts: Iterable[GTRecord]) -> EvalResult:
    dets, gts = list(dets), list(gts)
    per_class: dict[int, list[float]] = {}
    for thr in IOU_THRESHOLDS:
        for c, v in average_precision(dets, gts, thr).items():
            per_class.setdefault(c, []).append(v)
    num_gt = {c: sum(1 for g in gts if g.class_id == c and not g.difficult) for c in per_class}
    if not per_class:
        return EvalResult({}, 0.0, 0.0, {}, len(dets))
    ap50 = float(np.mean([v[0] for v in per_class.values()]))
    ap = float(np.mean([np.mean(v) for v in per_class.values()]))
    return EvalResult(per_class, ap50, ap, num_gt, len(dets))


def ground_truth(videos: Iterable[Video]) -> list[GTRecord]:
    return [GTRecord(fr.frame_id, o.class_id, tuple(float(v) for v in o.box), o.difficult)
            for video in videos for fr in video for o in fr.annotation.objects]


# ----------------------------------------------------------- class table

@dataclass
class ClassStats:
    counts: dict[str, list[int]]  # split -> per-class counts in taxonomy order

    def totals(self) -> dict[str, int]:
        return {s: sum(v) for s, v in self.counts.items()}

    def rows(self) -> list[list[str]]:
        header = [""] + [c.capitalize() for c in CLASSES] + ["Total"]
        body = [[s.capitalize()] + [str(n) for n in v] + [str(sum(v))] for s, v in self.counts.items()]
        return [header] + body


def class_stats(splits: Mapping[str, Sequence[Video]]) -> ClassStats:
    counts = {}
    for split, videos in splits.items():
        row = [0] * len(CLASSES)
        for video in videos:
            for fr in video:
                for o in fr.annotation.objects:
                    row[o.class_id] += 1
        counts[split] = row
    return ClassStats(counts)


# ------------------------------------------------------------ text I/O

def format_detections(records: Iterable[DetRecord]) -> str:
    return "".join(
        f"{r.frame_id} {r.class_id} {r.score:.6f} " + " ".join(f"{v:.6f}" for v in r.box) + "\n"
        for r in records
    )


def parse_detections(text: str) -> list[DetRecord]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ParseError(f"detections line {n}: expected 7 fields, got {len(parts)}")
        try:
            cls = int(parts[1])
            score = float(parts[2])
            box = tuple(float(v) for v in parts[3:])
        except ValueError:
            raise ParseError(f"detections line {n}: non-numeric field in {line!r}") from None
        if not 0 <= cls < len(CLASSES):
            raise ParseError(f"detections line {n}: class id {cls} outside 0..{len(CLASSES) - 1}")
        out.append(DetRecord(parts[0], cls, score, box))
    return out


def format_table(rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned first column, right-aligned rest."""
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def format_csv(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()
