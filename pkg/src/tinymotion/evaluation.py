"""Detection evaluation: IoU matching, precision/recall, AP, throughput.

Matching is greedy one-to-one in descending score order (Pascal-VOC style)
at a single IoU threshold. AP uses all-point interpolation: the exact area
under the monotone (right-max) envelope of the cumulative precision-recall
curve.
"""

from __future__ import annotations

import statistics
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .boxes import BoundingBox, Detection, GroundTruth


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def _score_order(dets: Sequence[Detection]) -> list[int]:
    # Descending score; ties keep input order (stable sort).
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_frame(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5
) -> tuple[np.ndarray, int]:
    """Greedy one-to-one matching within a single frame.

    Detections are processed in descending score (ties by input order); each
    claims the unmatched ground truth with the highest IoU if that IoU is at
    least ``iou_thresh``. Returns (per-detection TP flags aligned with the
    input order, count of unmatched ground truths).
    """
    frames = {d.frame for d in dets} | {g.frame for g in gts}
    if len(frames) > 1:
        raise ValueError(f"mixed frame indices in one matching call: {sorted(frames)}")
    tp = np.zeros(len(dets), dtype=bool)
    taken = [False] * len(gts)
    for i in _score_order(dets):
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i].bbox, gt.bbox)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_thresh:
            tp[i] = True
            taken[best_j] = True
    return tp, taken.count(False)


@dataclass
class EvalReport:
    """Detection metrics at one IoU threshold, counting every detection."""

    precision: float
    recall: float
    ap: float
    tp: int
    fp: int
    fn: int
    pr_curve: list[tuple[float, float]] = field(default_factory=list)
    warning: str | None = None

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "ap": self.ap,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "pr_curve": [[r, p] for r, p in self.pr_curve],
            "warning": self.warning,
        }


def average_precision(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5
) -> EvalReport:
    """Pooled AP over all frames, plus precision/recall counting all detections.

    Raises ValueError when there is nothing to evaluate (no ground truth and
    no detections); detections without any ground truth yield AP 0 with a
    warning set on the report.
    """
    if not gts and not dets:
        raise ValueError("empty evaluation: no ground truth and no detections")
    if not gts:
        return EvalReport(
            precision=0.0,
            recall=0.0,
            ap=0.0,
            tp=0,
            fp=len(dets),
            fn=0,
            warning="no ground truth; all detections are false positives",
        )

    by_frame_dets: dict[int, list[Detection]] = defaultdict(list)
    by_frame_gts: dict[int, list[GroundTruth]] = defaultdict(list)
    for d in dets:
        by_frame_dets[d.frame].append(d)
    for g in gts:
        by_frame_gts[g.frame].append(g)

    tp_flags: dict[int, np.ndarray] = {}
    for frame, frame_dets in by_frame_dets.items():
        flags, _ = match_frame(frame_dets, by_frame_gts.get(frame, []), iou_thresh)
        tp_flags[frame] = flags

    # Pool detections globally in descending score, ties by input order.
    pos_in_frame: dict[int, int] = defaultdict(int)
    pooled = []
    for d in dets:
        frame_pos = pos_in_frame[d.frame]
        pooled.append((d.score, bool(tp_flags[d.frame][frame_pos])))
        pos_in_frame[d.frame] += 1
    pooled.sort(key=lambda item: -item[0])

    n_gt = len(gts)
    curve: list[tuple[float, float]] = []
    cum_tp = 0
    for rank, (_, is_tp) in enumerate(pooled, start=1):
        cum_tp += int(is_tp)
        curve.append((cum_tp / n_gt, cum_tp / rank))

    ap = 0.0
    if curve:
        env = 0.0
        prev_recall = 0.0
        enveloped = []
        for recall, precision in reversed(curve):
            env = max(env, precision)
            enveloped.append(env)
        enveloped.reverse()
        for (recall, _), env_p in zip(curve, enveloped):
            ap += (recall - prev_recall) * env_p
            prev_recall = recall

    total_tp = cum_tp if pooled else 0
    total_fp = len(pooled) - total_tp
    total_fn = n_gt - total_tp
    return EvalReport(
        precision=total_tp / len(pooled) if pooled else 0.0,
        recall=total_tp / n_gt,
        ap=ap,
        tp=total_tp,
        fp=total_fp,
        fn=total_fn,
        pr_curve=curve,
    )


@dataclass
class BenchResult:
    stage: str
    fps: float
    runs: list[float]
    frames: int
    repeats: int


def throughput_bench(
    stage: Callable, frames: Iterable, repeats: int = 5, name: str = "stage"
) -> BenchResult:
    """Median frames-per-second of ``stage`` applied to every frame.

    One untimed warm-up pass runs first (JIT, caches); then ``repeats`` timed
    passes. ``fps`` is the median of per-pass frame rates.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3 for a meaningful median")
    frames = list(frames)
    if not frames:
        raise ValueError("empty frame sequence")
    for f in frames:
        stage(f)
    rates = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for f in frames:
            stage(f)
        elapsed = time.perf_counter() - t0
        rates.append(len(frames) / elapsed if elapsed > 0 else float("inf"))
    return BenchResult(
        stage=name, fps=statistics.median(rates), runs=rates, frames=len(frames), repeats=repeats
    )
