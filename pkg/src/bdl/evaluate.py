"""Miss rate versus false positives per image, and the log-average miss rate.

Detections are matched greedily per image in descending score order to the
unmatched ground truth of highest IoU (>= 0.5, ties to the lower index).
Sweeping the score threshold over the distinct detection scores gives the
operating points; the log-average miss rate is the geometric mean of the miss
rate sampled at nine FPPI reference points log-spaced over [1e-2, 1]. A
reference point with no operating point at or below it counts as miss rate 1.
Ignore regions are not modelled.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from bdl.boxes import BBox, iou

REASONABLE_MIN_HEIGHT = 50
REASONABLE_MAX_OCCLUSION = 0.35
FPPI_REFERENCE = tuple(10.0 ** (-2.0 + k / 4.0) for k in range(9))
MR_FLOOR = 1e-10


@dataclass(frozen=True)
class GroundTruth:
    box: BBox
    occlusion: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.occlusion <= 1.0:
            raise ValueError(f"occlusion fraction must lie in [0, 1], got {self.occlusion}")


@dataclass
class MatchResult:
    tp: int
    fp: int
    missed: int
    scored: list = field(default_factory=list)  # (score, is_tp) per detection


@dataclass
class EvalCurve:
    points: list  # (threshold, fppi, miss_rate), fppi ascending
    lamr: float
    reference: list  # (fppi reference point, sampled miss rate)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fppi", "miss_rate"])
            for t, f, m in self.points:
                w.writerow([f"{t:.6f}", f"{f:.6f}", f"{m:.6f}"])

    def write_reference_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fppi", "miss_rate"])
            for f, m in self.reference:
                w.writerow([f"{f:.6f}", f"{m:.6f}"])


def reasonable_filter(gts):
    return [g for g in gts if g.box.h >= REASONABLE_MIN_HEIGHT and g.occlusion <= REASONABLE_MAX_OCCLUSION]


def _det_order(dets):
    return sorted(dets, key=lambda d: (-d.score, d.box.x, d.box.y))


def match(dets, gts, iou_thresh: float = 0.5) -> MatchResult:
    taken = [False] * len(gts)
    scored = []
    for d in _det_order(dets):
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            o = iou(d.box, g.box)
            if o > best_iou or (o == best_iou and best < 0):
                best, best_iou = j, o
        if best >= 0:
            taken[best] = True
        scored.append((d.score, best >= 0))
    tp = sum(taken)
    return MatchResult(tp=tp, fp=len(dets) - tp, missed=len(gts) - tp, scored=scored)


def log_average_miss_rate(points, reference=FPPI_REFERENCE):
    """Returns ``(lamr, [(f, mr(f)), ...])`` for operating points ``(threshold, fppi, miss_rate)``."""
    sampled = []
    for f in reference:
        eligible = [mr for _, fppi, mr in points if fppi <= f]
        sampled.append((f, min(eligible) if eligible else 1.0))
    lamr = math.exp(sum(math.log(max(mr, MR_FLOOR)) for _, mr in sampled) / len(sampled))
    return lamr, sampled


def curve(per_image, num_images: int, num_gt: int) -> EvalCurve:
    if num_images < 1:
        raise ValueError("need at least one image")
    if num_gt <= 0:
        raise ValueError("miss rate is undefined without ground truth")
    scored = [s for r in per_image for s in r.scored]
    scores = np.array([s for s, _ in scored], dtype=np.float64)
    hits = np.array([t for _, t in scored], dtype=bool)
    points = []
    for thr in sorted(set(scores.tolist()), reverse=True):
        keep = scores >= thr
        tp = int(np.count_nonzero(hits & keep))
        fp = int(np.count_nonzero(~hits & keep))
        points.append((thr, fp / num_images, 1.0 - tp / num_gt))
    points.sort(key=lambda p: (p[1], -p[0]))
    lamr, reference = log_average_miss_rate(points)
    return EvalCurve(points=points, lamr=lamr, reference=reference)


def evaluate(detections: dict, truths: dict, iou_thresh: float = 0.5, reasonable: bool = True) -> EvalCurve:
    """Evaluate detections keyed by image stem against ground truth keyed the same way.

    Every stem in ``truths`` counts as an image, including those without
    detections; detections on stems absent from ``truths`` are rejected.
    """
    stray = set(detections) - set(truths)
    if stray:
        raise ValueError(f"detections for images without annotations: {sorted(stray)}")
    results, num_gt = [], 0
    for stem in sorted(truths):
        gts = reasonable_filter(truths[stem]) if reasonable else list(truths[stem])
        num_gt += len(gts)
        results.append(match(detections.get(stem, []), gts, iou_thresh))
    return curve(results, len(truths), num_gt)
