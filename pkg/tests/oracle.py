"""Independent brute-force evaluation oracle.

For every candidate threshold the detections at or above it are re-matched
from scratch (no reuse of a single global matching), giving the operating
points directly; the log-average miss rate is then read off the stated
definition with plain loops.
"""

import math


def box_iou(a, b):
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ix = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    iy = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter) if inter > 0 else 0.0


def match_counts(dets, gts, thresh=0.5):
    """dets: [(box, score)], gts: [box]. Returns (tp, fp, missed)."""
    used = set()
    tp = 0
    for box, _ in sorted(dets, key=lambda d: (-d[1], d[0][0], d[0][1])):
        cands = [(box_iou(box, g), -j) for j, g in enumerate(gts) if j not in used]
        cands = [c for c in cands if c[0] >= thresh]
        if cands:
            _, negj = max(cands)
            used.add(-negj)
            tp += 1
    return tp, len(dets) - tp, len(gts) - tp


def brute_force_lamr(images, thresh=0.5):
    """images: list of (dets, gts). Returns (lamr, points)."""
    n_img = len(images)
    n_gt = sum(len(g) for _, g in images)
    thresholds = sorted({s for dets, _ in images for _, s in dets})
    points = []
    for t in thresholds:
        tp = fp = 0
        for dets, gts in images:
            a, b, _ = match_counts([d for d in dets if d[1] >= t], gts, thresh)
            tp += a
            fp += b
        points.append((fp / n_img, 1 - tp / n_gt))
    logs = []
    for k in range(9):
        f = 10 ** (-2 + k / 4)
        ok = [mr for fppi, mr in points if fppi <= f]
        logs.append(math.log(max(min(ok) if ok else 1.0, 1e-10)))
    return math.exp(sum(logs) / 9), points
