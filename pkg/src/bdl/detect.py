"""Exhaustive multi-scale sliding-window detection with greedy non-maximum suppression."""

from __future__ import annotations

import math
from dataclasses import dataclass

from bdl.boxes import BBox, iou
from bdl.channels import extract_stack
from bdl.net import Network, forward
from bdl.numerics import resize_bilinear


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float


@dataclass(frozen=True)
class DetectParams:
    stride: int = 4
    scale_step: float = 1.2
    score_thresh: float = 0.5
    nms_iou: float = 0.5

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if not self.scale_step > 1:
            raise ValueError("scale_step must exceed 1")


def build_pyramid(image, window=(84, 28), scale_step: float = 1.2):
    """Levels ``(scale, image)`` at scales 1, 1/s, 1/s**2, ... while the window still fits.

    Level sizes are ``floor(H * scale) x floor(W * scale)``.
    """
    if scale_step <= 1:
        raise ValueError("scale_step must exceed 1")
    _, h, w = image.shape
    if h < window[0] or w < window[1]:
        raise ValueError(f"image {h}x{w} is smaller than the {window[0]}x{window[1]} window")
    levels = []
    k = 0
    while True:
        scale = scale_step ** (-k)
        lh, lw = math.floor(h * scale), math.floor(w * scale)
        if lh < window[0] or lw < window[1]:
            break
        levels.append((scale, image if k == 0 else resize_bilinear(image, lh, lw)))
        k += 1
    return levels


def scan(level_image, net: Network, scale: float = 1.0, stride: int = 4, score_thresh: float = 0.5, bins: int = 6):
    """Score every window at multiples of ``stride``; boxes are mapped back by dividing by ``scale``.

    Windows are visited row-major (y, then x); detections keep that order.
    """
    wh, ww = net.config.window
    _, h, w = level_image.shape
    dets = []
    for y in range(0, h - wh + 1, stride):
        for x in range(0, w - ww + 1, stride):
            stack = extract_stack(level_image[:, y : y + wh, x : x + ww], (wh, ww), bins)
            s, _ = forward(net, stack)
            if s >= score_thresh:
                dets.append(Detection(BBox(x / scale, y / scale, ww / scale, wh / scale), s))
    return dets


def nms(dets, iou_thresh: float = 0.5):
    """Greedy suppression; order is descending score, ties broken by smaller x then y."""
    kept = []
    for d in sorted(dets, key=lambda d: (-d.score, d.box.x, d.box.y)):
        if all(iou(d.box, k.box) < iou_thresh for k in kept):
            kept.append(d)
    return kept


def detect(image, net: Network, params: DetectParams = DetectParams(), bins: int = 6):
    _, h, w = image.shape
    dets = []
    for scale, level in build_pyramid(image, net.config.window, params.scale_step):
        for d in scan(level, net, scale, params.stride, params.score_thresh, bins):
            dets.append(Detection(d.box.clip(w, h), d.score))
    return nms(dets, params.nms_iou)


def format_detections(stem: str, dets) -> str:
    return "".join(
        f"{stem} {d.box.x:.6f} {d.box.y:.6f} {d.box.w:.6f} {d.box.h:.6f} {d.score:.6f}\n" for d in dets
    )


def parse_detections(text: str, source: str = "<detections>") -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise ValueError(f"{source}:{lineno}: expected 'stem x y w h score'")
        try:
            x, y, w, h, s = (float(v) for v in parts[1:])
            out.setdefault(parts[0], []).append(Detection(BBox(x, y, w, h), s))
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    return out
