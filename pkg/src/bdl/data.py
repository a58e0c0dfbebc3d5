"""Datasets on disk, training-window sampling and a seeded synthetic scene generator.

Layout::

    dataset/images/<stem>.ppm        binary P6 (or P5 grayscale)
    dataset/annotations/<stem>.txt   lines ``person x y w h [occlusion]``
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bdl.boxes import BBox, iou
from bdl.channels import WINDOW, extract_stack
from bdl.evaluate import GroundTruth
from bdl.numerics import Rng, resize_bilinear
from bdl.train import Sample

log = logging.getLogger(__name__)

NEGATIVE_MAX_IOU = 0.3
NEGATIVE_ATTEMPTS = 1000


class DatasetError(ValueError):
    pass


# -- netpbm --------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_netpbm(path) -> np.ndarray:
    """Read a binary P6/P5 file as an RGB tensor [3, H, W] scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    pos, fields = 0, []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if not m:
            raise DatasetError(f"{path}: truncated netpbm header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P6", b"P5"):
        raise DatasetError(f"{path}: unsupported netpbm type {magic!r} (need P6 or P5)")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed netpbm header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DatasetError(f"{path}: invalid netpbm dimensions or maxval")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    data = raw[pos + 1 : pos + 1 + count * dtype.itemsize]
    if len(data) != count * dtype.itemsize:
        raise DatasetError(f"{path}: pixel data truncated")
    pixels = np.frombuffer(data, dtype=dtype).reshape(height, width, channels).astype(np.float64) / maxval
    if channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an RGB tensor [3, H, W] in [0, 1] as an 8-bit P6 file."""
    _, h, w = image.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + to_uint8(image).transpose(1, 2, 0).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.asarray(gray, dtype=np.uint8).tobytes())


# -- annotations and datasets --------------------------------------------------


def parse_annotations(path, image_size=None) -> list[GroundTruth]:
    """Parse ``person x y w h [occ]`` lines; ``image_size`` = (H, W) enables bounds checks."""
    truths = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        where = f"{path}:{lineno}"
        if parts[0] != "person" or len(parts) not in (5, 6):
            raise DatasetError(f"{where}: expected 'person x y w h [occlusion]', got {line.strip()!r}")
        try:
            x, y, w, h = (int(v) for v in parts[1:5])
            occ = float(parts[5]) if len(parts) == 6 else 0.0
            gt = GroundTruth(BBox(x, y, w, h), occ)
        except ValueError as exc:
            raise DatasetError(f"{where}: {exc}") from None
        if image_size is not None and not gt.box.inside(image_size[1], image_size[0]):
            raise DatasetError(f"{where}: box {x} {y} {w} {h} lies outside the {image_size[1]}x{image_size[0]} image")
        truths.append(gt)
    return truths


def format_annotations(truths) -> str:
    lines = []
    for g in truths:
        b = g.box
        occ = f" {g.occlusion:g}" if g.occlusion else ""
        lines.append(f"person {int(b.x)} {int(b.y)} {int(b.w)} {int(b.h)}{occ}")
    return "".join(line + "\n" for line in lines)


@dataclass
class Entry:
    image: np.ndarray
    truths: list
    stem: str


@dataclass
class Dataset:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def save(self, root) -> None:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "annotations").mkdir(parents=True, exist_ok=True)
        for e in self.entries:
            write_ppm(root / "images" / f"{e.stem}.ppm", e.image)
            (root / "annotations" / f"{e.stem}.txt").write_text(format_annotations(e.truths))

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(e.stem.encode() + b"\0")
            h.update(np.ascontiguousarray(e.image, dtype="<f8").tobytes())
            h.update(format_annotations(e.truths).encode())
        return h.hexdigest()


def image_paths(root) -> list[Path]:
    root = Path(root)
    folder = root / "images" if (root / "images").is_dir() else root
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "images").is_dir():
        raise DatasetError(f"{root}: missing images/ directory")
    entries = []
    for path in image_paths(root):
        image = read_netpbm(path)
        ann = root / "annotations" / f"{path.stem}.txt"
        truths = parse_annotations(ann, image.shape[1:]) if ann.exists() else []
        entries.append(Entry(image, truths, path.stem))
    return Dataset(entries)


def load_truths(root) -> dict[str, list[GroundTruth]]:
    """Annotations keyed by stem, one key per image (images without a file get [])."""
    root = Path(root)
    out = {}
    for path in image_paths(root):
        ann = root / "annotations" / f"{path.stem}.txt"
        out[path.stem] = parse_annotations(ann) if ann.exists() else []
    return out


# -- window sampling -----------------------------------------------------------


def crop_resize(image: np.ndarray, box: BBox, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = image.shape
    x0, y0 = max(int(round(box.x)), 0), max(int(round(box.y)), 0)
    x1, y1 = min(int(round(box.x + box.w)), w), min(int(round(box.y + box.h)), h)
    return resize_bilinear(image[:, y0:y1, x0:x1], out_h, out_w)


def sample_windows(ds: Dataset, rng: Rng, neg_per_image: int, window=WINDOW, bins: int = 6) -> list[Sample]:
    """Positives from every truth box plus ``neg_per_image`` random negatives per image.

    Negatives are windows of the model aspect ratio at a random scale (height
    between the window height and the image height) whose IoU with every truth
    is below 0.3. Samples come out image by image, positives first.
    """
    wh, ww = window
    samples, skipped_images, missing_negatives = [], 0, 0
    for e in ds:
        _, h, w = e.image.shape
        if h < wh or w < ww:
            skipped_images += 1
            continue
        for g in e.truths:
            samples.append(Sample(extract_stack(crop_resize(e.image, g.box, wh, ww), window, bins), 1))
        max_h = min(h, int(math.floor(w * wh / ww)))
        for _ in range(neg_per_image):
            for _ in range(NEGATIVE_ATTEMPTS):
                bh = rng.integers(wh, max_h + 1)
                bw = max(1, int(round(bh * ww / wh)))
                box = BBox(rng.integers(0, w - bw + 1), rng.integers(0, h - bh + 1), bw, bh)
                if all(iou(box, g.box) < NEGATIVE_MAX_IOU for g in e.truths):
                    samples.append(Sample(extract_stack(crop_resize(e.image, box, wh, ww), window, bins), 0))
                    break
            else:
                missing_negatives += 1
    if skipped_images:
        log.warning("skipped %d images smaller than the %dx%d window", skipped_images, wh, ww)
    if missing_negatives:
        log.warning("could not place %d negative windows", missing_negatives)
    return samples


# -- synthetic scenes ----------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 20
    height: int = 168
    width: int = 56
    min_figures: int = 0
    max_figures: int = 2
    figure_heights: tuple = (84, 112)
    contrast: float = 0.35
    clutter: int = 4
    noise: float = 0.15
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "figure_heights", tuple(int(v) for v in self.figure_heights))
        if self.num_images < 0 or self.clutter < 0 or self.noise < 0:
            raise ValueError("num_images, clutter and noise must be non-negative")
        if not 0 <= self.min_figures <= self.max_figures:
            raise ValueError("need 0 <= min_figures <= max_figures")
        if self.contrast < 0:
            raise ValueError("contrast must be non-negative")
        for fh in self.figure_heights:
            if fh > self.height or int(round(fh / 3)) > self.width:
                raise ValueError(f"figure height {fh} does not fit a {self.height}x{self.width} image")


def _draw_figure(image: np.ndarray, box: BBox, color: np.ndarray) -> None:
    _, h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cx = box.x + box.w / 2.0
    bar_w = box.h / 3.0 * 0.45
    radius = bar_w * 0.62
    head_cy = box.y + radius + 1
    body_top = head_cy + radius
    body = (np.abs(xx + 0.5 - cx) <= bar_w / 2) & (yy >= body_top) & (yy < box.y + box.h - 1)
    head = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - head_cy) ** 2 <= radius**2
    mask = body | head
    image[:, mask] += color[:, None]


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Noisy scenes with bright bar-and-head figures; boxes are 1:3 around each figure."""
    rng = Rng(cfg.seed)
    entries = []
    for n in range(cfg.num_images):
        r = rng.spawn()
        base = r.uniform(0.25, 0.55, 3)
        image = base[:, None, None] + r.uniform(-cfg.noise, cfg.noise, (3, cfg.height, cfg.width))
        for _ in range(cfg.clutter):
            ch, cw = r.integers(4, cfg.height // 2), r.integers(3, cfg.width // 2)
            y0, x0 = r.integers(0, cfg.height - ch + 1), r.integers(0, cfg.width - cw + 1)
            image[:, y0 : y0 + ch, x0 : x0 + cw] += r.uniform(-0.2, 0.2, 3)[:, None, None]
        truths = []
        for _ in range(r.integers(cfg.min_figures, cfg.max_figures + 1)):
            fh = cfg.figure_heights[r.integers(0, len(cfg.figure_heights))]
            fw = int(round(fh / 3))
            for _ in range(50):
                box = BBox(r.integers(0, cfg.width - fw + 1), r.integers(0, cfg.height - fh + 1), fw, fh)
                if all(iou(box, g.box) == 0.0 for g in truths):
                    break
            else:
                continue
            color = cfg.contrast * r.uniform(0.6, 1.0, 3)
            _draw_figure(image, box, color)
            truths.append(GroundTruth(box))
        # quantize like the on-disk 8-bit PPM so in-memory and reloaded datasets agree
        image = to_uint8(image).astype(np.float64) / 255.0
        entries.append(Entry(image, truths, f"img{n:04d}"))
    return Dataset(entries)


def synth_windows(num_windows: int, cfg: SynthConfig, window=WINDOW, bins: int = 6) -> list[Sample]:
    """Class-balanced window samples: one figure and one negative per synthetic image."""
    cfg = SynthConfig(**{**cfg.__dict__, "num_images": (num_windows + 1) // 2, "min_figures": 1, "max_figures": 1})
    ds = synth_generate(cfg)
    samples = sample_windows(ds, Rng(cfg.seed ^ 0x5A5A), 1, window, bins)
    return samples[:num_windows]
