"""Ten-plane channel stack: LUV color, gradient magnitude and six orientation channels.

Every plane is normalized per window to zero mean and unit (population)
variance. Gradients are taken on the L plane with central differences
``[-1, 0, 1] / 2`` and replicated borders; orientations are unsigned, folded
into [0, pi) and hard-assigned to equal-width bins, so the orientation planes
always sum exactly to the magnitude plane before normalization.
"""

from __future__ import annotations

import numpy as np

CHANNEL_NAMES = ("L", "U", "V", "|G|", "G1", "G2", "G3", "G4", "G5", "G6")
WINDOW = (84, 28)
ZERO_STD = 1e-12

# linear sRGB -> XYZ, D65
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# reference white taken as the image of RGB (1, 1, 1) so white maps to exactly (100, 0, 0)
_WHITE = _RGB_TO_XYZ.sum(axis=1)
_EPS = (6.0 / 29.0) ** 3
_KAPPA = (29.0 / 3.0) ** 3


def _uv_prime(x, y, z):
    denom = x + 15.0 * y + 3.0 * z
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, 4.0 * x / safe, 0.0), np.where(denom > 0, 9.0 * y / safe, 0.0)


_UN, _VN = (float(v) for v in _uv_prime(*_WHITE))


def rgb_to_luv(image: np.ndarray) -> np.ndarray:
    """CIE 1976 L*u*v* of an sRGB image [3, H, W] with components in [0, 1].

    sRGB values are linearized (``c/12.92`` below 0.04045, else
    ``((c+0.055)/1.055)**2.4``), mapped to XYZ, then
    ``L = 116 (Y/Yn)^(1/3) - 16`` (or ``(29/3)^3 Y/Yn`` in the linear toe),
    ``u = 13 L (u' - u'n)``, ``v = 13 L (v' - v'n)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected an RGB tensor [3,H,W], got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("RGB components must lie in [0, 1]")
    lin = np.where(image <= 0.04045, image / 12.92, ((image + 0.055) / 1.055) ** 2.4)
    x, y, z = np.tensordot(_RGB_TO_XYZ, lin, axes=1)
    yr = y / _WHITE[1]
    lum = np.where(yr > _EPS, 116.0 * np.cbrt(yr) - 16.0, _KAPPA * yr)
    up, vp = _uv_prime(x, y, z)
    return np.stack([lum, 13.0 * lum * (up - _UN), 13.0 * lum * (vp - _VN)])


def gradient_channels(gray: np.ndarray, bins: int = 6):
    """Gradient magnitude [H, W] and hard-binned orientation planes [bins, H, W]."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ValueError(f"gradient_channels needs a 2-D plane of at least 3x3, got {gray.shape}")
    p = np.pad(gray, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    mag = np.sqrt(gx * gx + gy * gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    idx = np.minimum((theta / (np.pi / bins)).astype(np.int64), bins - 1)
    orient = np.zeros((bins,) + gray.shape)
    np.put_along_axis(orient, idx[None], mag[None], axis=0)
    return mag, orient


def normalize_channel(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    std = c.std()
    if std < ZERO_STD:
        return np.zeros_like(c)
    return (c - c.mean()) / std


def raw_channels(image: np.ndarray, bins: int = 6) -> np.ndarray:
    """Unnormalized [3 + 1 + bins, H, W] stack in the order L, U, V, |G|, G1..."""
    luv = rgb_to_luv(image)
    mag, orient = gradient_channels(luv[0], bins)
    return np.concatenate([luv, mag[None], orient])


def extract_stack(image: np.ndarray, window=WINDOW, bins: int = 6) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape[1:] != tuple(window):
        raise ValueError(f"window must be {window[0]}x{window[1]}, got {image.shape[1]}x{image.shape[2]}")
    raw = raw_channels(image, bins)
    return np.stack([normalize_channel(c) for c in raw])
