"""Dense float64 tensor helpers: convolution, pooling, resizing, seeded RNG, BDLT files.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Convolutions are cross-correlations (no kernel flip); ``same`` padding
pads with zeros and requires odd kernels, placing the kernel center at offset
``k // 2``.
"""

from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Rng",
    "as_tensor",
    "conv2d",
    "conv2d_backward",
    "im2col",
    "meanpool2d",
    "meanpool2d_backward",
    "resize_bilinear",
    "read_bdlt",
    "write_bdlt",
]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class Rng:
    """SplitMix64 generator.

    The i-th output (1-based) for seed ``s`` is ``mix(s + i * 0x9E3779B97F4A7C15 mod 2**64)``
    with the standard SplitMix64 finalizer, so streams are identical on every
    platform and blocks of outputs can be produced with vectorized uint64 math.
    Doubles are ``(u >> 11) * 2**-53``, uniform on [0, 1).
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return z

    def random(self, size=None):
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if size is None:
            return float(u[0])
        return u.reshape(shape)

    def uniform(self, low: float, high: float, size=None):
        return low + (high - low) * self.random(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high); multiply-shift reduction of the double stream."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        span = high - low
        u = self.random(size)
        if size is None:
            return low + min(int(u * span), span - 1)
        return low + np.minimum((u * span).astype(np.int64), span - 1)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def spawn(self) -> "Rng":
        return Rng(int(self.next_u64(1)[0]))


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _patches(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    view = sliding_window_view(x, (oh, ow), axis=(1, 2))  # C, kh, kw, oh, ow
    return np.ascontiguousarray(view).reshape(c * kh * kw, oh * ow)


def _check_conv(x, kernels, padding):
    if x.ndim != 3 or kernels.ndim != 4:
        raise ValueError(f"conv2d expects input [C,H,W] and kernels [K,C,kh,kw], got {x.shape} and {kernels.shape}")
    k, c, kh, kw = kernels.shape
    if c != x.shape[0]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[0]}, kernels expect {c}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"same padding needs odd kernels, got {kh}x{kw}")
    elif padding == "valid":
        if kh > x.shape[1] or kw > x.shape[2]:
            raise ValueError(f"kernel {kh}x{kw} larger than input {x.shape[1]}x{x.shape[2]}")
    else:
        raise ValueError(f"unknown padding {padding!r}")


def _pad_same(x, kh, kw):
    return np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))


def im2col(x: np.ndarray, kh: int, kw: int, padding: str = "valid") -> np.ndarray:
    """Patch matrix (C*kh*kw, oh*ow) with rows ordered (c, dy, dx)."""
    return _patches(_pad_same(x, kh, kw) if padding == "same" else x, kh, kw)


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, padding: str = "valid", cols=None) -> np.ndarray:
    """Multi-channel 2-D cross-correlation: ``out[k] = sum_c corr(x[c], kernels[k, c]) + bias[k]``.

    ``cols`` may carry a precomputed :func:`im2col` of ``x`` for the same kernel size.
    """
    _check_conv(x, kernels, padding)
    k, c, kh, kw = kernels.shape
    if bias.shape != (k,):
        raise ValueError(f"bias shape {bias.shape} does not match {k} kernels")
    oh, ow = (x.shape[1], x.shape[2]) if padding == "same" else (x.shape[1] - kh + 1, x.shape[2] - kw + 1)
    if cols is None:
        cols = im2col(x, kh, kw, padding)
    out = kernels.reshape(k, -1) @ cols
    out += bias[:, None]
    return out.reshape(k, oh, ow)


@lru_cache(maxsize=64)
def _col2im_index(c: int, hp: int, wp: int, kh: int, kw: int) -> np.ndarray:
    """Flat input offset of every entry of the (C*kh*kw, oh*ow) patch matrix."""
    grid = np.arange(c * hp * wp).reshape(c, hp, wp)
    return _patches(grid, kh, kw).ravel()


def conv2d_backward(x, kernels, grad_out, padding="valid", need_input_grad=True, cols=None):
    """Adjoint of :func:`conv2d`.

    Returns ``(d_input, d_kernels, d_bias)``; ``d_input`` is None when
    ``need_input_grad`` is false.
    """
    k, c, kh, kw = kernels.shape
    if cols is None:
        cols = im2col(x, kh, kw, padding)
    g = grad_out.reshape(k, -1)
    d_kernels = (g @ cols.T).reshape(kernels.shape)
    d_bias = g.sum(axis=1)
    d_input = None
    if need_input_grad:
        # col2im: scatter-add the patch gradients back onto the (padded) input grid
        oh, ow = grad_out.shape[1:]
        ph, pw = (kh // 2, kw // 2) if padding == "same" else (0, 0)
        hp, wp = x.shape[1] + 2 * ph, x.shape[2] + 2 * pw
        d_cols = kernels.reshape(k, -1).T @ g
        flat = np.bincount(_col2im_index(c, hp, wp, kh, kw), weights=d_cols.ravel(), minlength=c * hp * wp)
        d_input = flat.reshape(c, hp, wp)[:, ph : ph + x.shape[1], pw : pw + x.shape[2]]
    return d_input, d_kernels, d_bias


def meanpool2d(x: np.ndarray, m: int) -> np.ndarray:
    """Sum over non-overlapping m x m blocks (scaling is left to the caller)."""
    c, h, w = x.shape
    if m < 1 or h % m or w % m:
        raise ValueError(f"pool size {m} does not divide {h}x{w}")
    return x.reshape(c, h // m, m, w // m, m).sum(axis=(2, 4))


def meanpool2d_backward(grad_out: np.ndarray, m: int) -> np.ndarray:
    return np.repeat(np.repeat(grad_out, m, axis=1), m, axis=2)


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a [C, H, W] tensor.

    Output pixel (i, j) samples source coordinate
    ``(i * (H-1)/(outH-1), j * (W-1)/(outW-1))``; a single output row or column
    samples the source center.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    fy = fy[:, None]
    rows = x[:, y0, :] * (1.0 - fy) + x[:, y1, :] * fy
    return rows[:, :, x0] * (1.0 - fx) + rows[:, :, x1] * fx


_BDLT_MAGIC = b"BDLT"
_BDLT_VERSION = 1


def write_bdlt(path, tensor: np.ndarray) -> None:
    t = as_tensor(tensor)
    header = _BDLT_MAGIC + struct.pack("<II", _BDLT_VERSION, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    Path(path).write_bytes(header + t.astype("<f8").tobytes())


def read_bdlt(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _BDLT_MAGIC:
        raise ValueError(f"{path}: not a BDLT file")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != _BDLT_VERSION:
        raise ValueError(f"{path}: unsupported BDLT version {version}")
    shape = struct.unpack_from(f"<{ndim}I", raw, 12)
    offset = 12 + 4 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: payload holds {(len(raw) - offset) // 8} values, shape {shape} needs {count}")
    return np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64).reshape(shape)
