"""The detection network: C2 convolution, S3 scaled block pooling, C4 filter bank, sigmoid unit.

Layer equations (S is the logistic sigmoid everywhere)::

    C2  x2 = S(conv_same(stack, W2) + b2)                 [K, H, W]
    S3  x3 = S(beta_k * blocksum_m(x2)_k + b3_k)          [K, H/m, W/m]
    C4  x4 = concat_i flatten(S(conv_valid(x3, W4_i) + b4_i))
    out y  = S(w5 . x4 + b5)

The C4 bank outputs are flattened row-major per bank entry and concatenated
in bank order. With the default geometry the bank yields 565 units.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bdl.numerics import Rng, conv2d, im2col, meanpool2d

FORMAT_VERSION = 1
DEFAULT_C4_BANK = ((15, 15, 4), (4, 15, 3), (1, 17, 7))


class ConfigError(ValueError):
    pass


class ModelFileError(ValueError):
    pass


class ModelVersionError(ModelFileError):
    pass


class ModelShapeError(ModelFileError):
    pass


class ModelFormatError(ModelFileError):
    pass


@dataclass(frozen=True)
class NetConfig:
    window: tuple[int, int] = (84, 28)
    in_channels: int = 10
    c2_num: int = 64
    c2_k: int = 9
    pool: int = 4
    c4_bank: tuple[tuple[int, int, int], ...] = DEFAULT_C4_BANK
    fc_out: int = 1

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(v) for v in self.window))
        object.__setattr__(self, "c4_bank", tuple(tuple(int(v) for v in e) for e in self.c4_bank))

    def validate(self) -> "NetConfig":
        h, w = self.window
        if min(h, w, self.in_channels, self.c2_num, self.c2_k, self.pool) < 1:
            raise ConfigError("window, channel counts, kernel size and pool size must be positive")
        if self.c2_k % 2 == 0:
            raise ConfigError(f"c2 kernel side must be odd for same padding, got {self.c2_k}")
        if h % self.pool or w % self.pool:
            raise ConfigError(f"pool size {self.pool} must divide the C2 map size {h}x{w}")
        if not self.c4_bank:
            raise ConfigError("c4 bank must contain at least one entry")
        ph, pw = self.pooled_shape
        for count, kh, kw in self.c4_bank:
            if count < 1 or kh < 1 or kw < 1:
                raise ConfigError(f"c4 bank entry {(count, kh, kw)} must be positive")
            if kh > ph or kw > pw:
                raise ConfigError(f"c4 kernel {kh}x{kw} does not fit the pooled {ph}x{pw} maps")
        if self.fc_out != 1:
            raise ConfigError("only a single sigmoid output unit is supported (fc_out = 1)")
        return self

    @property
    def pooled_shape(self) -> tuple[int, int]:
        return self.window[0] // self.pool, self.window[1] // self.pool

    @property
    def c4_output_shapes(self) -> list[tuple[int, int, int]]:
        ph, pw = self.pooled_shape
        return [(count, ph - kh + 1, pw - kw + 1) for count, kh, kw in self.c4_bank]

    @property
    def fc_inputs(self) -> int:
        return sum(c * h * w for c, h, w in self.c4_output_shapes)

    @property
    def c4_filters(self) -> int:
        return sum(e[0] for e in self.c4_bank)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        d["c4_bank"] = [list(e) for e in self.c4_bank]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d).validate()


def layout(config: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes, in canonical order."""
    k = config.c2_num
    out = [
        ("c2.w", (k, config.in_channels, config.c2_k, config.c2_k)),
        ("c2.b", (k,)),
        ("s3.beta", (k,)),
        ("s3.b", (k,)),
    ]
    for i, (count, kh, kw) in enumerate(config.c4_bank):
        out.append((f"c4.{i}.w", (count, k, kh, kw)))
        out.append((f"c4.{i}.b", (count,)))
    out.append(("fc.w", (config.fc_inputs,)))
    out.append(("fc.b", ()))
    return out


def param_count(config: NetConfig) -> dict[str, int]:
    config.validate()
    counts = {"c2": 0, "s3": 0, "c4": 0, "fc": 0}
    for name, shape in layout(config):
        counts[name.split(".")[0]] += math.prod(shape)
    counts["total"] = sum(counts.values())
    return counts


class Network:
    """Parameter set for a :class:`NetConfig`; ``params`` maps layout names to float64 arrays."""

    def __init__(self, config: NetConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def zeros(cls, config: NetConfig) -> "Network":
        config.validate()
        return cls(config, {name: np.zeros(shape) for name, shape in layout(config)})

    @classmethod
    def init(cls, config: NetConfig, rng: Rng) -> "Network":
        """Glorot-uniform weights, zero biases, pooling scale 1/m**2."""
        net = cls.zeros(config)
        p = net.params
        k2 = config.c2_k**2
        _glorot(p["c2.w"], config.in_channels * k2, config.c2_num * k2, rng)
        for i, (count, kh, kw) in enumerate(config.c4_bank):
            _glorot(p[f"c4.{i}.w"], config.c2_num * kh * kw, count * kh * kw, rng)
        _glorot(p["fc.w"], config.fc_inputs, 1, rng)
        p["s3.beta"][:] = 1.0 / config.pool**2
        return net

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()})

    def to_text(self) -> str:
        return model_text(self)

    def digest(self) -> str:
        return hashlib.sha256(model_text(self).encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(model_text(self))


def _glorot(out: np.ndarray, fan_in: int, fan_out: int, rng: Rng) -> None:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    out[...] = rng.uniform(-bound, bound, out.shape)


def sigmoid(u):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-u))


@dataclass
class ForwardTrace:
    x0: np.ndarray
    cols2: np.ndarray = None
    u2: np.ndarray = None
    x2: np.ndarray = None
    pooled: np.ndarray = None
    u3: np.ndarray = None
    x3: np.ndarray = None
    cols4: list = field(default_factory=list)
    u4: list = field(default_factory=list)
    x4: np.ndarray = None
    u5: float = None
    y: float = None


STAGES = ("c2", "s3", "c4", "fc")


def forward(net: Network, stack: np.ndarray):
    """Score one channel stack; returns ``(score, trace)``."""
    cfg = net.config
    expected = (cfg.in_channels,) + cfg.window
    if stack.shape != expected:
        raise ValueError(f"stack shape {stack.shape} does not match network input {expected}")
    trace = _run(net, ForwardTrace(x0=stack), 0)
    return trace.y, trace


def rerun(net: Network, trace: ForwardTrace, stage: str) -> ForwardTrace:
    """Recompute ``stage`` and everything after it, reusing earlier activations from ``trace``."""
    start = STAGES.index(stage)
    fresh = ForwardTrace(x0=trace.x0, cols2=trace.cols2)
    if start > 0:
        fresh.u2, fresh.x2 = trace.u2, trace.x2
    if start > 1:
        fresh.pooled, fresh.u3, fresh.x3, fresh.cols4 = trace.pooled, trace.u3, trace.x3, trace.cols4
    if start > 2:
        fresh.u4, fresh.x4 = trace.u4, trace.x4
    return _run(net, fresh, start)


def _run(net: Network, t: ForwardTrace, start: int) -> ForwardTrace:
    p, cfg = net.params, net.config
    if start <= 0:
        if t.cols2 is None:
            t.cols2 = im2col(t.x0, cfg.c2_k, cfg.c2_k, "same")
        t.u2 = conv2d(t.x0, p["c2.w"], p["c2.b"], "same", cols=t.cols2)
        t.x2 = sigmoid(t.u2)
    if start <= 1:
        t.pooled = meanpool2d(t.x2, cfg.pool)
        t.u3 = p["s3.beta"][:, None, None] * t.pooled + p["s3.b"][:, None, None]
        t.x3 = sigmoid(t.u3)
    if start <= 2:
        t.cols4 = [im2col(t.x3, kh, kw) for _, kh, kw in cfg.c4_bank]
        t.u4 = [
            conv2d(t.x3, p[f"c4.{i}.w"], p[f"c4.{i}.b"], "valid", cols=t.cols4[i]) for i in range(len(cfg.c4_bank))
        ]
        t.x4 = np.concatenate([sigmoid(u).ravel() for u in t.u4])
    t.u5 = float(p["fc.w"] @ t.x4 + p["fc.b"])
    t.y = float(sigmoid(t.u5))
    return t


def score(net: Network, stack: np.ndarray) -> float:
    return forward(net, stack)[0]


# -- model files ---------------------------------------------------------------


def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        raise ValueError("model parameters must be finite")
    s = format(v, ".17g")
    if not any(ch in s for ch in ".e"):
        s += ".0"
    return s


def _encode(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ",".join(json.dumps(k) + ":" + _encode(obj[k]) for k in sorted(obj)) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot encode {type(obj).__name__}")


def model_text(net: Network) -> str:
    """Canonical model file text: sorted keys, 17 significant digits, one layer per line."""
    head = {"config": net.config.to_dict(), "format_version": FORMAT_VERSION}
    lines = []
    for name, shape in layout(net.config):
        values = net.params[name]
        lines.append(_encode({"name": name, "shape": list(shape), "values": values.tolist()}))
    body = _encode(head)[:-1]
    return body + ',"layers":[\n' + ",\n".join(lines) + "\n]}\n"


def load(path) -> Network:
    return parse_model(Path(path).read_text())


def parse_model(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None
    if not isinstance(doc, dict) or not {"format_version", "config", "layers"} <= set(doc):
        raise ModelFormatError("model file must hold format_version, config and layers")
    if doc["format_version"] != FORMAT_VERSION:
        raise ModelVersionError(f"unsupported model format_version {doc['format_version']!r} (expected {FORMAT_VERSION})")
    try:
        config = NetConfig.from_dict(doc["config"])
    except (TypeError, ConfigError) as exc:
        raise ModelFormatError(f"invalid config in model file: {exc}") from None
    expected = layout(config)
    layers = doc["layers"]
    if not isinstance(layers, list) or len(layers) != len(expected):
        raise ModelFormatError(f"model file lists {len(layers)} layers, config needs {len(expected)}")
    params = {}
    for entry, (name, shape) in zip(layers, expected):
        if not isinstance(entry, dict) or entry.get("name") != name:
            raise ModelFormatError(f"expected layer {name!r}, found {entry.get('name') if isinstance(entry, dict) else entry!r}")
        if list(entry.get("shape", [])) != list(shape):
            raise ModelShapeError(f"layer {name}: declared shape {entry.get('shape')} does not match config shape {list(shape)}")
        try:
            values = np.array(entry["values"], dtype=np.float64)
        except (KeyError, ValueError, TypeError):
            raise ModelFormatError(f"layer {name}: values are missing or not numeric") from None
        if values.shape != shape:
            raise ModelShapeError(f"layer {name}: values have shape {list(values.shape)}, declared {list(shape)}")
        if not np.all(np.isfinite(values)):
            raise ModelFormatError(f"layer {name}: non-finite values")
        params[name] = values
    return Network(config, params)


def kernel_images(net: Network):
    """Yield ``(name, uint8 image)`` for every 2-D C2/C4 kernel slice, min-max scaled."""
    p = net.params
    sources = [("c2", p["c2.w"])] + [(f"c4.{i}", p[f"c4.{i}.w"]) for i in range(len(net.config.c4_bank))]
    for prefix, w in sources:
        for k in range(w.shape[0]):
            for c in range(w.shape[1]):
                s = w[k, c]
                lo, hi = s.min(), s.max()
                scaled = np.zeros_like(s) if hi <= lo else (s - lo) / (hi - lo)
                yield f"{prefix}_k{k:02d}_c{c:02d}", np.round(scaled * 255).astype(np.uint8)
