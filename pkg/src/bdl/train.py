"""Backpropagation with boosting-like output penalties, online SGD and a gradient checker.

The output sensitivity of a sample is ``S'(u) * (y - t) * alpha`` where alpha is
``alpha_r`` when the sample is currently classified correctly
(``|y - t| < 0.5``) and ``alpha_w`` otherwise. Passing ``penalty=None``
gives the plain squared-error sensitivity; with ``alpha_r == alpha_w == 1``
the two agree bit for bit.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from bdl.net import ForwardTrace, NetConfig, Network, forward, layout, rerun
from bdl.numerics import Rng, conv2d_backward, meanpool2d_backward

log = logging.getLogger(__name__)

WEIGHT_MIN, WEIGHT_MAX = 0.1, 10.0
DIVERGENCE_MSE = 1e6


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PenaltyConfig:
    alpha_r: float = 0.8
    alpha_w: float = 1.2
    mode: str = "stateless"
    threshold: float = 0.5

    def __post_init__(self):
        if not (self.alpha_r > 0 and self.alpha_w > 0):
            raise ValueError("penalty coefficients must be positive")
        if self.alpha_w < self.alpha_r:
            raise ValueError(f"alpha_w ({self.alpha_w}) must be >= alpha_r ({self.alpha_r})")
        if self.mode not in ("stateless", "cumulative"):
            raise ValueError(f"unknown penalty mode {self.mode!r}")
        if self.threshold != 0.5:
            raise ValueError("the correct/wrong threshold is fixed at 0.5")


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.05
    epochs: int = 10
    seed: int = 0
    penalty: PenaltyConfig | None = field(default_factory=PenaltyConfig)
    shuffle: bool = True
    warmup: int = 10

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.warmup < 1:
            raise ValueError("warmup must be at least 1")


@dataclass
class Sample:
    stack: np.ndarray
    target: float
    weight: float = 1.0

    def __post_init__(self):
        if self.target not in (0, 1):
            raise ValueError(f"target must be 0 or 1, got {self.target}")
        self.target = float(self.target)


@dataclass
class TrainReport:
    train_mse: list = field(default_factory=list)
    heldout_error: list = field(default_factory=list)
    warmup: int = 10

    @property
    def stability(self) -> float:
        """Population std of held-out error over epochs ``warmup..end`` (1-based, inclusive)."""
        start = min(self.warmup, len(self.heldout_error)) - 1
        return float(np.std(self.heldout_error[start:]))

    @property
    def final_error(self) -> float:
        return self.heldout_error[-1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "heldout_error"])
            for i, (mse, err) in enumerate(zip(self.train_mse, self.heldout_error), 1):
                w.writerow([i, f"{mse:.6f}", f"{err:.6f}"])


def loss(output: float, target: float) -> float:
    return 0.5 * (target - output) ** 2


def select_alpha(output: float, target: float, penalty: PenaltyConfig) -> float:
    return penalty.alpha_r if abs(output - target) < penalty.threshold else penalty.alpha_w


def output_delta(output: float, target: float, penalty: PenaltyConfig | None = None, weight: float = 1.0) -> float:
    """Output-layer sensitivity ``y(1-y)(y-t)``, scaled by the selected penalty and sample weight."""
    delta = output * (1.0 - output) * (output - target)
    if penalty is None:
        return delta
    delta = delta * select_alpha(output, target, penalty)
    if penalty.mode == "cumulative":
        delta = delta * weight
    return delta


def backward(net: Network, trace: ForwardTrace, delta_out: float) -> dict[str, np.ndarray]:
    """Gradients of the (penalized) loss for every parameter, keyed like ``net.params``."""
    p, cfg = net.params, net.config
    if trace.x4 is None or trace.x4.shape != p["fc.w"].shape or trace.x0.shape != (cfg.in_channels,) + cfg.window:
        raise ValueError("forward trace does not belong to this network")
    g = {"fc.w": trace.x4 * delta_out, "fc.b": np.array(delta_out)}

    d4 = p["fc.w"] * delta_out * trace.x4 * (1.0 - trace.x4)
    dx3 = np.zeros_like(trace.x3)
    offset = 0
    for i, shape in enumerate(cfg.c4_output_shapes):
        n = math.prod(shape)
        dx, g[f"c4.{i}.w"], g[f"c4.{i}.b"] = conv2d_backward(
            trace.x3, p[f"c4.{i}.w"], d4[offset : offset + n].reshape(shape), "valid", cols=trace.cols4[i]
        )
        dx3 += dx
        offset += n

    d3 = dx3 * trace.x3 * (1.0 - trace.x3)
    g["s3.beta"] = (d3 * trace.pooled).sum(axis=(1, 2))
    g["s3.b"] = d3.sum(axis=(1, 2))
    dx2 = meanpool2d_backward(d3 * p["s3.beta"][:, None, None], cfg.pool)
    d2 = dx2 * trace.x2 * (1.0 - trace.x2)
    _, g["c2.w"], g["c2.b"] = conv2d_backward(
        trace.x0, p["c2.w"], d2, "same", need_input_grad=False, cols=trace.cols2
    )
    return g


def sgd_step(net: Network, grads: dict[str, np.ndarray], eta: float) -> Network:
    """In-place delta rule ``w <- w - eta * dE/dw``; returns ``net``."""
    for name, g in grads.items():
        net.params[name] -= eta * g
    return net


def heldout_error(net: Network, samples) -> float:
    wrong = sum((forward(net, s.stack)[0] >= 0.5) != (s.target == 1.0) for s in samples)
    return wrong / len(samples)


def _renormalize(weights: np.ndarray) -> np.ndarray:
    w = np.clip(weights, WEIGHT_MIN, WEIGHT_MAX)
    for _ in range(100):
        w = np.clip(w / w.mean(), WEIGHT_MIN, WEIGHT_MAX)
        if abs(w.mean() - 1.0) < 1e-12:
            break
    return w


def train(net: Network, train_set, heldout, cfg: TrainConfig) -> tuple[Network, TrainReport]:
    """Online SGD over ``train_set``; the input network is left untouched."""
    if not train_set or not heldout:
        raise ValueError("training and held-out sets must be nonempty")
    net = net.copy()
    rng = Rng(cfg.seed)
    penalty = cfg.penalty
    cumulative = penalty is not None and penalty.mode == "cumulative"
    weights = np.array([s.weight for s in train_set], dtype=np.float64) if cumulative else None
    report = TrainReport(warmup=cfg.warmup)
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        sq = 0.0
        for i in order:
            s = train_set[i]
            y, trace = forward(net, s.stack)
            sq += (s.target - y) ** 2
            if cumulative:
                delta = output_delta(y, s.target, penalty, weights[i])
                weights[i] = min(max(weights[i] * select_alpha(y, s.target, penalty), WEIGHT_MIN), WEIGHT_MAX)
            else:
                delta = output_delta(y, s.target, penalty)
            sgd_step(net, backward(net, trace, delta), cfg.eta)
        mse = sq / n
        if not math.isfinite(mse) or mse > DIVERGENCE_MSE:
            raise TrainingDiverged(f"epoch {epoch}: training MSE {mse} exceeds {DIVERGENCE_MSE:g}")
        if cumulative:
            weights = _renormalize(weights)
            for s, w in zip(train_set, weights):
                s.weight = float(w)
        report.train_mse.append(mse)
        report.heldout_error.append(heldout_error(net, heldout))
        log.info("epoch %d: train_mse=%.6f heldout_error=%.6f", epoch, mse, report.heldout_error[-1])
    return net, report


# -- gradient checking ----------------------------------------------------------

GRAD_STEP = 1e-6
# central differences with step 1e-6 carry ~1e-10 absolute rounding noise; below this
# gradient magnitude the comparison is absolute (error / floor) rather than relative
GRAD_NOISE_FLOOR = 1e-5


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_layer: dict
    checked: int

    def __str__(self):
        return f"max_rel_error={self.max_rel_error:.6e} checked={self.checked}"


def relative_error(analytic: float, numeric: float, floor: float = GRAD_NOISE_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _stage_of(name: str) -> str:
    return name.split(".")[0]


def gradient_check(
    config: NetConfig,
    rng: Rng,
    n_params_sampled: int = 500,
    penalty: PenaltyConfig | None = None,
    target: float | None = None,
    backward_fn=backward,
    step: float = GRAD_STEP,
) -> GradCheckReport:
    """Compare analytic gradients with central differences of the penalized loss.

    Every FC and S3 parameter is checked, plus ``n_params_sampled`` C2/C4
    parameters drawn uniformly (half from C2, half from the C4 bank). The
    oracle scales the loss by the penalty selected at the unperturbed point.
    """
    net = Network.init(config, rng)
    p = net.params
    p["c2.b"][:] = rng.uniform(-0.1, 0.1, p["c2.b"].shape)
    p["s3.b"][:] = rng.uniform(-0.5, 0.5, p["s3.b"].shape)
    p["s3.beta"][:] = rng.uniform(0.5, 1.5, p["s3.beta"].shape) / config.pool**2
    for name in p:
        if name.startswith("c4.") and name.endswith(".b"):
            p[name][:] = rng.uniform(-0.1, 0.1, p[name].shape)
    p["fc.b"][...] = rng.uniform(-0.1, 0.1)
    stack = rng.uniform(-2.0, 2.0, (config.in_channels,) + config.window)
    if target is None:
        target = float(rng.integers(0, 2))

    y, trace = forward(net, stack)
    scale = 1.0 if penalty is None else select_alpha(y, target, penalty)
    grads = backward_fn(net, trace, output_delta(y, target, penalty))

    def penalized_loss(stage):
        return scale * loss(rerun(net, trace, stage).y, target)

    picks = []
    for name, shape in layout(config):
        if _stage_of(name) in ("fc", "s3"):
            picks += [(name, idx) for idx in np.ndindex(shape)]
    for group, count in (("c2", n_params_sampled // 2), ("c4", n_params_sampled - n_params_sampled // 2)):
        names = [(n, s) for n, s in layout(config) if _stage_of(n) == group]
        sizes = np.array([math.prod(s) for _, s in names])
        flat = rng.integers(0, int(sizes.sum()), count)
        bounds = np.cumsum(sizes)
        for f in flat:
            j = int(np.searchsorted(bounds, f, side="right"))
            local = int(f - (bounds[j - 1] if j else 0))
            picks.append((names[j][0], np.unravel_index(local, names[j][1])))

    per_layer: dict[str, float] = {}
    for name, idx in picks:
        arr, stage = p[name], _stage_of(name)
        orig = arr[idx]
        arr[idx] = orig + step
        up = penalized_loss(stage)
        arr[idx] = orig - step
        down = penalized_loss(stage)
        arr[idx] = orig
        numeric = (up - down) / (2.0 * step)
        err = relative_error(float(grads[name][idx]), numeric)
        per_layer[name] = max(per_layer.get(name, 0.0), err)
    return GradCheckReport(max(per_layer.values()), per_layer, len(picks))

