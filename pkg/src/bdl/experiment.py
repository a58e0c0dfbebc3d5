"""Paired stability runs: boosting-like penalties versus plain backprop on synthetic windows."""

from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import dataclass, field, replace

from bdl.data import SynthConfig, synth_windows
from bdl.net import NetConfig, Network
from bdl.numerics import Rng
from bdl.train import PenaltyConfig, TrainConfig, TrainReport, train

log = logging.getLogger(__name__)

# desk-scale network: the C2 layer dominates the cost of an online step, so it is
# narrowed for the many-run stability comparison
DESK_NET = NetConfig(c2_num=6, c2_k=3)
# harder than the generator defaults so held-out error does not collapse to zero
DESK_SYNTH = SynthConfig(contrast=0.2, noise=0.3, clutter=6)


@dataclass(frozen=True)
class StabilityConfig:
    seeds: tuple = tuple(range(7))
    n_train: int = 400
    n_heldout: int = 200
    epochs: int = 40
    warmup: int = 10
    eta: float = 0.05
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    net: NetConfig = DESK_NET
    synth: SynthConfig = DESK_SYNTH
    bins: int = 6


@dataclass
class StabilityRun:
    seed: int
    variant: str
    report: TrainReport

    @property
    def stability(self) -> float:
        return self.report.stability

    @property
    def final_error(self) -> float:
        return self.report.final_error


def seed_data(cfg: StabilityConfig, seed: int):
    """Train and held-out windows for one seed (disjoint synthetic scenes)."""
    base = replace(cfg.synth, seed=seed * 2 + 1000)
    train_set = synth_windows(cfg.n_train, base, cfg.net.window, cfg.bins)
    heldout = synth_windows(cfg.n_heldout, replace(base, seed=seed * 2 + 1001), cfg.net.window, cfg.bins)
    return train_set, heldout


def run_stability(cfg: StabilityConfig = StabilityConfig()) -> list[StabilityRun]:
    runs = []
    for seed in cfg.seeds:
        train_set, heldout = seed_data(cfg, seed)
        net = Network.init(cfg.net, Rng(seed))
        for variant, penalty in (("bdl", cfg.penalty), ("baseline", None)):
            tcfg = TrainConfig(eta=cfg.eta, epochs=cfg.epochs, seed=seed, penalty=penalty, warmup=cfg.warmup)
            _, report = train(net, train_set, heldout, tcfg)
            runs.append(StabilityRun(seed, variant, report))
            log.info("seed %d %s: stability=%.6f final_error=%.6f", seed, variant, report.stability, report.final_error)
    return runs


def summarize(runs) -> dict[str, dict[str, float]]:
    out = {}
    for variant in ("bdl", "baseline"):
        sel = [r for r in runs if r.variant == variant]
        out[variant] = {
            "median_stability": statistics.median(r.stability for r in sel),
            "median_final_error": statistics.median(r.final_error for r in sel),
        }
    return out


def write_stability_csv(runs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "variant", "stability_score", "final_error"])
        for r in runs:
            w.writerow([r.seed, r.variant, f"{r.stability:.6f}", f"{r.final_error:.6f}"])
