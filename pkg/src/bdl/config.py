"""Run configuration: one JSON file with sections, every key validated, flags applied last."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from bdl.data import SynthConfig
from bdl.detect import DetectParams
from bdl.experiment import DESK_NET, DESK_SYNTH, StabilityConfig
from bdl.net import DEFAULT_C4_BANK, NetConfig
from bdl.train import PenaltyConfig, TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "window": [84, 28],
    "bins": 6,
    "net": {"c2_num": 64, "c2_k": 9, "pool": 4, "c4_bank": [list(e) for e in DEFAULT_C4_BANK]},
    "train": {
        "eta": 0.05,
        "epochs": 10,
        "seed": 0,
        "shuffle": True,
        "warmup": 10,
        "neg_per_image": 2,
        "heldout_fraction": 0.25,
        "baseline": False,
    },
    "penalty": {"alpha_r": 0.8, "alpha_w": 1.2, "mode": "stateless"},
    "detect": {"stride": 4, "scale_step": 1.2, "score_thresh": 0.5, "nms_iou": 0.5},
    "eval": {"iou": 0.5, "reasonable": True},
    "synth": {
        "num_images": 20,
        "height": 168,
        "width": 56,
        "min_figures": 0,
        "max_figures": 2,
        "figure_heights": [84, 112],
        "contrast": 0.35,
        "clutter": 4,
        "noise": 0.15,
        "seed": 0,
    },
    "stability": {
        "seeds": 7,
        "n_train": 400,
        "n_heldout": 200,
        "epochs": 40,
        "warmup": 10,
        "c2_num": DESK_NET.c2_num,
        "c2_k": DESK_NET.c2_k,
        "contrast": DESK_SYNTH.contrast,
        "noise": DESK_SYNTH.noise,
        "clutter": DESK_SYNTH.clutter,
    },
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a section")
            out[key] = _merge(base[key], value, path + ".")
        else:
            if isinstance(base[key], bool) != isinstance(value, bool):
                raise ConfigError(f"config key {path!r} has the wrong type")
            if isinstance(base[key], (int, float)) and not isinstance(value, (int, float)):
                raise ConfigError(f"config key {path!r} must be numeric")
            if isinstance(base[key], int) and not isinstance(base[key], bool) and isinstance(value, float):
                if not value.is_integer():
                    raise ConfigError(f"config key {path!r} must be an integer")
                value = int(value)
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        doc = DEFAULTS
        if path is not None:
            try:
                user = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            if not isinstance(user, dict):
                raise ConfigError("config file must hold a JSON object")
            doc = _merge(doc, user)
        for over in overrides:
            doc = _merge(doc, over)
        rc = cls(doc)
        rc.validate()
        return rc

    def validate(self) -> None:
        try:
            self.net_config().validate()
            self.train_config()
            self.detect_params()
            self.synth_config()
            self.stability_config()
            if not 0 < self.raw["train"]["heldout_fraction"] < 1:
                raise ValueError("train.heldout_fraction must lie in (0, 1)")
            if self.raw["train"]["neg_per_image"] < 0:
                raise ValueError("train.neg_per_image must be non-negative")
            if self.raw["bins"] < 1:
                raise ValueError("bins must be positive")
            if not 0 < self.raw["eval"]["iou"] <= 1:
                raise ValueError("eval.iou must lie in (0, 1]")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @property
    def window(self) -> tuple[int, int]:
        return tuple(self.raw["window"])

    @property
    def bins(self) -> int:
        return self.raw["bins"]

    def net_config(self) -> NetConfig:
        n = self.raw["net"]
        return NetConfig(
            window=self.window,
            in_channels=4 + self.bins,
            c2_num=n["c2_num"],
            c2_k=n["c2_k"],
            pool=n["pool"],
            c4_bank=n["c4_bank"],
        ).validate()

    def penalty_config(self) -> PenaltyConfig | None:
        if self.raw["train"]["baseline"]:
            return None
        return PenaltyConfig(**self.raw["penalty"])

    def train_config(self) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            eta=t["eta"],
            epochs=t["epochs"],
            seed=t["seed"],
            penalty=self.penalty_config(),
            shuffle=t["shuffle"],
            warmup=t["warmup"],
        )

    def detect_params(self) -> DetectParams:
        return DetectParams(**self.raw["detect"])

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.raw["synth"])

    def stability_config(self) -> StabilityConfig:
        s = self.raw["stability"]
        if s["seeds"] < 1:
            raise ValueError("stability.seeds must be at least 1")
        net = NetConfig(
            window=self.window,
            in_channels=4 + self.bins,
            c2_num=s["c2_num"],
            c2_k=s["c2_k"],
            pool=self.raw["net"]["pool"],
            c4_bank=self.raw["net"]["c4_bank"],
        ).validate()
        synth = SynthConfig(
            **{**self.raw["synth"], "contrast": s["contrast"], "noise": s["noise"], "clutter": s["clutter"]}
        )
        return StabilityConfig(
            seeds=tuple(range(s["seeds"])),
            n_train=s["n_train"],
            n_heldout=s["n_heldout"],
            epochs=s["epochs"],
            warmup=s["warmup"],
            eta=self.raw["train"]["eta"],
            penalty=PenaltyConfig(**self.raw["penalty"]),
            net=net,
            synth=synth,
            bins=self.bins,
        )
