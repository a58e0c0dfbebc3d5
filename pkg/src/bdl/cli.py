"""Command-line entry point: ``bdl <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from bdl import net as netmod
from bdl.channels import extract_stack
from bdl.config import ConfigError, RunConfig, parse_override
from bdl.data import DatasetError, Dataset, image_paths, load_dataset, load_truths, read_netpbm, sample_windows, synth_generate, write_pgm
from bdl.detect import detect, format_detections, parse_detections
from bdl.evaluate import evaluate
from bdl.experiment import run_stability, summarize, write_stability_csv
from bdl.numerics import Rng, write_bdlt
from bdl.train import TrainingDiverged, gradient_check, train

log = logging.getLogger("bdl")


def _config(args) -> RunConfig:
    overrides = [parse_override(s) for s in args.set]
    for flag, dotted in (
        ("seed", "train.seed"),
        ("epochs", "train.epochs"),
        ("alpha_r", "penalty.alpha_r"),
        ("alpha_w", "penalty.alpha_w"),
        ("mode", "penalty.mode"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            section, key = dotted.split(".")
            overrides.append({section: {key: value}})
    if getattr(args, "baseline", False):
        overrides.append({"train": {"baseline": True}})
    return RunConfig.load(args.config, overrides)


def cmd_synth(args) -> int:
    rc = _config(args)
    cfg = rc.synth_config()
    changes = {k: v for k, v in (("num_images", args.num_images), ("seed", args.synth_seed)) if v is not None}
    if changes:
        cfg = type(cfg)(**{**cfg.__dict__, **changes})
    ds = synth_generate(cfg)
    ds.save(args.out)
    print(f"images={len(ds)} truths={sum(len(e.truths) for e in ds)} digest={ds.digest()}")
    return 0


def cmd_extract_channels(args) -> int:
    rc = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wh, ww = rc.window
    stride = args.stride or rc.raw["detect"]["stride"]
    paths = []
    for p in map(Path, args.inputs):
        paths += image_paths(p) if p.is_dir() else [p]
    count = 0
    for path in paths:
        image = read_netpbm(path)
        _, h, w = image.shape
        for y in range(0, h - wh + 1, stride):
            for x in range(0, w - ww + 1, stride):
                stack = extract_stack(image[:, y : y + wh, x : x + ww], (wh, ww), rc.bins)
                write_bdlt(out / f"{path.stem}_y{y:04d}_x{x:04d}.bdlt", stack)
                count += 1
    print(f"windows={count}")
    return 0


def _split(samples, fraction: float, rng: Rng):
    order = rng.permutation(len(samples))
    n_held = max(1, int(round(len(samples) * fraction)))
    held = sorted(order[:n_held].tolist())
    rest = sorted(order[n_held:].tolist())
    return [samples[i] for i in rest], [samples[i] for i in held]


def cmd_train(args) -> int:
    rc = _config(args)
    t = rc.raw["train"]
    ds = load_dataset(args.data)
    samples = sample_windows(ds, Rng(t["seed"]), t["neg_per_image"], rc.window, rc.bins)
    if args.heldout:
        train_set = samples
        heldout = sample_windows(load_dataset(args.heldout), Rng(t["seed"] + 1), t["neg_per_image"], rc.window, rc.bins)
    else:
        train_set, heldout = _split(samples, t["heldout_fraction"], Rng(t["seed"] + 1))
    net = netmod.Network.init(rc.net_config(), Rng(t["seed"]))
    net, report = train(net, train_set, heldout, rc.train_config())
    net.save(args.model)
    if args.report:
        report.write_csv(args.report)
    print(
        f"digest={net.digest()} train_samples={len(train_set)} heldout_samples={len(heldout)} "
        f"final_heldout_error={report.final_error:.6f} stability={report.stability:.6f}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    rc = _config(args)
    penalty = rc.penalty_config()
    worst = 0.0
    for seed in range(args.seeds):
        r = gradient_check(rc.net_config(), Rng(seed), args.samples, penalty=penalty)
        worst = max(worst, r.max_rel_error)
        print(f"seed={seed} checked={r.checked} max_rel_error={r.max_rel_error:.6e}")
    print(f"max_rel_error={worst:.6e}")
    if worst > args.tol:
        print(f"gradient check FAILED: {worst:.6e} > {args.tol:g}", file=sys.stderr)
        return 1
    return 0


def cmd_detect(args) -> int:
    rc = _config(args)
    model = netmod.load(args.model)
    src = Path(args.images)
    paths = image_paths(src) if src.is_dir() else [src]
    params = rc.detect_params()
    with open(args.out, "w") as fh:
        for path in paths:
            fh.write(format_detections(path.stem, detect(read_netpbm(path), model, params, rc.bins)))
    print(f"images={len(paths)} detections_file={args.out}")
    return 0


def cmd_eval(args) -> int:
    rc = _config(args)
    dets: dict = {}
    for path in args.detections:
        for stem, items in parse_detections(Path(path).read_text(), path).items():
            dets.setdefault(stem, []).extend(items)
    truths = load_truths(args.annotations)
    ev = rc.raw["eval"]
    result = evaluate(dets, truths, ev["iou"], ev["reasonable"])
    if args.curve:
        result.write_csv(args.curve)
    if args.reference:
        result.write_reference_csv(args.reference)
    for f, mr in result.reference:
        print(f"fppi={f:.6f} miss_rate={mr:.6f}")
    print(f"LAMR={result.lamr:.6f}")
    return 0


def cmd_dump_kernels(args) -> int:
    model = netmod.load(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for name, img in netmod.kernel_images(model):
        write_pgm(out / f"{name}.pgm", img)
        count += 1
    print(f"kernels={count}")
    return 0


def cmd_stability(args) -> int:
    rc = _config(args)
    cfg = rc.stability_config()
    if args.seeds is not None:
        cfg = type(cfg)(**{**cfg.__dict__, "seeds": tuple(range(args.seeds))})
    runs = run_stability(cfg)
    if args.out:
        write_stability_csv(runs, args.out)
    for r in runs:
        print(f"seed={r.seed} variant={r.variant} stability_score={r.stability:.6f} final_error={r.final_error:.6f}")
    for variant, s in summarize(runs).items():
        print(f"{variant}: median_stability={s['median_stability']:.6f} median_final_error={s['median_final_error']:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bdl", description="Boosting-like deep learning pedestrian detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int)
    p.add_argument("--seed", dest="synth_seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract-channels", parents=[common], help="dump window channel stacks as BDLT files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_extract_channels)

    p = sub.add_parser("train", parents=[common], help="train a network on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--heldout")
    p.add_argument("--model", required=True)
    p.add_argument("--report")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha-r", type=float)
    p.add_argument("--alpha-w", type=float)
    p.add_argument("--mode", choices=["stateless", "cumulative"])
    p.add_argument("--baseline", action="store_true", help="plain backprop, no penalty coefficients")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", parents=[common], help="compare analytic and numeric gradients")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--alpha-r", type=float)
    p.add_argument("--alpha-w", type=float)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("detect", parents=[common], help="run the detector over images")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common], help="miss rate vs FPPI and LAMR")
    p.add_argument("--detections", nargs="+", required=True)
    p.add_argument("--annotations", required=True, help="dataset root with images/ and annotations/")
    p.add_argument("--curve")
    p.add_argument("--reference")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-kernels", parents=[common], help="write C2/C4 kernels as PGM images")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_kernels)

    p = sub.add_parser("stability", parents=[common], help="paired BDL vs baseline stability runs")
    p.add_argument("--seeds", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stability)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, netmod.ModelFileError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"bdl {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
