import json
import subprocess
import sys

import pytest

from bdl.cli import main
from bdl.config import ConfigError, RunConfig, parse_override

SMALL = ["--set", "net.c2_num=2", "--set", "net.c2_k=3"]


def run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(root), "--num-images", "4", "--seed", "3"]) == 0
    return root


def test_config_defaults_and_overrides(tmp_path):
    rc = RunConfig.load()
    assert rc.window == (84, 28) and rc.net_config().c2_num == 64 and rc.penalty_config().alpha_r == 0.8
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 3}, "penalty": {"alpha_w": 2.0}}))
    rc = RunConfig.load(cfg, [parse_override("train.epochs=5")])
    assert rc.train_config().epochs == 5 and rc.penalty_config().alpha_w == 2.0
    assert RunConfig.load(None, [parse_override("train.baseline=true")]).penalty_config() is None
    assert parse_override("penalty.mode=cumulative") == {"penalty": {"mode": "cumulative"}}


@pytest.mark.parametrize(
    "override",
    ["train.nope=1", "train.epochs=abc", "train.epochs=1.5", "net.c2_k=4", "penalty.alpha_r=2", "train.shuffle=1"],
)
def test_config_rejects_invalid(override):
    with pytest.raises(ConfigError):
        RunConfig.load(None, [parse_override(override)])
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{broken")
    code, _, err = run(["train", "--config", str(cfg), "--data", "x", "--model", "m"], capsys)
    assert code == 2 and err.count("\n") == 1 and "cannot read config" in err


def test_unknown_subcommand_and_flag(capsys):
    assert main(["frobnicate"]) != 0
    assert main(["eval", "--bogus"]) != 0
    assert "usage" in capsys.readouterr().err


def test_synth_is_deterministic(tmp_path, capsys):
    code, out1, _ = run(["synth", "--out", str(tmp_path / "a"), "--num-images", "2"], capsys)
    _, out2, _ = run(["synth", "--out", str(tmp_path / "b"), "--num-images", "2"], capsys)
    assert code == 0 and out1 == out2 and "digest=" in out1
    a = sorted(p.read_bytes() for p in (tmp_path / "a").rglob("*.*"))
    b = sorted(p.read_bytes() for p in (tmp_path / "b").rglob("*.*"))
    assert a == b


def test_extract_channels(tmp_path, tiny_data, capsys):
    code, out, _ = run(["extract-channels", str(tiny_data), "--out", str(tmp_path / "ch"), "--stride", "84"], capsys)
    files = sorted((tmp_path / "ch").glob("*.bdlt"))
    assert code == 0 and out == f"windows={len(files)}\n" and len(files) == 4 * 2


def test_train_neutral_vs_baseline_digest(tmp_path, tiny_data, capsys):
    common = ["train", "--data", str(tiny_data), "--epochs", "2", *SMALL]
    _, neutral, _ = run(common + ["--model", str(tmp_path / "n.json"), "--alpha-r", "1", "--alpha-w", "1"], capsys)
    _, base, _ = run(common + ["--model", str(tmp_path / "b.json"), "--baseline", "--report", str(tmp_path / "r.csv")], capsys)
    assert neutral.split()[0] == base.split()[0]
    assert (tmp_path / "n.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_mse,heldout_error" and len(lines) == 3
    _, bdl, _ = run(common + ["--model", str(tmp_path / "p.json"), "--alpha-w", "3"], capsys)
    assert "stability=" in bdl and "final_heldout_error=" in bdl


def test_detect_eval_and_dump(tmp_path, tiny_data, capsys):
    model = tmp_path / "m.json"
    assert main(["train", "--data", str(tiny_data), "--epochs", "1", "--model", str(model), *SMALL]) == 0
    dets = tmp_path / "d.txt"
    code, _, _ = run(["detect", "--model", str(model), "--images", str(tiny_data), "--out", str(dets),
                      "--set", "detect.stride=16", "--set", "detect.score_thresh=0.0"], capsys)
    assert code == 0
    lines = dets.read_text().splitlines()
    assert lines and all(len(line.split()) == 6 for line in lines)
    code, out, _ = run(["eval", "--detections", str(dets), "--annotations", str(tiny_data),
                        "--curve", str(tmp_path / "c.csv"), "--reference", str(tmp_path / "r.csv")], capsys)
    assert code == 0 and out.splitlines()[-1].startswith("LAMR=") and len(out.splitlines()) == 10
    code, out, _ = run(["dump-kernels", "--model", str(model), "--out", str(tmp_path / "k")], capsys)
    assert code == 0 and out == "kernels=60\n" and len(list((tmp_path / "k").glob("*.pgm"))) == 2 * 10 + 20 * 2


def test_eval_no_detections_gives_lamr_one(tmp_path, tiny_data, capsys):
    empty = tmp_path / "none.txt"
    empty.write_text("")
    code, out, _ = run(["eval", "--detections", str(empty), "--annotations", str(tiny_data),
                        "--set", "eval.reasonable=false"], capsys)
    assert code == 0 and out.splitlines()[-1] == "LAMR=1.000000"


def test_gradcheck_cli(capsys):
    code, out, _ = run(["gradcheck", "--samples", "40", *SMALL], capsys)
    assert code == 0 and out.splitlines()[-1].startswith("max_rel_error=")
    code, _, err = run(["gradcheck", "--samples", "40", "--tol", "0", *SMALL], capsys)
    assert code == 1 and "FAILED" in err


def test_stability_cli(tmp_path, capsys):
    code, out, _ = run(["stability", "--seeds", "1", "--out", str(tmp_path / "s.csv"),
                        "--set", "stability.n_train=6", "--set", "stability.n_heldout=4",
                        "--set", "stability.epochs=2", "--set", "stability.warmup=1",
                        "--set", "stability.c2_num=2"], capsys)
    assert code == 0
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "seed,variant,stability_score,final_error" and len(rows) == 3
    assert "bdl: median_stability=" in out


def test_missing_model_is_one_line_error(tmp_path, capsys):
    code, _, err = run(["dump-kernels", "--model", str(tmp_path / "missing.json"), "--out", str(tmp_path)], capsys)
    assert code == 2 and err.count("\n") == 1


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "bdl", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "stability" in r.stdout
