import csv
import filecmp
import json
import os
import re

import numpy as np
import pytest
from PIL import Image

from kmfusion import model as M
from kmfusion.cli import run

TINY_JSON = os.path.join(os.path.dirname(M.__file__), "configs", "tiny.json")


def tree(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_synth_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["synth", "--n", "16", "--size", "64", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert len(a) == 32 and a == b


def test_complexity_matches_count_params(capsys):
    assert run(["complexity", "--config", TINY_JSON]) == 0
    out = capsys.readouterr().out
    params = int(re.search(r"params\s+(\d+)", out).group(1))
    macs = int(re.search(r"macs\s+(\d+)", out).group(1))
    model = M.build(M.ModelConfig.from_dict(json.load(open(TINY_JSON))["model"]))
    assert params == M.count_params(model)
    assert macs == M.count_flops(model, (1, 3, 64, 64))


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["train", "--out", "x", "--unknown-flag"],
        ["train", "--variant", "transformer", "--out", "x"],
        ["complexity", "--precision", "f16"],
        ["eval", "--data", "somewhere"],
        ["gradcheck", "--precision", "f32"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv) == 1
    assert "usage error" in capsys.readouterr().err


def test_bad_config_file_exit_1(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"model": {"conv_channels": [64, 32, 16]}}')
    assert run(["complexity", "--config", str(cfg)]) == 1
    cfg.write_text('{"optimizer": {}}')
    assert run(["complexity", "--config", str(cfg)]) == 1


def test_runtime_failure_exit_2(tmp_path, capsys):
    run(["synth", "--n", "2", "--size", "32", "--out", str(tmp_path / "d")])
    assert run(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path / "d")]) == 2
    assert "error" in capsys.readouterr().err


def test_train_eval_predict(tmp_path, capsys):
    data, out = str(tmp_path / "d"), str(tmp_path / "run")
    assert run(["synth", "--n", "8", "--size", "32", "--seed", "1", "--out", data]) == 0
    assert run(["train", "--config", TINY_JSON, "--data", data, "--size", "32", "--out", out, "--epochs", "1",
                "--seed", "2", "--variant", "mamba_mlp"]) == 0
    rows = list(csv.DictReader(open(os.path.join(out, "metrics.csv"))))
    assert len(rows) == 1
    ckpt = os.path.join(out, "best.ckpt")
    model, _ = M.load_checkpoint(ckpt)
    assert model.config.variant == "mamba_mlp"

    assert run(["eval", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path / "ev")]) == 0
    assert "iou" in capsys.readouterr().out
    header = open(tmp_path / "ev" / "eval.csv").readline().strip()
    assert header == "epoch,split,iou,f1,accuracy,auc,precision,recall"

    assert run(["predict", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path / "pred")]) == 0
    masks = sorted(os.listdir(tmp_path / "pred"))
    assert len(masks) == 8
    arr = np.asarray(Image.open(tmp_path / "pred" / masks[0]))
    assert arr.dtype == np.uint8 and set(np.unique(arr)) <= {0, 255}


def test_train_on_synthetic_without_data(tmp_path):
    assert run(["train", "--n", "4", "--size", "32", "--epochs", "1", "--out", str(tmp_path), "--overfit"]) == 0
    assert filecmp.cmp(tmp_path / "best.ckpt", tmp_path / "final.ckpt", shallow=False)


def test_gradcheck_command(capsys):
    assert run(["gradcheck", "--precision", "f64"]) == 0
    out = capsys.readouterr().out
    errors = [float(m) for m in re.findall(r"max rel err (\S+)", out)]
    assert len(errors) >= 14 and max(errors) < 1e-4
