"""Command-line entry point: ``kmfusion <command> [flags]``."""

import argparse
import csv
import json
import logging
import os
import sys
import time

from . import model as M
from .gradsuite import TOLERANCE, run_suite
from .kan import ConfigError
from .pipeline import (
    CSV_HEADER,
    TrainConfig,
    TrainingDiverged,
    evaluate_model,
    load_dataset,
    predict,
    synth_dataset,
    train,
    write_dataset,
    write_mask,
)
from .pipeline.data import DatasetError

log = logging.getLogger("kmfusion")

ABLATION_HEADER = ("variant", "params", "macs", "best_iou", "final_iou", "final_f1", "final_loss", "seconds")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, *names):
    opts = {
        "config": dict(help="JSON file with 'model' and 'train' sections"),
        "data": dict(help="dataset directory (images/, masks/)"),
        "out": dict(help="output directory"),
        "seed": dict(type=int, help="seed for every stochastic choice"),
        "epochs": dict(type=int),
        "variant": dict(choices=M.VARIANTS),
        "size": dict(type=int, help="square image size"),
        "precision": dict(choices=("f32", "f64")),
        "checkpoint": dict(help="checkpoint file"),
        "n": dict(type=int, help="number of synthetic samples"),
    }
    for name in names:
        p.add_argument(f"--{name}", **opts[name])


def make_parser():
    parser = _Parser(prog="kmfusion", description="KAN-Mamba fusion segmentation network")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic blob dataset")
    _common(p, "out", "n", "size", "seed")

    p = sub.add_parser("train", help="train a model")
    _common(p, "config", "data", "out", "seed", "epochs", "variant", "size", "precision", "n")
    p.add_argument("--overfit", action="store_true", help="train and report on the whole dataset")
    p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _common(p, "checkpoint", "data", "out", "size")

    p = sub.add_parser("predict", help="write predicted masks (0/255)")
    _common(p, "checkpoint", "data", "out", "size")

    p = sub.add_parser("gradcheck", help="run the layer-by-layer gradient check suite")
    _common(p, "precision", "seed")

    p = sub.add_parser("ablate", help="overfit the four variants on one dataset and compare")
    _common(p, "config", "data", "out", "seed", "epochs", "size", "precision", "n")
    p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("complexity", help="print parameter and MAC counts")
    _common(p, "config", "variant", "size")
    return parser


# -- configuration ---------------------------------------------------------

def load_config(path):
    if not path:
        return {}
    try:
        with open(path) as fp:
            cfg = json.load(fp)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    unknown = set(cfg) - {"model", "train", "data"}
    if unknown:
        raise UsageError(f"config {path}: unknown sections {sorted(unknown)}")
    return cfg


def model_config(args, cfg):
    d = dict(cfg.get("model", {}))
    for key in ("variant", "precision", "seed"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    try:
        return M.ModelConfig.from_dict(d)
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"invalid model config: {exc}") from None


def train_config(args, cfg, out):
    d = dict(cfg.get("train", {}))
    d["out_dir"] = out
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    if getattr(args, "no_augment", False):
        d.update(hflip=False, vflip=False, rotate=False)
    try:
        return TrainConfig.from_dict(d)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def data_settings(args, cfg):
    d = {"n": 32, "size": 64, "seed": 0, **cfg.get("data", {})}
    for key in ("n", "size", "seed"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    return d


def dataset(args, cfg):
    d = data_settings(args, cfg)
    if args.data:
        samples = load_dataset(args.data, d["size"])
        if not samples:
            raise DatasetError(f"no images found under {args.data}")
        return samples
    return synth_dataset(d["n"], d["size"], d["seed"])


def _require(args, *names):
    for name in names:
        if not getattr(args, name, None):
            raise UsageError(f"{args.command} needs --{name}")


# -- commands --------------------------------------------------------------

def cmd_synth(args):
    _require(args, "out")
    samples = synth_dataset(args.n or 16, args.size or 64, args.seed or 0)
    write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args):
    _require(args, "out")
    cfg = load_config(args.config)
    mcfg = model_config(args, cfg)
    tcfg = train_config(args, cfg, args.out)
    samples = dataset(args, cfg)
    model = M.build(mcfg)
    result = train(model, tcfg, samples, val=samples if args.overfit else None)
    last = result.rows[-1]
    print(f"best val iou {result.best_iou:.4f} at epoch {result.best_epoch}; final iou {last['iou']:.4f} loss {last['loss']:.5f}")
    print(f"metrics: {result.csv_path}")


def _load(args):
    _require(args, "checkpoint", "data")
    model, _ = M.load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data, args.size)
    if not samples:
        raise DatasetError(f"no images found under {args.data}")
    return model, samples


def cmd_eval(args):
    model, samples = _load(args)
    report = evaluate_model(model, samples)
    for k, v in report.as_dict().items():
        print(f"{k:10s} {v:.6f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval.csv")
        with open(path, "w", newline="") as fp:
            w = csv.writer(fp)
            w.writerow(CSV_HEADER[:-2])
            w.writerow(report.csv_row(0, "eval"))
        print(f"wrote {path}")


def cmd_predict(args):
    _require(args, "out")
    model, samples = _load(args)
    probs = predict(model, samples)
    os.makedirs(args.out, exist_ok=True)
    for s, p in zip(samples, probs):
        write_mask(os.path.join(args.out, s.id + ".png"), p >= 0.5)
    print(f"wrote {len(samples)} masks to {args.out}")


def cmd_gradcheck(args):
    if args.precision == "f32":
        raise UsageError("gradcheck runs at 64-bit only (--precision f64)")

    def report(name, err, secs):
        flag = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:28s} max rel err {err:.3e}  {flag}  ({secs:.1f}s)", flush=True)

    results = run_suite(seed=args.seed or 0, report=report)
    worst = max(results.values())
    print(f"worst {worst:.3e} (tolerance {TOLERANCE:g})")
    if worst >= TOLERANCE:
        raise RuntimeError("gradient check failed")


def run_ablation(samples, mcfg, tcfg, out, size):
    """Overfit every variant from the same seed; returns the comparison rows."""
    os.makedirs(out, exist_ok=True)
    rows = []
    for variant in M.VARIANTS:
        vcfg = mcfg.replace(variant=variant)
        model = M.build(vcfg)
        t0 = time.perf_counter()
        result = train(model, TrainConfig.from_dict({**tcfg.to_dict(), "out_dir": os.path.join(out, variant)}),
                       samples, val=samples)
        last = result.rows[-1]
        rows.append({
            "variant": variant,
            "params": M.count_params(model),
            "macs": M.count_flops(model, (1, vcfg.in_channels, size, size)),
            "best_iou": result.best_iou,
            "final_iou": last["iou"],
            "final_f1": last["f1"],
            "final_loss": last["loss"],
            "seconds": round(time.perf_counter() - t0, 1),
        })
        print(f"{variant:14s} best iou {result.best_iou:.4f} final loss {last['loss']:.5f}", flush=True)
    path = os.path.join(out, "ablation.csv")
    with open(path, "w", newline="") as fp:
        w = csv.DictWriter(fp, ABLATION_HEADER)
        w.writeheader()
        w.writerows(rows)
    return rows, path


def cmd_ablate(args):
    _require(args, "out")
    cfg = load_config(args.config)
    mcfg = model_config(args, cfg)
    tcfg = train_config(args, cfg, args.out)
    samples = dataset(args, cfg)
    _, path = run_ablation(samples, mcfg, tcfg, args.out, samples[0].image.shape[1])
    print(f"comparison: {path}")


def cmd_complexity(args):
    cfg = load_config(args.config)
    mcfg = model_config(args, cfg)
    size = args.size or data_settings(args, cfg)["size"]
    model = M.build(mcfg)
    params = M.count_params(model)
    macs = M.count_flops(model, (1, mcfg.in_channels, size, size))
    print(f"variant {mcfg.variant}")
    print(f"params  {params}")
    print(f"macs    {macs}  (input 1x{mcfg.in_channels}x{size}x{size})")
    print(f"gflops  {2 * macs / 1e9:.4f}")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "complexity": cmd_complexity,
}


def run(argv=None):
    """Run one command; returns 0 on success, 1 on usage errors, 2 on failures."""
    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    except (OSError, DatasetError, M.CheckpointError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
