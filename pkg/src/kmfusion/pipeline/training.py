"""Training and evaluation loops."""

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import tensor as T
from ..model import load_checkpoint, save_checkpoint
from ..objective import LossConfig, MetricReport, combined_loss, metrics
from .data import augment, parse_ratio, split, stack
from .optim import Adam, cosine_lr

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "split") + MetricReport.FIELDS + ("loss", "lr")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    epochs: int = 400
    base_lr: float = 1e-4
    min_lr: float = 1e-5
    batch_size: int = 4
    split_ratio: str = "4:1"
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True
    seed: int = 0
    out_dir: str = "runs/default"
    csv_name: str = "metrics.csv"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.min_lr <= self.base_lr:
            raise ValueError("need 0 < min_lr <= base_lr")
        parse_ratio(self.split_ratio)

    @property
    def augment(self):
        return self.hflip or self.vflip or self.rotate

    @property
    def csv_path(self):
        return os.path.join(self.out_dir, self.csv_name)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    rows: list
    best_iou: float
    best_epoch: int
    best_path: str
    final_path: str
    csv_path: str

    @property
    def losses(self):
        """Eval-mode loss on the reported split, one per epoch (the CSV column)."""
        return [r["loss"] for r in self.rows]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _forward_eval(model, samples, batch_size, loss_cfg=None):
    # eval-mode pass; returns probabilities and, with loss_cfg, the mean loss per image
    dtype = T.DTYPES[model.config.precision]
    was_training = model.training
    model.eval()
    out, total = [], 0.0
    try:
        with T.no_grad():
            for i in range(0, len(samples), batch_size):
                x, z = stack(samples[i:i + batch_size], dtype)
                logits = model(T.Tensor(x))
                if loss_cfg is not None:
                    total += float(combined_loss(loss_cfg, logits, z).data) * len(x)
                out.append(T.sigmoid(logits).data)
    finally:
        model.train(was_training)
    probs = np.concatenate(out) if out else np.zeros((0, 1, 0, 0))
    return probs, total / max(len(samples), 1)


def predict(model, samples, batch_size=8):
    """Foreground probabilities (N, 1, H, W) in eval mode."""
    return _forward_eval(model, samples, batch_size)[0]


def evaluate_model(model, samples, batch_size=8):
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict(model, samples, batch_size)
    _, z = stack(samples, probs.dtype)
    return metrics(probs, z)


def _report(model, samples, loss_cfg, batch_size=8):
    probs, loss = _forward_eval(model, samples, batch_size, loss_cfg)
    _, z = stack(samples, probs.dtype)
    return metrics(probs, z), loss


def evaluate(checkpoint, dataset, batch_size=8):
    """Load a checkpoint (validated against its embedded config) and score it."""
    model, _ = load_checkpoint(checkpoint)
    return evaluate_model(model, dataset, batch_size)


def train(model, cfg, dataset, val=None):
    """Train ``model`` in place.

    Without ``val`` the dataset is split by ``cfg.split_ratio``; with it,
    ``dataset`` is used whole for training and ``val`` for the per-epoch
    report.  Returns a :class:`TrainResult`.
    """
    split_ss, shuffle_ss, aug_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    if val is None:
        train_set, val_set = split(dataset, cfg.split_ratio, np.random.default_rng(split_ss))
    else:
        train_set, val_set = list(dataset), list(val)
    if len(train_set) < cfg.batch_size:
        raise ValueError(f"training set ({len(train_set)}) is smaller than the batch size ({cfg.batch_size})")
    if not val_set:
        val_set = train_set
        log.warning("validation split is empty; reporting on the training split")
    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)
    dtype = T.DTYPES[model.config.precision]

    os.makedirs(cfg.out_dir, exist_ok=True)
    best_path = os.path.join(cfg.out_dir, "best.ckpt")
    final_path = os.path.join(cfg.out_dir, "final.ckpt")
    with open(cfg.csv_path, "w", newline="") as fp:
        csv.writer(fp).writerow(CSV_HEADER)

    opt = Adam(model.parameters(), lr=cfg.base_lr)
    rows = []
    best_iou, best_epoch = -math.inf, -1
    n_batches = math.ceil(len(train_set) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.min_lr)
        order = shuffle_rng.permutation(len(train_set))
        model.train()
        batch_losses = []
        for b in range(n_batches):
            batch = [train_set[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, aug_rng, cfg.hflip, cfg.vflip, cfg.rotate) for s in batch]
            x, z = stack(batch, dtype)
            loss = combined_loss(cfg.loss, model(T.Tensor(x)), z)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            model.zero_grad()
            loss.backward()
            opt.step(lr)
            batch_losses.append(value)
        report, val_loss = _report(model, val_set, cfg.loss)
        row = {"epoch": epoch, "split": "val", **report.as_dict(), "loss": val_loss, "lr": lr,
               "train_loss": float(np.mean(batch_losses))}
        rows.append(row)
        with open(cfg.csv_path, "a", newline="") as fp:
            csv.writer(fp).writerow([_fmt(row[k]) for k in CSV_HEADER])
        if report.iou > best_iou:
            best_iou, best_epoch = report.iou, epoch
            save_checkpoint(best_path, model, {"epoch": epoch, "val_iou": report.iou})
        log.info("epoch %d train loss %.5f val loss %.5f val iou %.4f lr %.3g (%.1fs)", epoch,
                 row["train_loss"], val_loss, report.iou, lr, time.perf_counter() - t0)
    save_checkpoint(final_path, model, {"epoch": cfg.epochs - 1, "val_iou": rows[-1]["iou"]})
    return TrainResult(rows, best_iou, best_epoch, best_path, final_path, cfg.csv_path)


def read_metrics_csv(path):
    with open(path, newline="") as fp:
        return list(csv.DictReader(fp))


__all__ = [
    "CSV_HEADER", "TrainConfig", "TrainResult", "TrainingDiverged", "train", "evaluate", "evaluate_model",
    "predict", "read_metrics_csv",
]
