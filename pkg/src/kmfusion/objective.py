"""Segmentation losses and evaluation metrics."""

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import DimensionError


@dataclass(frozen=True)
class LossConfig:
    bce_weight: float = 0.5
    dice_weight: float = 0.5
    dice_smooth: float = 1e-5
    prob_clip: float = 1e-7

    def __post_init__(self):
        if self.bce_weight < 0 or self.dice_weight < 0 or self.bce_weight + self.dice_weight == 0:
            raise ValueError("loss weights must be >= 0 and not both zero")
        if self.dice_smooth <= 0:
            raise ValueError("dice smoothing constant must be positive")


def _target(z, like):
    arr = z.data if isinstance(z, T.Tensor) else np.asarray(z)
    if arr.shape != like.shape:
        raise DimensionError(f"prediction {like.shape} and mask {arr.shape} differ in shape")
    return arr.astype(like.data.dtype, copy=False)


def bce_loss(logits, z, eps=1e-7):
    """Mean pixel-wise binary cross-entropy of sigmoid(logits) against z."""
    return T.bce_with_logits(logits, _target(z, logits), eps)


def dice_loss(probs, z, smooth=1e-5):
    """1 - (2 sum(p z) + c) / (sum p + sum z + c), one global sum over the batch."""
    zt = T.Tensor(_target(z, probs))
    inter = T.sum_(probs * zt)
    total = T.sum_(probs) + float(zt.data.sum())
    return 1.0 - (2.0 * inter + smooth) / (total + smooth)


def combined_loss(cfg, logits, z):
    cfg = cfg or LossConfig()
    terms = []
    if cfg.bce_weight:
        terms.append(bce_loss(logits, z, cfg.prob_clip) * cfg.bce_weight)
    if cfg.dice_weight:
        terms.append(dice_loss(T.sigmoid(logits), z, cfg.dice_smooth) * cfg.dice_weight)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


@dataclass
class MetricReport:
    iou: float
    f1: float
    accuracy: float
    auc: float
    precision: float
    recall: float

    FIELDS = ("iou", "f1", "accuracy", "auc", "precision", "recall")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def csv_row(self, epoch, split):
        return [epoch, split] + [f"{getattr(self, k):.10g}" for k in self.FIELDS]


def _confusion(pred, truth):
    tp = np.count_nonzero(pred & truth)
    fp = np.count_nonzero(pred & ~truth)
    fn = np.count_nonzero(~pred & truth)
    tn = pred.size - tp - fp - fn
    return tp, fp, fn, tn


def auc_score(probs, truth, n_thresholds=256):
    """Trapezoidal ROC area over evenly spaced thresholds in [0, 1].

    Returns 0.5 when the truth holds a single class (ROC undefined).
    """
    probs = np.asarray(probs, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel().astype(bool)
    pos = np.count_nonzero(truth)
    neg = truth.size - pos
    if pos == 0 or neg == 0:
        return 0.5
    thresholds = np.linspace(0.0, 1.0, n_thresholds)
    # counts of scores >= each threshold, via sorted search
    ps = np.sort(probs[truth])
    ns = np.sort(probs[~truth])
    tpr = (pos - np.searchsorted(ps, thresholds, side="left")) / pos
    fpr = (neg - np.searchsorted(ns, thresholds, side="left")) / neg
    fpr = np.concatenate([[1.0], fpr, [0.0]])
    tpr = np.concatenate([[1.0], tpr, [0.0]])
    # thresholds ascend, so fpr descends
    return float(np.sum((fpr[:-1] - fpr[1:]) * (tpr[:-1] + tpr[1:]) / 2.0))


def image_metrics(probs, truth, threshold=0.5):
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    pred = probs >= threshold
    tp, fp, fn, tn = _confusion(pred, truth)
    union = tp + fp + fn
    iou = tp / union if union else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn) if union else 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    accuracy = (tp + tn) / pred.size
    return MetricReport(iou, f1, accuracy, auc_score(probs, truth), precision, recall)


def metrics(probs, z, threshold=0.5):
    """Per-image metrics averaged over the batch (first axis)."""
    p = probs.data if isinstance(probs, T.Tensor) else np.asarray(probs)
    t = z.data if isinstance(z, T.Tensor) else np.asarray(z)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and mask {t.shape} differ in shape")
    if p.ndim < 2:
        return image_metrics(p, t, threshold)
    reports = [image_metrics(p[i], t[i], threshold) for i in range(p.shape[0])]
    return mean_report(reports)


def mean_report(reports):
    reports = list(reports)
    return MetricReport(*[float(np.mean([getattr(r, k) for r in reports])) for k in MetricReport.FIELDS])
