import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kmfusion import tensor as T
from kmfusion.objective import (
    LossConfig,
    MetricReport,
    auc_score,
    bce_loss,
    combined_loss,
    dice_loss,
    image_metrics,
    metrics,
)
from kmfusion.tensor import DimensionError, Tensor


def test_dice_perfect_prediction_is_zero(rng):
    z = (rng.random((3, 1, 8, 8)) < 0.4).astype(np.float64)
    assert dice_loss(Tensor(z), z).data == 0.0


def test_dice_by_hand():
    p = np.array([0.9, 0.2, 0.6, 0.0])
    z = np.array([1.0, 0.0, 1.0, 1.0])
    want = 1 - (2 * 1.5 + 1e-5) / (1.7 + 3 + 1e-5)
    assert dice_loss(Tensor(p), z).data == pytest.approx(want, abs=1e-15)


def test_bce_at_half_is_ln2():
    z = np.array([[0.0, 1.0], [1.0, 1.0]])
    assert abs(float(bce_loss(Tensor(np.zeros((2, 2))), z).data) - math.log(2)) < 1e-9


def test_bce_by_hand():
    logits = np.array([2.0, -1.0, 0.5])
    z = np.array([1.0, 0.0, 0.0])
    p = 1 / (1 + np.exp(-logits))
    want = -np.mean(z * np.log(p) + (1 - z) * np.log(1 - p))
    assert float(bce_loss(Tensor(logits), z).data) == pytest.approx(want, abs=1e-12)


def test_bce_clipping_bounds_perfect_prediction():
    z = np.array([0.0, 1.0, 1.0])
    logits = np.array([-100.0, 100.0, 60.0])
    loss = float(bce_loss(Tensor(logits), z, 1e-7).data)
    assert 0 < loss <= -math.log(1 - 1e-7) + 1e-15


def test_combined_weights(rng):
    logits = Tensor(rng.standard_normal((2, 1, 4, 4)))
    z = (rng.random((2, 1, 4, 4)) < 0.5).astype(np.float64)
    b = float(bce_loss(logits, z).data)
    d = float(dice_loss(T.sigmoid(logits), z).data)
    assert float(combined_loss(LossConfig(), logits, z).data) == pytest.approx(0.5 * b + 0.5 * d, abs=1e-14)
    assert float(combined_loss(LossConfig(1.0, 0.0), logits, z).data) == pytest.approx(b, abs=1e-14)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(0.0, 0.0)
    with pytest.raises(ValueError):
        LossConfig(dice_smooth=0.0)


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        bce_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


def test_hand_confusion_case():
    r = metrics(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    assert r.iou == pytest.approx(0.5, abs=1e-12)
    assert r.f1 == pytest.approx(0.6667, abs=1e-4)
    assert r.precision == 1.0 and r.recall == 0.5 and r.accuracy == 0.5


@given(st.integers(0, 2**32 - 1))
def test_f1_iou_identity(seed):
    rng = np.random.default_rng(seed)
    pred = rng.random(64) < rng.random()
    truth = rng.random(64) < rng.random()
    r = image_metrics(pred.astype(float), truth)
    assert abs(r.f1 - 2 * r.iou / (1 + r.iou)) < 1e-12


def test_empty_masks():
    r = image_metrics(np.zeros(10), np.zeros(10))
    assert r.iou == 1.0 and r.f1 == 1.0 and r.accuracy == 1.0 and r.auc == 0.5


def rank_auc(scores, truth):
    """Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos, neg = scores[truth], scores[~truth]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_matches_rank_statistic_on_grid(rng):
    # scores on the threshold grid make the thresholded curve exact
    grid = np.linspace(0, 1, 256)
    scores = rng.choice(grid, 300)
    truth = rng.random(300) < 0.3 + 0.4 * scores
    assert auc_score(scores, truth) == pytest.approx(rank_auc(scores, truth), abs=1e-12)


def test_auc_extremes():
    truth = np.array([0, 0, 1, 1], bool)
    assert auc_score(np.array([0.1, 0.2, 0.8, 0.9]), truth) == pytest.approx(1.0)
    assert auc_score(np.array([0.9, 0.8, 0.2, 0.1]), truth) == pytest.approx(0.0)


def test_batch_metrics_average_per_image():
    p = np.array([[1.0, 0.0], [1.0, 1.0]])
    z = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert metrics(p, z).iou == pytest.approx(0.75)


def test_report_csv_row():
    r = MetricReport(0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    assert r.csv_row(3, "val")[:3] == [3, "val", "0.5"]
    assert list(r.as_dict()) == list(MetricReport.FIELDS)


@given(arrays(np.float64, st.integers(2, 50), elements=st.floats(0, 1)), st.integers(0, 1000))
def test_metrics_in_unit_interval(p, seed):
    z = np.random.default_rng(seed).random(p.shape) < 0.5
    r = image_metrics(p, z)
    for v in r.as_dict().values():
        assert 0.0 <= v <= 1.0
