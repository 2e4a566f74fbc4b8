"""Loss and metric semantics, checked against closed forms and rank identities."""

import csv
import math
from fractions import Fraction

import numpy as np
import pytest

from m2unet import losses, metrics
from m2unet.errors import ShapeMismatchError, UsageError
from m2unet.metrics import (ConfusionCounts, accuracy_adjusted, confusion,
                            default_thresholds, dice_score, pr_curve,
                            precision_recall, roc_auc)


# =============================================================================
# Losses
# =============================================================================


def test_bce_closed_form_at_half():
    assert losses.bce_loss([0.5, 0.5], [0.0, 1.0]) == pytest.approx(
        math.log(2.0), rel=1e-15)


def test_bce_matches_direct_sum(rng):
    p = rng.uniform(0.05, 0.95, 64)
    y = (rng.random(64) < 0.4).astype(float)
    ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert losses.bce_loss(p, y) == pytest.approx(ref, rel=1e-14)


def test_bce_clamp_keeps_confident_errors_finite():
    v = losses.bce_loss([0.0, 1.0], [1.0, 0.0])
    assert math.isfinite(v)
    assert v == pytest.approx(-math.log(losses.CLAMP_EPS), rel=1e-9)


def test_soft_jaccard_range_and_extremes(rng):
    y = (rng.random(128) < 0.5).astype(float)
    assert losses.soft_jaccard(np.ones(16), np.ones(16)) == 1.0
    # 0/0 terms count 0, so a perfect binary prediction scores the
    # foreground fraction, not 1
    assert losses.soft_jaccard(y, y) == pytest.approx(y.mean())
    assert losses.soft_jaccard(1.0 - y, y) == 0.0
    for _ in range(10):
        p = rng.uniform(0, 1, 128)
        assert 0.0 <= losses.soft_jaccard(p, y) <= 1.0


def test_soft_jaccard_all_background_is_zero():
    # 0/0 terms are defined as 0, so an empty mask with zero predictions
    # scores J = 0 and the joint loss stays bounded
    assert losses.soft_jaccard(np.zeros(16), np.zeros(16)) == 0.0
    g = losses.soft_jaccard_grad(np.zeros(16), np.zeros(16))
    assert np.all(g == 0.0)


def test_jbce_composition(rng):
    p = rng.uniform(0.1, 0.9, 32)
    y = (rng.random(32) < 0.5).astype(float)
    for w in (0.0, 0.3, 1.5):
        ref = losses.bce_loss(p, y) + w * (1.0 - losses.soft_jaccard(p, y))
        assert losses.jbce_loss(p, y, w) == pytest.approx(ref, rel=1e-15)


def test_jbce_monotone_in_weight(rng):
    p = rng.uniform(0.1, 0.9, 32)
    y = (rng.random(32) < 0.5).astype(float)
    vals = [losses.jbce_loss(p, y, w) for w in (0.0, 0.1, 0.3, 1.0, 3.0)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_loss_input_validation():
    with pytest.raises(ShapeMismatchError):
        losses.bce_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(UsageError):
        losses.bce_loss(np.zeros(0), np.zeros(0))
    with pytest.raises(UsageError):
        losses.jbce_loss(np.full(4, 0.5), np.zeros(4), w=-0.1)
    with pytest.raises(UsageError):
        losses.jbce_loss_grad(np.full(4, 0.5), np.zeros(4), w=-0.1)


# =============================================================================
# Confusion counting and Dice
# =============================================================================


def test_confusion_threshold_is_inclusive():
    c = confusion([0.3, 0.5, 0.7], [0, 1, 1], threshold=0.5)
    assert (c.tp, c.fp, c.tn, c.fn) == (2, 0, 1, 0)


def test_confusion_counts_validation():
    with pytest.raises(UsageError):
        ConfusionCounts(tp=-1, fp=0, tn=0, fn=0)
    c = ConfusionCounts(tp=3, fp=2, tn=7, fn=1, n_cropped=5)
    assert c.evaluated == 13


def _fraction_dice(tp, fp, fn):
    """Reference Dice through exact rationals and the Pr/Re harmonic mean."""
    pr = Fraction(tp, tp + fp) if tp + fp else Fraction(1)
    re = Fraction(tp, tp + fn) if tp + fn else Fraction(1)
    if pr + re == 0:
        return Fraction(0)
    return 2 * pr * re / (pr + re)


def test_dice_is_harmonic_mean_of_pr_re(rng):
    # the worry case is the 0/0 conventions; hit them alongside random counts
    cases = [(0, 0, 0), (0, 5, 0), (0, 0, 7), (0, 3, 4), (1, 0, 0)]
    cases += [tuple(int(v) for v in rng.integers(0, 10_000, 3))
              for _ in range(1000)]
    for tp, fp, fn in cases:
        c = ConfusionCounts(tp=tp, fp=fp, tn=0, fn=fn)
        assert dice_score(c) == float(_fraction_dice(tp, fp, fn)), (tp, fp, fn)


def test_dice_empty_mask_convention():
    assert dice_score(ConfusionCounts(tp=0, fp=0, tn=9, fn=0)) == 1.0


def test_precision_recall_conventions():
    assert precision_recall(ConfusionCounts(tp=0, fp=0, tn=4, fn=2)) == (1.0, 0.0)
    assert precision_recall(ConfusionCounts(tp=0, fp=3, tn=4, fn=0)) == (0.0, 1.0)
    pr, re = precision_recall(ConfusionCounts(tp=6, fp=2, tn=0, fn=4))
    assert (pr, re) == (0.75, 0.6)


def test_accuracy_adjusted_counts_crop_as_negatives():
    c = ConfusionCounts(tp=1, fp=1, tn=1, fn=1, n_cropped=4)
    assert accuracy_adjusted(c) == (1 + 1 + 4) / 8
    assert accuracy_adjusted(ConfusionCounts(0, 0, 0, 0)) == 1.0


def test_accuracy_adjusted_monotone_in_crop(rng):
    c = ConfusionCounts(tp=40, fp=10, tn=30, fn=20)
    vals = [accuracy_adjusted(ConfusionCounts(c.tp, c.fp, c.tn, c.fn, n))
            for n in (0, 1, 10, 1000, 34_024, 37_440)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1.0


# =============================================================================
# PR curve
# =============================================================================


def test_default_thresholds_grid():
    taus = default_thresholds()
    assert taus.size == 255
    assert taus[0] == 1 / 256 and taus[-1] == 255 / 256
    assert np.all(np.diff(taus) > 0)


def test_pr_curve_matches_confusion(rng):
    p = rng.random(500)
    y = rng.random(500) < 0.3
    points, best = pr_curve(p, y, default_thresholds())
    for pt in points[::17]:
        c = confusion(p, y, pt.threshold)
        pr, re = precision_recall(c)
        assert (pt.precision, pt.recall, pt.dice) == (pr, re, dice_score(c))
    assert best.dice == max(pt.dice for pt in points)


def test_pr_curve_tie_takes_lowest_threshold():
    # both thresholds fall in the same score gap, so their Dice ties
    points, best = pr_curve([0.1, 0.4, 0.9], [0, 1, 1], [0.2, 0.3])
    assert points[0].dice == points[1].dice
    assert best.threshold == 0.2


def test_pr_curve_validation():
    with pytest.raises(UsageError):
        pr_curve([0.5], [1], [])
    with pytest.raises(UsageError):
        pr_curve([0.5], [1], [0.5, 0.4])
    with pytest.raises(UsageError):
        pr_curve([0.5], [1], [0.5, 1.5])
    with pytest.raises(ShapeMismatchError):
        pr_curve([0.5, 0.6], [1], [0.5])


# =============================================================================
# AuC
# =============================================================================


def _rank_auc(scores, labels):
    """Mann-Whitney statistic with midranks; equals trapezoidal ROC area."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    mid = ends - (counts - 1) / 2.0
    ranks = mid[inv]
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def test_auc_equals_rank_statistic():
    for seed in range(100):
        r = np.random.default_rng(seed)
        n = int(r.integers(20, 400))
        # quantizing forces tie groups, the part trapezoids get wrong first
        s = r.integers(0, 32, n) / 31.0
        y = r.random(n) < 0.4
        if y.all() or not y.any():
            y[0] = not y[0]
        assert abs(roc_auc(s, y) - _rank_auc(s, y)) <= 1e-9, seed


def test_auc_extremes():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert roc_auc([0.4, 0.4, 0.4, 0.4], [0, 1, 0, 1]) == 0.5


def test_auc_monotone_transform_invariance():
    r = np.random.default_rng(7)
    s = r.integers(0, 257, 300) / 256.0     # exact binary fractions
    y = r.random(300) < 0.35
    base = roc_auc(s, y)
    assert roc_auc(s * 0.5 + 0.25, y) == base     # affine map is exact here
    assert roc_auc(np.exp(s), y) == pytest.approx(base, abs=1e-12)


def test_auc_cropped_modes():
    r = np.random.default_rng(11)
    s = r.random(200) * 0.9 + 0.05          # keep scores above 0
    y = r.random(200) < 0.3
    k = 57
    padded = roc_auc(np.concatenate([s, np.zeros(k)]),
                     np.concatenate([y, np.zeros(k, dtype=bool)]))
    assert roc_auc(s, y, n_cropped=k) == padded
    assert roc_auc(s, y, n_cropped=k, cropped_scores="exclude") == roc_auc(s, y)
    with pytest.raises(UsageError):
        roc_auc(s, y, cropped_scores="drop")


def test_auc_needs_both_classes():
    with pytest.raises(UsageError):
        roc_auc([0.1, 0.9], [1, 1])
    with pytest.raises(UsageError):
        roc_auc([0.1, 0.9], [0, 0])
    # appended crop negatives count as a class
    assert roc_auc([0.5, 0.9], [1, 1], n_cropped=3) == 1.0


# =============================================================================
# Report writers
# =============================================================================


def test_pr_csv_round_trips(tmp_path, rng):
    p = rng.random(100)
    y = rng.random(100) < 0.4
    points, _ = pr_curve(p, y, default_thresholds(15))
    path = tmp_path / "pr.csv"
    metrics.write_pr_csv(path, points)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 15
    for row, pt in zip(rows, points):
        assert float(row["threshold"]) == pt.threshold
        assert float(row["precision"]) == pt.precision
        assert float(row["recall"]) == pt.recall
        assert float(row["dice"]) == pt.dice


def test_metrics_csv_layout(tmp_path):
    rows = [{"image_id": "01_test", "dice": 0.8123456789012345,
             "accuracy": 0.97, "auc": 0.985, "optimal_threshold": 0.515625}]
    path = tmp_path / "metrics.csv"
    metrics.write_metrics_csv(path, rows)
    with open(path, newline="") as fh:
        got = list(csv.DictReader(fh))
    assert got[0]["image_id"] == "01_test"
    assert float(got[0]["dice"]) == 0.8123456789012345
    assert float(got[0]["optimal_threshold"]) == 0.515625
