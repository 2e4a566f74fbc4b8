"""Evaluation metrics for binary vessel maps.

Confusion counting, Dice/F1, precision-recall sweeps over a threshold
grid, and accuracy/AuC with the cropped-pixel adjustment: pixels removed
by the dataset preprocessing crops are genuine non-vessel background, so
they are counted as true negatives (and, for AuC, as negatives scored 0)
to stay comparable with full-frame results.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError, UsageError

# 255 uniform thresholds in (0, 1): k / 256 for k = 1..255
DEFAULT_THRESHOLD_COUNT = 255


def default_thresholds(count: int = DEFAULT_THRESHOLD_COUNT) -> np.ndarray:
    return np.arange(1, count + 1, dtype=np.float64) / (count + 1)


@dataclass
class ConfusionCounts:
    """Pixel confusion counts plus the number of cropped-away pixels."""

    tp: int
    fp: int
    tn: int
    fn: int
    n_cropped: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn", "n_cropped"):
            if getattr(self, name) < 0:
                raise UsageError(f"confusion count {name} must be >= 0")

    @property
    def evaluated(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class PRPoint:
    threshold: float
    precision: float
    recall: float
    dice: float


def _flat_pair(prob, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(prob, dtype=np.float64).reshape(-1)
    y = np.asarray(gt).reshape(-1)
    if p.shape != y.shape:
        raise ShapeMismatchError(
            f"probability and ground truth sizes differ: {p.size} vs {y.size}"
        )
    yb = y > 0.5
    return p, yb


def confusion(prob, gt, threshold: float, n_cropped: int = 0) -> ConfusionCounts:
    """Binarize prob >= threshold against a binary ground truth."""
    p, y = _flat_pair(prob, gt)
    pred = p >= threshold
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    tn = int(np.count_nonzero(~pred & ~y))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn, n_cropped=n_cropped)


def dice_score(c: ConfusionCounts) -> float:
    """Dice / F1 = 2 TP / (2 TP + FN + FP); an empty mask scores 1."""
    denom = 2 * c.tp + c.fn + c.fp
    if denom == 0:
        return 1.0
    return 2.0 * c.tp / denom


def precision_recall(c: ConfusionCounts) -> tuple[float, float]:
    # no predicted positives -> precision 1; no actual positives -> recall 1
    pr = c.tp / (c.tp + c.fp) if (c.tp + c.fp) > 0 else 1.0
    re = c.tp / (c.tp + c.fn) if (c.tp + c.fn) > 0 else 1.0
    return pr, re


def accuracy_adjusted(c: ConfusionCounts) -> float:
    """Accuracy with cropped pixels counted as true negatives."""
    denom = c.evaluated + c.n_cropped
    if denom == 0:
        return 1.0
    return (c.tp + c.tn + c.n_cropped) / denom


def pr_curve(prob, gt, thresholds) -> tuple[list[PRPoint], PRPoint]:
    """Precision/recall/Dice at each threshold, plus the argmax-Dice point.

    Thresholds must be strictly increasing within [0, 1].  Ties on the best
    Dice resolve to the lowest threshold.
    """
    taus = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if taus.size == 0:
        raise UsageError("threshold list must not be empty")
    if np.any(np.diff(taus) <= 0) or taus[0] < 0 or taus[-1] > 1:
        raise UsageError("thresholds must be strictly increasing in [0, 1]")
    p, y = _flat_pair(prob, gt)
    pos = np.sort(p[y])
    neg = np.sort(p[~y])
    n_pos, n_neg = pos.size, neg.size
    points: list[PRPoint] = []
    for tau in taus:
        tp = n_pos - int(np.searchsorted(pos, tau, side="left"))
        fp = n_neg - int(np.searchsorted(neg, tau, side="left"))
        c = ConfusionCounts(tp=tp, fp=fp, tn=n_neg - fp, fn=n_pos - tp)
        pr, re = precision_recall(c)
        points.append(PRPoint(float(tau), pr, re, dice_score(c)))
    best = max(points, key=lambda pt: pt.dice)   # first max -> lowest threshold
    return points, best


def roc_auc(prob, gt, n_cropped: int = 0, cropped_scores: str = "zero") -> float:
    """Trapezoidal area under the ROC curve over all distinct thresholds.

    cropped_scores="zero" (default) adds n_cropped negative pixels with
    score 0, mirroring the true-negative accuracy adjustment;
    cropped_scores="exclude" ignores them.
    """
    if cropped_scores not in ("zero", "exclude"):
        raise UsageError(f"unknown cropped_scores mode {cropped_scores!r}")
    p, y = _flat_pair(prob, gt)
    if cropped_scores == "zero" and n_cropped > 0:
        p = np.concatenate([p, np.zeros(n_cropped)])
        y = np.concatenate([y, np.zeros(n_cropped, dtype=bool)])
    n_pos = int(np.count_nonzero(y))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UsageError("AuC needs at least one positive and one negative pixel")
    order = np.argsort(-p, kind="stable")
    ps = p[order]
    ys = y[order]
    # cumulative counts at the end of each distinct-score group
    last_of_group = np.nonzero(np.diff(ps))[0]
    edges = np.concatenate([last_of_group, [ps.size - 1]])
    cum_tp = np.cumsum(ys)[edges]
    cum_fp = (edges + 1) - cum_tp
    tpr = np.concatenate([[0.0], cum_tp / n_pos])
    fpr = np.concatenate([[0.0], cum_fp / n_neg])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


# =============================================================================
# Report writers
# =============================================================================


def write_pr_csv(path, points: list[PRPoint]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["threshold", "precision", "recall", "dice"])
        for pt in points:
            wr.writerow([f"{pt.threshold:.17g}", f"{pt.precision:.17g}",
                         f"{pt.recall:.17g}", f"{pt.dice:.17g}"])


def write_metrics_csv(path, rows: list[dict]) -> None:
    """One row per image: image id, dice, accuracy, auc, optimal threshold."""
    fields = ["image_id", "dice", "accuracy", "auc", "optimal_threshold"]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields)
        wr.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("dice", "accuracy", "auc", "optimal_threshold"):
                if key in out and out[key] is not None:
                    out[key] = f"{float(out[key]):.17g}"
            wr.writerow(out)
