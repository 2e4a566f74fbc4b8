"""Training losses: binary cross entropy, soft Jaccard, and their joint form.

All three operate on flattened probability/ground-truth arrays of equal
length.  Probabilities are clamped to [CLAMP_EPS, 1 - CLAMP_EPS] inside the
logs so a confident wrong pixel stays finite.  Per-pixel 0/0 Jaccard terms
(y == 0 and y_hat == 0) are defined as 0, which keeps the index at 0 for
all-background tiles and the loss bounded.

The joint loss is  L = L_bce + w * (1 - J)  with default weight w = 0.3.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeMismatchError, UsageError

CLAMP_EPS = 1e-7
DEFAULT_JACCARD_WEIGHT = 0.3


def _as_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(gt, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ShapeMismatchError(
            f"prediction and ground truth lengths differ: {p.size} vs {y.size}"
        )
    if p.size == 0:
        raise UsageError("loss over zero pixels is undefined")
    return p, y


def bce_loss(pred, gt) -> float:
    """Mean binary cross entropy, -(1/n) sum[y log p + (1-y) log(1-p)]."""
    p, y = _as_pair(pred, gt)
    pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def bce_loss_grad(pred, gt) -> np.ndarray:
    """d bce / d pred.  Zero where the clamp is active."""
    p, y = _as_pair(pred, gt)
    pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    g = -(y / pc - (1.0 - y) / (1.0 - pc)) / p.size
    inside = (p > CLAMP_EPS) & (p < 1.0 - CLAMP_EPS)
    return np.where(inside, g, 0.0)


def soft_jaccard(pred, gt) -> float:
    """Per-pixel soft intersection-over-union, (1/n) sum y*p / (y + p - y*p)."""
    p, y = _as_pair(pred, gt)
    num = y * p
    den = y + p - num
    terms = np.divide(num, den, out=np.zeros_like(num), where=den != 0.0)
    return float(np.mean(terms))


def soft_jaccard_grad(pred, gt) -> np.ndarray:
    """d J / d pred = y^2 / (n * (y + p - y*p)^2), with 0/0 -> 0."""
    p, y = _as_pair(pred, gt)
    den = y + p - y * p
    g = np.divide(y * y, den * den, out=np.zeros_like(p), where=den != 0.0)
    return g / p.size


def jbce_loss(pred, gt, w: float = DEFAULT_JACCARD_WEIGHT) -> float:
    """Joint loss  L_bce + w * (1 - J)."""
    if w < 0:
        raise UsageError(f"jaccard weight must be >= 0, got {w}")
    return bce_loss(pred, gt) + w * (1.0 - soft_jaccard(pred, gt))


def jbce_loss_grad(pred, gt, w: float = DEFAULT_JACCARD_WEIGHT) -> np.ndarray:
    if w < 0:
        raise UsageError(f"jaccard weight must be >= 0, got {w}")
    return bce_loss_grad(pred, gt) - w * soft_jaccard_grad(pred, gt)


# vjp entries so the losses dispatch through the same surface as the
# tensor operators; grad_out is the scalar seed (1.0 for a plain loss).
ops.register_vjp("bce_loss", lambda saved, g: {
    "pred": float(g) * bce_loss_grad(saved["pred"], saved["gt"])})
ops.register_vjp("soft_jaccard", lambda saved, g: {
    "pred": float(g) * soft_jaccard_grad(saved["pred"], saved["gt"])})
ops.register_vjp("jbce_loss", lambda saved, g: {
    "pred": float(g) * jbce_loss_grad(
        saved["pred"], saved["gt"], saved.get("w", DEFAULT_JACCARD_WEIGHT))})
