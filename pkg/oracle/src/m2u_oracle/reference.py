"""Direct-definition float64 reference operators.

Each function walks output elements one by one and evaluates the textbook
formula at that position; the only vector operation permitted is the
elementwise product-sum over a single receptive field.  Slow on purpose:
these exist to be obviously correct, not fast.
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int,
           padding: int) -> np.ndarray:
    """Cross-correlation of (n, c_in, h, w) with (c_out, c_in, kh, kw)."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ValueError(f"kernel wants {kc} input channels, got {c_in}")
    xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    y = np.zeros((n, c_out, h_out, w_out))
    for b in range(n):
        for co in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    window = xp[b, :, i * stride:i * stride + kh,
                                j * stride:j * stride + kw]
                    y[b, co, i, j] = np.sum(window * kernel[co])
    return y


def depthwise_conv2d(x: np.ndarray, kernel: np.ndarray, stride: int,
                     padding: int) -> np.ndarray:
    """Per-channel convolution with (c, 1, kh, kw) kernels."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, c, h, w = x.shape
    kc, one, kh, kw = kernel.shape
    if kc != c or one != 1:
        raise ValueError(f"depthwise kernel {kernel.shape} does not fit "
                         f"{c} channels")
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    y = np.zeros((n, c, h_out, w_out))
    for b in range(n):
        for ch in range(c):
            for i in range(h_out):
                for j in range(w_out):
                    window = xp[b, ch, i * stride:i * stride + kh,
                                j * stride:j * stride + kw]
                    y[b, ch, i, j] = np.sum(window * kernel[ch, 0])
    return y


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------


def batchnorm_infer(x, gamma, beta, running_mean, running_var,
                    eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.empty_like(x)
    for ch in range(x.shape[1]):
        inv = 1.0 / np.sqrt(float(running_var[ch]) + eps)
        y[:, ch] = (x[:, ch] - float(running_mean[ch])) * inv \
            * float(gamma[ch]) + float(beta[ch])
    return y


def batchnorm_train(x, gamma, beta, running_mean, running_var,
                    eps: float = 1e-5, momentum: float = 0.1):
    """Returns (y, updated_mean, updated_var).

    The batch is normalized with the biased variance; the running estimate
    absorbs the unbiased one (factor m/(m-1) over the per-channel count).
    """
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    m = n * h * w
    y = np.empty_like(x)
    up_mean = np.empty(c)
    up_var = np.empty(c)
    for ch in range(c):
        vals = x[:, ch].reshape(-1)
        mean = float(np.sum(vals)) / m
        var = float(np.sum((vals - mean) ** 2)) / m
        inv = 1.0 / np.sqrt(var + eps)
        y[:, ch] = (x[:, ch] - mean) * inv * float(gamma[ch]) \
            + float(beta[ch])
        var_unbiased = var * m / (m - 1) if m > 1 else var
        up_mean[ch] = (1 - momentum) * float(running_mean[ch]) + momentum * mean
        up_var[ch] = (1 - momentum) * float(running_var[ch]) \
            + momentum * var_unbiased
    return y, up_mean, up_var


def relu6(x: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(np.asarray(x, dtype=np.float64), 0.0), 6.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def upsample_x2(x: np.ndarray) -> np.ndarray:
    """x2 bilinear with half-pixel centers, borders clamped.

    Destination index i reads source coordinate (i + 0.5) / 2 - 0.5.
    """
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    y = np.zeros((n, c, 2 * h, 2 * w))

    def taps(i: int, size: int) -> tuple[int, int, float]:
        s = min(max((i + 0.5) / 2.0 - 0.5, 0.0), float(size - 1))
        lo = int(np.floor(s))
        return lo, min(lo + 1, size - 1), s - lo

    for i in range(2 * h):
        i0, i1, ti = taps(i, h)
        for j in range(2 * w):
            j0, j1, tj = taps(j, w)
            y[:, :, i, j] = (
                x[:, :, i0, j0] * (1 - ti) * (1 - tj)
                + x[:, :, i0, j1] * (1 - ti) * tj
                + x[:, :, i1, j0] * ti * (1 - tj)
                + x[:, :, i1, j1] * ti * tj)
    return y


def upsample_matrix(size: int) -> np.ndarray:
    """The explicit (2*size, size) interpolation matrix for one axis.

    upsample_x2 along an axis equals multiplication by this matrix; its
    column sums are the exact adjoint the engine's backward pass must
    reproduce.
    """
    mat = np.zeros((2 * size, size))
    for i in range(2 * size):
        s = min(max((i + 0.5) / 2.0 - 0.5, 0.0), float(size - 1))
        lo = int(np.floor(s))
        hi = min(lo + 1, size - 1)
        t = s - lo
        mat[i, lo] += 1 - t
        mat[i, hi] += t
    return mat


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64),
                           np.asarray(b, dtype=np.float64)], axis=1)


# ---------------------------------------------------------------------------
# losses (used by the oracle's own self-checks)
# ---------------------------------------------------------------------------


def bce(pred: np.ndarray, gt: np.ndarray, clamp: float = 1e-7) -> float:
    p = np.clip(np.asarray(pred, dtype=np.float64).reshape(-1),
                clamp, 1.0 - clamp)
    y = np.asarray(gt, dtype=np.float64).reshape(-1)
    total = 0.0
    for pi, yi in zip(p, y):
        total += -(yi * np.log(pi) + (1.0 - yi) * np.log(1.0 - pi))
    return total / p.size


def soft_jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(gt, dtype=np.float64).reshape(-1)
    inter = float(np.sum(p * y))
    union = float(np.sum(p + y)) - inter
    return inter / union if union != 0.0 else 0.0


def joint_loss(pred, gt, w: float = 0.3) -> float:
    return bce(pred, gt) + w * (1.0 - soft_jaccard(pred, gt))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def pr_rows(scores: np.ndarray, labels: np.ndarray,
            thresholds) -> list[tuple[float, float, float, float]]:
    """(threshold, precision, recall, dice) per threshold, counted directly.

    Empty denominators follow the no-information convention: a precision
    with no predicted positives, a recall with no actual positives and a
    Dice with an all-negative agreement all read 1.0.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1) > 0.5
    rows = []
    for threshold in thresholds:
        tp = fp = fn = 0
        for si, yi in zip(s, y):
            predicted = si >= threshold
            if predicted and yi:
                tp += 1
            elif predicted and not yi:
                fp += 1
            elif not predicted and yi:
                fn += 1
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / (tp + fn) if tp + fn else 1.0
        dice = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 1.0
        rows.append((float(threshold), precision, recall, dice))
    return rows


def rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AuC as the Mann-Whitney rank statistic with tie correction."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1) > 0.5
    pos = s[y]
    neg = s[~y]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("rank AuC needs both classes")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (pos.size * neg.size)
