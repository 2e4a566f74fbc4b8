"""Forward operators, their vector-Jacobian products and cost descriptors.

This is the complete operator set the network needs: grouped/depthwise
convolution, batch norm, relu6, sigmoid, x2 bilinear upsampling, channel
concatenation and residual addition.  Each operator comes with

* a pure forward function (fresh output, inputs untouched),
* a registered vjp under the same operator id (see `vjp`),
* a `*_cost` descriptor returning its CostTally contribution.

Conventions that the golden fixtures rely on:

* Convolution outputs use h' = floor((h + 2*padding - k) / stride) + 1 with
  zero padding; one multiply-accumulate counts as one madd.
* Batch norm in train mode normalizes with the biased batch variance and
  folds the *unbiased* variance into running_var with weight `momentum`
  (running <- (1 - momentum) * running + momentum * batch).  Train mode is
  the one stateful operation in the engine: it writes the updated running
  statistics back into the BatchNormParams it was given.
* Bilinear upsampling uses half-pixel centers: destination index i samples
  source coordinate (i + 0.5) / 2 - 0.5, clamped to the borders.
* relu6 has derivative 0 at both kinks (x == 0 and x == 6).
* sigmoid outputs are nudged into the open interval (0, 1): values that
  would round to exactly 0.0 or 1.0 in the working dtype are clamped one
  ulp inside.

Batch-norm aside, every operator is safe to call concurrently.  numpy may
parallelize the underlying BLAS calls; `thread_limit(1)` pins everything to
a single thread, which is the mode fixture comparisons run under.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable

import numpy as np

from .errors import NumericError, ShapeMismatchError, UsageError
from .tensor import BatchNormParams, ConvWeights, CostTally, Tensor, check_finite

# =============================================================================
# Threading / determinism control
# =============================================================================


@contextmanager
def thread_limit(n: int):
    """Limit BLAS-level parallelism to `n` threads within the block.

    `thread_limit(1)` is the deterministic single-threaded mode: with one
    thread every operator is bit-reproducible within a build.
    """
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with the env
        yield
        return
    with threadpool_limits(limits=n):
        yield


# =============================================================================
# Shape helpers
# =============================================================================


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    """Output spatial size of a convolution; raises if it is not defined."""
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeMismatchError(
            f"kernel {k}x{k} does not fit input {h}x{w} with padding {padding}"
        )
    return ((h + 2 * padding - k) // stride + 1,
            (w + 2 * padding - k) // stride + 1)


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xpad: np.ndarray, k: int, s: int, h_out: int, w_out: int) -> np.ndarray:
    """(n, c, H, W) padded input -> (n, c*k*k, h_out*w_out) patch matrix."""
    n, c = xpad.shape[:2]
    view = np.lib.stride_tricks.sliding_window_view(xpad, (k, k), axis=(2, 3))
    view = view[:, :, ::s, ::s, :, :]                 # (n, c, h_out, w_out, k, k)
    cols = view.transpose(0, 1, 4, 5, 2, 3)           # (n, c, k, k, h_out, w_out)
    return cols.reshape(n, c * k * k, h_out * w_out)


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int, s: int, p: int,
            h_out: int, w_out: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back onto the input grid."""
    n, c, h, w = x_shape
    dxpad = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, k, k, h_out, w_out)
    for ki in range(k):
        rows = slice(ki, ki + s * (h_out - 1) + 1, s)
        for kj in range(k):
            cols = slice(kj, kj + s * (w_out - 1) + 1, s)
            dxpad[:, :, rows, cols] += d6[:, :, ki, kj]
    if p == 0:
        return dxpad
    return dxpad[:, :, p:p + h, p:p + w]


# =============================================================================
# Convolution
# =============================================================================


def _check_conv_input(x: Tensor, w: ConvWeights) -> None:
    if x.shape[1] != w.c_in:
        raise ShapeMismatchError(
            f"conv expects {w.c_in} input channels "
            f"(groups={w.groups} x {w.c_in_per_group}), got {x.shape[1]}"
        )


def _conv2d_single_group(xpad, kernel, s, h_out, w_out):
    n = xpad.shape[0]
    c_out, c_in, k, _ = kernel.shape
    if k == 1 and s == 1:
        # pointwise: a per-pixel matrix multiplication
        y = np.tensordot(kernel[:, :, 0, 0], xpad, axes=([1], [1]))
        return y.transpose(1, 0, 2, 3)
    cols = _im2col(xpad, k, s, h_out, w_out)
    y = np.matmul(kernel.reshape(c_out, -1), cols)
    return y.reshape(n, c_out, h_out, w_out)


def conv2d(x: Tensor, w: ConvWeights) -> Tensor:
    """Grouped 2-D convolution, no bias.

    Each output cell is the exact dot product of the kernel with its
    zero-padded receptive field.
    """
    _check_conv_input(x, w)
    n, c, h, wd = x.shape
    k, s, p = w.ksize, w.stride, w.padding
    h_out, w_out = conv_output_hw(h, wd, k, s, p)
    xpad = _pad2d(x.data, p)
    kernel = w.kernel.astype(x.dtype, copy=False)
    if w.groups == 1:
        y = _conv2d_single_group(xpad, kernel, s, h_out, w_out)
    else:
        cpg = w.c_in_per_group
        opg = w.c_out // w.groups
        y = np.empty((n, w.c_out, h_out, w_out), dtype=x.dtype)
        for g in range(w.groups):
            y[:, g * opg:(g + 1) * opg] = _conv2d_single_group(
                xpad[:, g * cpg:(g + 1) * cpg],
                kernel[g * opg:(g + 1) * opg], s, h_out, w_out)
    return Tensor(check_finite(y, "conv2d output"))


def conv2d_cost(x_shape: tuple, w: ConvWeights) -> CostTally:
    _, _, h, wd = x_shape
    h_out, w_out = conv_output_hw(h, wd, w.ksize, w.stride, w.padding)
    madds = w.c_out * h_out * w_out * w.ksize * w.ksize * w.c_in_per_group
    return CostTally(madds=madds, params=w.param_count)


def _conv2d_single_group_vjp(xpad, kernel, gy, s, p, x_hw):
    c_out, c_in, k, _ = kernel.shape
    n, _, h_out, w_out = gy.shape
    h, wd = x_hw
    if k == 1 and s == 1 and p == 0:
        k2 = kernel[:, :, 0, 0]
        dk = np.tensordot(gy, xpad, axes=([0, 2, 3], [0, 2, 3]))
        dx = np.tensordot(k2, gy, axes=([0], [1])).transpose(1, 0, 2, 3)
        return dx, dk.reshape(kernel.shape)
    cols = _im2col(xpad, k, s, h_out, w_out)
    gy2 = gy.reshape(n, c_out, h_out * w_out)
    dk = np.matmul(gy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    dcols = np.matmul(kernel.reshape(c_out, -1).T, gy2)
    dx = _col2im(dcols, (n, c_in, h, wd), k, s, p, h_out, w_out)
    return dx, dk


def _conv2d_vjp(saved: dict, grad_out: Tensor) -> dict:
    x: Tensor = saved["x"]
    w: ConvWeights = saved["w"]
    k, s, p = w.ksize, w.stride, w.padding
    n, c, h, wd = x.shape
    xpad = _pad2d(x.data, p)
    kernel = w.kernel.astype(x.dtype, copy=False)
    gy = grad_out.data
    if w.groups == 1:
        dx, dk = _conv2d_single_group_vjp(xpad, kernel, gy, s, p, (h, wd))
    else:
        cpg = w.c_in_per_group
        opg = w.c_out // w.groups
        dx = np.empty_like(x.data)
        dk = np.empty_like(kernel)
        for g in range(w.groups):
            cs, os_ = slice(g * cpg, (g + 1) * cpg), slice(g * opg, (g + 1) * opg)
            dx[:, cs], dk[os_] = _conv2d_single_group_vjp(
                xpad[:, cs], kernel[os_], gy[:, os_], s, p, (h, wd))
    return {"x": Tensor(dx), "kernel": dk}


def depthwise_conv2d(x: Tensor, w: ConvWeights) -> Tensor:
    """Per-channel spatial convolution: output channel i sees only input
    channel i (groups == channels, one filter per channel)."""
    if w.groups != x.shape[1] or w.c_in_per_group != 1 or w.c_out != x.shape[1]:
        raise ShapeMismatchError(
            f"depthwise conv needs groups == channels == c_out "
            f"(got groups={w.groups}, c_out={w.c_out}, channels={x.shape[1]})"
        )
    n, c, h, wd = x.shape
    k, s, p = w.ksize, w.stride, w.padding
    h_out, w_out = conv_output_hw(h, wd, k, s, p)
    xpad = _pad2d(x.data, p)
    kernel = w.kernel.astype(x.dtype, copy=False)
    y = np.zeros((n, c, h_out, w_out), dtype=x.dtype)
    for ki in range(k):
        rows = slice(ki, ki + s * (h_out - 1) + 1, s)
        for kj in range(k):
            cols = slice(kj, kj + s * (w_out - 1) + 1, s)
            y += kernel[:, 0, ki, kj][None, :, None, None] * xpad[:, :, rows, cols]
    return Tensor(check_finite(y, "depthwise_conv2d output"))


def depthwise_conv2d_cost(x_shape: tuple, w: ConvWeights) -> CostTally:
    _, c, h, wd = x_shape
    h_out, w_out = conv_output_hw(h, wd, w.ksize, w.stride, w.padding)
    madds = c * h_out * w_out * w.ksize * w.ksize
    return CostTally(madds=madds, params=w.param_count)


def _depthwise_conv2d_vjp(saved: dict, grad_out: Tensor) -> dict:
    x: Tensor = saved["x"]
    w: ConvWeights = saved["w"]
    k, s, p = w.ksize, w.stride, w.padding
    n, c, h, wd = x.shape
    _, _, h_out, w_out = grad_out.shape
    xpad = _pad2d(x.data, p)
    kernel = w.kernel.astype(x.dtype, copy=False)
    gy = grad_out.data
    dxpad = np.zeros_like(xpad)
    dk = np.zeros_like(kernel)
    for ki in range(k):
        rows = slice(ki, ki + s * (h_out - 1) + 1, s)
        for kj in range(k):
            cols = slice(kj, kj + s * (w_out - 1) + 1, s)
            dxpad[:, :, rows, cols] += kernel[:, 0, ki, kj][None, :, None, None] * gy
            dk[:, 0, ki, kj] = np.sum(gy * xpad[:, :, rows, cols], axis=(0, 2, 3))
    dx = dxpad if p == 0 else dxpad[:, :, p:p + h, p:p + wd]
    return {"x": Tensor(dx), "kernel": dk}


# =============================================================================
# Batch normalization
# =============================================================================


def _bn_batch_stats(xd: np.ndarray):
    mean = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))          # biased, used for normalization
    return mean, var


def batchnorm(x: Tensor, p: BatchNormParams, mode: str = "infer") -> Tensor:
    """Per-channel batch normalization.

    infer: y = gamma * (x - running_mean) / sqrt(running_var + eps) + beta.
    train: normalizes with the current batch statistics and folds them into
    the running statistics (in place) with weight `momentum`.
    """
    if mode not in ("train", "infer"):
        raise UsageError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    if x.shape[1] != p.channels:
        raise ShapeMismatchError(
            f"batchnorm has {p.channels} channels, input has {x.shape[1]}"
        )
    xd = x.data
    if mode == "train":
        mean, var = _bn_batch_stats(xd)
        denom = var + p.eps
        if np.any(denom <= 0):
            raise NumericError("batch variance + eps is not positive")
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        var_running = var * (m / (m - 1)) if m > 1 else var
        mom = p.momentum
        p.running_mean = ((1.0 - mom) * p.running_mean + mom * mean).astype(
            p.running_mean.dtype)
        p.running_var = ((1.0 - mom) * p.running_var + mom * var_running).astype(
            p.running_var.dtype)
    else:
        mean = p.running_mean
        denom = p.running_var + p.eps
        if np.any(denom <= 0):
            raise NumericError("running_var + eps is not positive")
    inv = 1.0 / np.sqrt(denom)
    scale = (p.gamma * inv).astype(xd.dtype)[None, :, None, None]
    shift = (p.beta - p.gamma * inv * mean).astype(xd.dtype)[None, :, None, None]
    y = xd * scale + shift
    return Tensor(check_finite(y, "batchnorm output"))


def batchnorm_cost(channels: int) -> CostTally:
    # gamma and beta only; the affine transform adds no counted madds
    return CostTally(madds=0, params=2 * channels)


def _batchnorm_vjp(saved: dict, grad_out: Tensor) -> dict:
    x: Tensor = saved["x"]
    p: BatchNormParams = saved["p"]
    mode: str = saved["mode"]
    xd = x.data
    gy = grad_out.data
    if mode == "train":
        mean, var = _bn_batch_stats(xd)
    else:
        mean, var = p.running_mean, p.running_var
    inv = (1.0 / np.sqrt(var + p.eps)).astype(xd.dtype)
    xhat = (xd - mean.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]
    dgamma = np.sum(gy * xhat, axis=(0, 2, 3))
    dbeta = np.sum(gy, axis=(0, 2, 3))
    gscale = (p.gamma.astype(xd.dtype) * inv)[None, :, None, None]
    if mode == "train":
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        dx = gscale * (gy
                       - dbeta.astype(xd.dtype)[None, :, None, None] / m
                       - xhat * dgamma.astype(xd.dtype)[None, :, None, None] / m)
    else:
        dx = gscale * gy
    return {"x": Tensor(dx), "gamma": dgamma, "beta": dbeta}


# =============================================================================
# Elementwise / structural operators
# =============================================================================


def relu6(x: Tensor) -> Tensor:
    """y = min(max(x, 0), 6)."""
    return Tensor(np.minimum(np.maximum(x.data, 0), x.dtype.type(6)))


def _relu6_vjp(saved: dict, grad_out: Tensor) -> dict:
    xd = saved["x"].data
    mask = ((xd > 0) & (xd < 6)).astype(xd.dtype)   # 0 at both kinks
    return {"x": Tensor(grad_out.data * mask)}


def relu(x: Tensor) -> Tensor:
    """Unclipped variant, y = max(x, 0); offered as an activation alternative."""
    return Tensor(np.maximum(x.data, 0))


def _relu_vjp(saved: dict, grad_out: Tensor) -> dict:
    mask = (saved["x"].data > 0).astype(saved["x"].dtype)
    return {"x": Tensor(grad_out.data * mask)}


def sigmoid(x: Tensor) -> Tensor:
    """y = 1 / (1 + exp(-x)), numerically stable, clamped into (0, 1)."""
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    tiny = np.finfo(xd.dtype).tiny
    np.clip(y, tiny, np.nextafter(xd.dtype.type(1), xd.dtype.type(0)), out=y)
    return Tensor(check_finite(y, "sigmoid output"))


def _sigmoid_vjp(saved: dict, grad_out: Tensor) -> dict:
    y = sigmoid(saved["x"]).data
    return {"x": Tensor(grad_out.data * y * (1.0 - y))}


def upsample_indices(size_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source indices/weights for x2 upsampling.

    Destination index i samples source coordinate (i + 0.5) / 2 - 0.5,
    clamped to [0, size_in - 1]; returns (i0, i1, t) with the sample being
    (1 - t) * src[i0] + t * src[i1].
    """
    dst = np.arange(2 * size_in, dtype=np.float64)
    src = np.clip((dst + 0.5) / 2.0 - 0.5, 0.0, float(size_in - 1))
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size_in - 1)
    return i0, i1, src - i0


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    """Doubles height and width by separable bilinear interpolation.

    Parameter-free; constant inputs map to the same constant, and the map
    is linear in x.
    """
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeMismatchError("bilinear_upsample_x2 needs h, w >= 1")
    xd = x.data
    i0, i1, ti = upsample_indices(h)
    j0, j1, tj = upsample_indices(w)
    ti = ti.astype(xd.dtype)[None, None, :, None]
    tj = tj.astype(xd.dtype)[None, None, None, :]
    rows = xd[:, :, i0, :] * (1 - ti) + xd[:, :, i1, :] * ti
    y = rows[:, :, :, j0] * (1 - tj) + rows[:, :, :, j1] * tj
    return Tensor(y)


def _bilinear_upsample_x2_vjp(saved: dict, grad_out: Tensor) -> dict:
    x: Tensor = saved["x"]
    n, c, h, w = x.shape
    gy = grad_out.data
    i0, i1, ti = upsample_indices(h)
    j0, j1, tj = upsample_indices(w)
    ti = ti.astype(gy.dtype)
    tj = tj.astype(gy.dtype)
    # adjoint of the column interpolation: scatter-add onto w source columns
    gcolsT = np.zeros((w, n, c, 2 * h), dtype=gy.dtype)
    gyT = gy.transpose(3, 0, 1, 2)
    np.add.at(gcolsT, j0, gyT * (1 - tj)[:, None, None, None])
    np.add.at(gcolsT, j1, gyT * tj[:, None, None, None])
    # adjoint of the row interpolation
    dxT = np.zeros((h, n, c, w), dtype=gy.dtype)
    grows = gcolsT.transpose(3, 1, 2, 0)   # (2h, n, c, w)
    np.add.at(dxT, i0, grows * (1 - ti)[:, None, None, None])
    np.add.at(dxT, i1, grows * ti[:, None, None, None])
    return {"x": Tensor(dxT.transpose(1, 2, 0, 3))}


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis, a's channels first."""
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeMismatchError(
            f"concat_channels needs matching (n, h, w): {a.shape} vs {b.shape}"
        )
    return Tensor(np.concatenate([a.data, b.data], axis=1))


def _concat_channels_vjp(saved: dict, grad_out: Tensor) -> dict:
    ca = saved["a"].shape[1]
    gy = grad_out.data
    return {"a": Tensor(gy[:, :ca]), "b": Tensor(gy[:, ca:])}


def add_residual(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two identically shaped tensors."""
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"add_residual needs identical shapes: {a.shape} vs {b.shape}"
        )
    return Tensor(check_finite(a.data + b.data, "add_residual output"))


def _add_residual_vjp(saved: dict, grad_out: Tensor) -> dict:
    return {"a": Tensor(grad_out.data.copy()), "b": Tensor(grad_out.data.copy())}


# =============================================================================
# vjp dispatch
# =============================================================================

_VJP_FUNCS: dict[str, Callable[[dict, object], dict]] = {}


def register_vjp(op: str, fn: Callable[[dict, object], dict]) -> None:
    _VJP_FUNCS[op] = fn


def vjp(op: str, saved: dict, grad_out) -> dict:
    """Exact vector-Jacobian product of operator `op`.

    `saved` is the forward call's inputs/params under their argument names;
    returns gradients keyed by input/parameter name.
    """
    fn = _VJP_FUNCS.get(op)
    if fn is None:
        raise UsageError(f"no vjp registered for operator {op!r}")
    if saved is None:
        raise UsageError(f"vjp({op!r}) called without saved context")
    try:
        return fn(saved, grad_out)
    except KeyError as exc:
        raise UsageError(f"vjp({op!r}) missing saved context entry {exc}") from exc


for _name, _fn in [
    ("conv2d", _conv2d_vjp),
    ("depthwise_conv2d", _depthwise_conv2d_vjp),
    ("batchnorm", _batchnorm_vjp),
    ("relu6", _relu6_vjp),
    ("relu", _relu_vjp),
    ("sigmoid", _sigmoid_vjp),
    ("bilinear_upsample_x2", _bilinear_upsample_x2_vjp),
    ("concat_channels", _concat_channels_vjp),
    ("add_residual", _add_residual_vjp),
]:
    register_vjp(_name, _fn)
