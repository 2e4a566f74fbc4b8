"""Dense 4-D tensor carrier and the small parameter/cost value types.

Everything the engine moves around is a `Tensor`: a (batch, channels,
height, width) array of 32-bit floats backed by numpy.  A 64-bit mode
exists solely for gradient checking; production paths stay in float32.

Design notes
------------
* Tensors are treated as immutable by every operator: ops allocate fresh
  outputs, which keeps them pure and safe for concurrent callers.
* After every operator the result must be finite; `check_finite` is the
  single guard used for that (NaN/Inf is an error state, not a value).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeMismatchError

FLOAT32 = np.float32
FLOAT64 = np.float64
_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A dense (n, c, h, w) array of real values.

    Thin wrapper over a numpy array that enforces rank 4 and a float32 /
    float64 dtype.  `data` is the raw array in row-major (n, c, h, w)
    order; `shape` mirrors `data.shape`.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeMismatchError(
                f"tensor must be 4-D (n, c, h, w), got shape {arr.shape}"
            )
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(FLOAT32)
        self.data = arr

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape: tuple[int, int, int, int], dtype=FLOAT32) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype))

    @staticmethod
    def full(shape: tuple[int, int, int, int], value: float, dtype=FLOAT32) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=dtype))

    @staticmethod
    def from_array(arr, dtype=FLOAT32) -> "Tensor":
        return Tensor(np.asarray(arr, dtype=dtype))

    # -- views ----------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def check_finite(arr: np.ndarray, what: str = "result") -> np.ndarray:
    """Raise NumericError unless every element of `arr` is finite.

    Uses a sum-reduction probe: the sum of an array is non-finite iff the
    array contains NaN/Inf (or overflowed, which is equally an error state).
    """
    if not np.isfinite(np.sum(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


@dataclass
class ConvWeights:
    """Convolution kernel plus its geometry.

    kernel has shape (c_out, c_in_per_group, k, k).  `groups == c_in` with
    `c_in_per_group == 1` is the depthwise case.  There is no bias term
    anywhere in this engine: batch norm supplies the shift, and the
    canonical parameter audit only holds without biases.
    """

    kernel: np.ndarray
    groups: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        k = np.asarray(self.kernel)
        if k.ndim != 4 or k.shape[2] != k.shape[3]:
            raise ShapeMismatchError(
                f"kernel must be (c_out, c_in_per_group, k, k), got {k.shape}"
            )
        if self.groups < 1 or k.shape[0] % self.groups != 0:
            raise ShapeMismatchError(
                f"c_out={k.shape[0]} not divisible into groups={self.groups}"
            )
        if self.stride not in (1, 2):
            raise ShapeMismatchError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ShapeMismatchError(f"padding must be >= 0, got {self.padding}")
        self.kernel = k

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1] * self.groups

    @property
    def c_in_per_group(self) -> int:
        return self.kernel.shape[1]

    @property
    def ksize(self) -> int:
        return self.kernel.shape[2]

    @property
    def param_count(self) -> int:
        return int(self.kernel.size)

    def astype(self, dtype) -> "ConvWeights":
        return ConvWeights(self.kernel.astype(dtype), self.groups, self.stride, self.padding)


@dataclass
class BatchNormParams:
    """Per-channel batch-norm state.

    gamma/beta are the learned scale/shift; running_mean/running_var are
    inference statistics.  `momentum` is the weight of the *new* batch
    statistic in the running update; running_var tracks the unbiased batch
    variance while normalization inside a training step uses the biased one.
    Only gamma and beta count as parameters (2 per channel).
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        vecs = [np.asarray(v) for v in
                (self.gamma, self.beta, self.running_mean, self.running_var)]
        c = vecs[0].shape
        if any(v.ndim != 1 or v.shape != c for v in vecs):
            raise ShapeMismatchError("batch-norm vectors must be 1-D with equal length")
        if np.any(vecs[3] < 0):
            raise NumericError("running_var must be >= 0 elementwise")
        if not (0.0 < self.momentum < 1.0):
            raise ShapeMismatchError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise NumericError(f"eps must be positive, got {self.eps}")
        self.gamma, self.beta, self.running_mean, self.running_var = vecs

    @staticmethod
    def identity(channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=FLOAT32) -> "BatchNormParams":
        return BatchNormParams(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def param_count(self) -> int:
        # gamma and beta only; running stats are buffers, not parameters
        return 2 * self.channels

    def astype(self, dtype) -> "BatchNormParams":
        return BatchNormParams(
            self.gamma.astype(dtype), self.beta.astype(dtype),
            self.running_mean.astype(dtype), self.running_var.astype(dtype),
            self.eps, self.momentum,
        )


@dataclass
class CostTally:
    """Additive multiply-accumulate / parameter account.

    One multiply-accumulate counts as one madd.  Tallies of composed
    operators add: cost(f o g) == cost(f) + cost(g).
    """

    madds: int = 0
    params: int = 0

    def __post_init__(self):
        if self.madds < 0 or self.params < 0:
            raise ValueError("cost tallies are non-negative")

    def __add__(self, other: "CostTally") -> "CostTally":
        return CostTally(self.madds + other.madds, self.params + other.params)

    def __iadd__(self, other: "CostTally") -> "CostTally":
        self.madds += other.madds
        self.params += other.params
        return self
