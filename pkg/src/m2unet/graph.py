"""The M2U-Net layer graph.

The network is a MobileNetV2-style encoder (expanding bottleneck blocks,
t=6) glued to a decoder of contracting bottleneck blocks (t=0.15 by
default) by parameter-free upsample-and-concatenate nodes, ending in a
1-channel sigmoid head.  The canonical layout is expressed as a flat row
table; build_m2unet() wires the skip connections by tapping the last
feature map produced at each encoder resolution, plus the normalized
input image for the final upconcat.

Everything spatial is fully convolutional: one graph instance runs any
input whose height and width are multiples of 16, and parameter counts
are independent of resolution.  The canonical graph carries exactly
549,748 trainable parameters; param_count() audits this per row.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeMismatchError, UsageError
from .tensor import BatchNormParams, ConvWeights, CostTally, Tensor

CANONICAL_PARAM_TOTAL = 549_748
DECODER_T_DEFAULT = 0.15
INPUT_CHANNELS = 3
SIZE_MULTIPLE = 16

ROW_KINDS = ("conv", "dwisesep", "bottleneck", "resbottleneck", "upconcat",
             "sigmoid")
ACTIVATIONS = {"relu6": ops.relu6, "relu": ops.relu}

# row index meaning "the normalized input image" when used as a skip source
INPUT_SOURCE = -1


def hidden_width(t: float, c_in: int) -> int:
    """Bottleneck hidden channel count: t*c_in rounded half-up, minimum 1."""
    if t <= 0:
        raise UsageError(f"expansion factor must be positive, got {t}")
    if c_in < 1:
        raise UsageError(f"channel count must be >= 1, got {c_in}")
    return max(1, int(math.floor(t * c_in + 0.5)))


@dataclass
class BottleneckSpec:
    """One bottleneck block: 1x1 expand, 3x3 depthwise, 1x1 project."""

    t: float
    c_in: int
    c_out: int
    stride: int = 1
    residual: bool = False
    act: str = "relu6"

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"bottleneck stride must be 1 or 2, got {self.stride}")
        if self.residual and (self.stride != 1 or self.c_in != self.c_out):
            raise ConfigError(
                "residual bottlenecks need stride 1 and c_in == c_out "
                f"(got stride={self.stride}, {self.c_in}->{self.c_out})"
            )
        if self.act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.act!r}")
        self.hidden = hidden_width(self.t, self.c_in)


@dataclass
class LayerSpec:
    """One row of the layer table: operator kind with t/c/n/s fields."""

    kind: str
    t: float | None = None
    c: int | None = None
    n: int = 1
    s: int = 1
    skip_source: int | None = None

    def __post_init__(self):
        if self.kind not in ROW_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.n < 1:
            raise ConfigError(f"repeat count must be >= 1, got {self.n}")
        if self.s not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.s}")
        if self.kind == "upconcat" and self.skip_source is None:
            raise ConfigError("upconcat rows need a skip_source")


# =============================================================================
# Blocks
# =============================================================================


def _acc(grads: dict, key: str, val: np.ndarray) -> None:
    grads[key] = grads[key] + val if key in grads else val


class ConvUnit:
    """Convolution (full or depthwise) + batch norm + optional activation.

    The building block every parametric layer reduces to.  Weights start
    at zero with identity batch norm, so a freshly built graph computes
    the all-zero feature map (and the final sigmoid yields 0.5).
    """

    def __init__(self, name, c_in, c_out, k, stride=1, padding=0,
                 depthwise=False, act=None, dtype=np.float32):
        if depthwise and c_out != c_in:
            raise ConfigError("depthwise unit cannot change channel count")
        if act is not None and act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.depthwise = depthwise
        self.act = act
        kshape = (c_out, 1 if depthwise else c_in, k, k)
        self.conv = ConvWeights(kernel=np.zeros(kshape, dtype=dtype),
                                groups=c_in if depthwise else 1,
                                stride=stride, padding=padding)
        self.bn = BatchNormParams.identity(c_out, dtype=dtype)
        self._cache = None

    @property
    def conv_op(self) -> str:
        return "depthwise_conv2d" if self.depthwise else "conv2d"

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if self.depthwise:
            pre = ops.depthwise_conv2d(x, self.conv)
        else:
            pre = ops.conv2d(x, self.conv)
        mode = "train" if train else "infer"
        normed = ops.batchnorm(pre, self.bn, mode)
        y = ACTIVATIONS[self.act](normed) if self.act else normed
        if train:
            self._cache = (x, pre, normed, mode)
        return y

    def backward(self, gy: Tensor, grads: dict) -> Tensor:
        if self._cache is None:
            raise UsageError(f"{self.name}: backward before train-mode forward")
        x, pre, normed, mode = self._cache
        if self.act:
            gy = ops.vjp(self.act, {"x": normed}, gy)["x"]
        g_bn = ops.vjp("batchnorm", {"x": pre, "p": self.bn, "mode": mode}, gy)
        _acc(grads, f"{self.name}.bn.gamma", g_bn["gamma"])
        _acc(grads, f"{self.name}.bn.beta", g_bn["beta"])
        g_cv = ops.vjp(self.conv_op, {"x": x, "w": self.conv}, g_bn["x"])
        _acc(grads, f"{self.name}.kernel", g_cv["kernel"])
        return g_cv["x"]

    def cost(self, h: int, w: int) -> tuple[CostTally, int, int]:
        shape = (1, self.c_in, h, w)
        if self.depthwise:
            tally = ops.depthwise_conv2d_cost(shape, self.conv)
        else:
            tally = ops.conv2d_cost(shape, self.conv)
        tally += ops.batchnorm_cost(self.c_out)
        h2, w2 = ops.conv_output_hw(h, w, self.conv.ksize, self.conv.stride,
                                    self.conv.padding)
        return tally, h2, w2

    def named_params(self):
        yield f"{self.name}.kernel", self.conv.kernel
        yield f"{self.name}.bn.gamma", self.bn.gamma
        yield f"{self.name}.bn.beta", self.bn.beta

    def named_state(self):
        yield f"{self.name}.bn.running_mean", self.bn.running_mean
        yield f"{self.name}.bn.running_var", self.bn.running_var

    def astype(self, dtype):
        self.conv = self.conv.astype(dtype)
        self.bn = self.bn.astype(dtype)
        return self


class _UnitChain:
    """Shared plumbing for blocks that are a straight line of ConvUnits."""

    units: list[ConvUnit]

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        for u in self.units:
            x = u.forward(x, train)
        return x

    def backward(self, gy: Tensor, grads: dict) -> Tensor:
        for u in reversed(self.units):
            gy = u.backward(gy, grads)
        return gy

    def cost(self, h: int, w: int) -> tuple[CostTally, int, int]:
        total = CostTally(0, 0)
        for u in self.units:
            tally, h, w = u.cost(h, w)
            total += tally
        return total, h, w

    def named_params(self):
        for u in self.units:
            yield from u.named_params()

    def named_state(self):
        for u in self.units:
            yield from u.named_state()

    def astype(self, dtype):
        for u in self.units:
            u.astype(dtype)
        return self

    @property
    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.named_params())


class StemConv(_UnitChain):
    """Initial full 3x3 convolution, stride 2."""

    def __init__(self, name, c_in, c_out, stride=2, act="relu6",
                 dtype=np.float32):
        self.name = name
        self.units = [ConvUnit(f"{name}.conv", c_in, c_out, k=3, stride=stride,
                               padding=1, act=act, dtype=dtype)]


class DepthwiseSeparable(_UnitChain):
    """3x3 depthwise + activation, then a linear 1x1 projection."""

    def __init__(self, name, c_in, c_out, stride=1, act="relu6",
                 dtype=np.float32):
        self.name = name
        self.units = [
            ConvUnit(f"{name}.dw", c_in, c_in, k=3, stride=stride, padding=1,
                     depthwise=True, act=act, dtype=dtype),
            ConvUnit(f"{name}.pw", c_in, c_out, k=1, dtype=dtype),
        ]


class Bottleneck(_UnitChain):
    """Expand 1x1 -> depthwise 3x3 (stride s) -> project 1x1 (linear).

    t > 1 widens the hidden layer (encoder), t < 1 contracts it (decoder).
    The residual shortcut is only legal at stride 1 with unchanged channel
    count and is controlled by the spec.
    """

    def __init__(self, name, spec: BottleneckSpec, dtype=np.float32):
        self.name = name
        self.spec = spec
        h = spec.hidden
        self.units = [
            ConvUnit(f"{name}.expand", spec.c_in, h, k=1, act=spec.act,
                     dtype=dtype),
            ConvUnit(f"{name}.dw", h, h, k=3, stride=spec.stride, padding=1,
                     depthwise=True, act=spec.act, dtype=dtype),
            ConvUnit(f"{name}.project", h, spec.c_out, k=1, dtype=dtype),
        ]

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if x.shape[1] != self.spec.c_in:
            raise ShapeMismatchError(
                f"{self.name}: expected {self.spec.c_in} input channels, "
                f"got {x.shape[1]}"
            )
        y = _UnitChain.forward(self, x, train)
        if self.spec.residual:
            y = ops.add_residual(y, x)
        return y

    def backward(self, gy: Tensor, grads: dict) -> Tensor:
        gx = _UnitChain.backward(self, gy, grads)
        if self.spec.residual:
            gx = Tensor(gx.data + gy.data)
        return gx


class UpConcat:
    """x2 bilinear upsampling of the deep path, concatenated with a skip.

    Zero parameters; the skip tensor keeps its channels after the deep
    channels.
    """

    def __init__(self, name):
        self.name = name
        self._cache = None

    def forward(self, x: Tensor, skip: Tensor, train: bool = False) -> Tensor:
        if (skip.shape[2], skip.shape[3]) != (2 * x.shape[2], 2 * x.shape[3]):
            raise ShapeMismatchError(
                f"{self.name}: skip spatial size {skip.shape[2:]} is not "
                f"twice the deep path's {x.shape[2:]}"
            )
        up = ops.bilinear_upsample_x2(x)
        y = ops.concat_channels(up, skip)
        if train:
            self._cache = (x, up)
        return y

    def backward(self, gy: Tensor) -> tuple[Tensor, Tensor]:
        if self._cache is None:
            raise UsageError(f"{self.name}: backward before train-mode forward")
        x, up = self._cache
        g = ops.vjp("concat_channels", {"a": up}, gy)
        gx = ops.vjp("bilinear_upsample_x2", {"x": x}, g["a"])["x"]
        return gx, g["b"]


class SigmoidHead:
    """Elementwise sigmoid turning logits into probabilities."""

    def __init__(self, name):
        self.name = name
        self._cache = None

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if train:
            self._cache = x
        return ops.sigmoid(x)

    def backward(self, gy: Tensor) -> Tensor:
        if self._cache is None:
            raise UsageError(f"{self.name}: backward before train-mode forward")
        return ops.vjp("sigmoid", {"x": self._cache}, gy)["x"]


def upconcat(x: Tensor, skip: Tensor) -> Tensor:
    """Standalone upsample-and-concatenate (the graph nodes wrap this)."""
    return UpConcat("upconcat").forward(x, skip)


# =============================================================================
# Graph
# =============================================================================


class ModelGraph:
    """An ordered row list bound to instantiated blocks and their weights.

    Rows are LayerSpecs; each parametric row expands to `n` blocks.  Skip
    sources refer to producing row indices (INPUT_SOURCE for the image
    itself) and are consumed by upconcat rows.
    """

    def __init__(self, rows: list[LayerSpec], input_shape: tuple,
                 act: str = "relu6", dtype=np.float32):
        if len(input_shape) != 3:
            raise ConfigError(f"input_shape must be (c, h, w), got {input_shape}")
        self.rows = list(rows)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.act = act
        self.dtype = np.dtype(dtype)
        self.blocks: list[list] = []
        self._row_c_in: list[int] = []
        self._wire(act, dtype)
        self._tap_rows = {r.skip_source for r in self.rows
                          if r.kind == "upconcat"}

    def _skip_channels(self, source: int) -> int:
        if source == INPUT_SOURCE:
            return self.input_shape[0]
        if not 0 <= source < len(self.rows):
            raise ConfigError(f"skip source row {source} out of range")
        c = self.rows[source].c
        if c is None:
            raise ConfigError(f"skip source row {source} has no channel count")
        return c

    def _wire(self, act, dtype):
        c_cur = self.input_shape[0]
        for i, row in enumerate(self.rows):
            self._row_c_in.append(c_cur)
            name = f"{'enc' if self._is_encoder(i) else 'dec'}{i:02d}_{row.kind}"
            if row.kind == "conv":
                group = [StemConv(name, c_cur, row.c, stride=row.s, act=act,
                                  dtype=dtype)]
                c_cur = row.c
            elif row.kind == "dwisesep":
                group = [DepthwiseSeparable(name, c_cur, row.c, stride=row.s,
                                            act=act, dtype=dtype)]
                c_cur = row.c
            elif row.kind in ("bottleneck", "resbottleneck"):
                residual = row.kind == "resbottleneck"
                group = []
                for j in range(row.n):
                    spec = BottleneckSpec(
                        t=row.t, c_in=c_cur, c_out=row.c,
                        stride=row.s if j == 0 else 1,
                        residual=residual, act=act)
                    suffix = f".{j}" if row.n > 1 else ""
                    group.append(Bottleneck(f"{name}{suffix}", spec, dtype))
                    c_cur = row.c
            elif row.kind == "upconcat":
                c_skip = self._skip_channels(row.skip_source)
                group = [UpConcat(name)]
                c_cur = c_cur + c_skip
                if row.c is not None and row.c != c_cur:
                    raise ConfigError(
                        f"row {i}: upconcat output has {c_cur} channels, "
                        f"table says {row.c}")
                row.c = c_cur
            elif row.kind == "sigmoid":
                group = [SigmoidHead(name)]
            self.blocks.append(group)

    def _is_encoder(self, row_idx: int) -> bool:
        # everything before the first upconcat is encoder
        for r in self.rows[:row_idx + 1]:
            if r.kind == "upconcat":
                return False
        return True

    # ---- parameter access -------------------------------------------------

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for group in self.blocks:
            for b in group:
                if hasattr(b, "named_params"):
                    for name, arr in b.named_params():
                        out[name] = arr
        return out

    def named_state(self) -> dict[str, np.ndarray]:
        out = {}
        for group in self.blocks:
            for b in group:
                if hasattr(b, "named_state"):
                    for name, arr in b.named_state():
                        out[name] = arr
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        """Install a parameter or running statistic in place, shape-checked."""
        stores = self.named_params()
        stores.update(self.named_state())
        if name not in stores:
            raise ConfigError(f"graph has no tensor named {name!r}")
        dst = stores[name]
        if tuple(dst.shape) != tuple(value.shape):
            raise ConfigError(
                f"tensor {name!r}: expected shape {tuple(dst.shape)}, "
                f"file has {tuple(value.shape)}")
        dst[...] = value

    def astype(self, dtype):
        """Convert every parameter and running statistic (used by 64-bit
        gradient checking); returns self."""
        self.dtype = np.dtype(dtype)
        for group in self.blocks:
            for b in group:
                if hasattr(b, "astype"):
                    b.astype(dtype)
        return self

    # ---- forward / backward ------------------------------------------------

    def forward(self, image: Tensor, train: bool = False) -> Tensor:
        if image.shape[1] != self.input_shape[0]:
            raise ShapeMismatchError(
                f"graph expects {self.input_shape[0]} input channels, "
                f"got {image.shape[1]}")
        if image.shape[2] % SIZE_MULTIPLE or image.shape[3] % SIZE_MULTIPLE:
            raise ConfigError(
                f"input height and width must be multiples of {SIZE_MULTIPLE}, "
                f"got {image.shape[2]}x{image.shape[3]}")
        taps = {INPUT_SOURCE: image} if INPUT_SOURCE in self._tap_rows else {}
        x = image
        for i, (row, group) in enumerate(zip(self.rows, self.blocks)):
            if row.kind == "upconcat":
                x = group[0].forward(x, taps[row.skip_source], train)
            else:
                for b in group:
                    x = b.forward(x, train)
            if i in self._tap_rows:
                taps[i] = x
        return x

    def backward(self, grad_out: Tensor) -> tuple[dict[str, np.ndarray], Tensor]:
        """Backprop a gradient w.r.t. the graph output.

        Returns (parameter gradients keyed like named_params, gradient
        w.r.t. the input image).  Requires a preceding forward(train=True).
        """
        grads: dict[str, np.ndarray] = {}
        pending: dict[int, Tensor] = {len(self.rows) - 1: grad_out}

        def _route(idx: int, g: Tensor) -> None:
            if idx in pending:
                pending[idx] = Tensor(pending[idx].data + g.data)
            else:
                pending[idx] = g

        for i in range(len(self.rows) - 1, -1, -1):
            if i not in pending:
                raise UsageError(f"row {i} received no gradient; forward "
                                 "pass inconsistent with backward")
            g = pending.pop(i)
            row, group = self.rows[i], self.blocks[i]
            if row.kind == "upconcat":
                gx, gskip = group[0].backward(g)
                _route(row.skip_source, gskip)
            elif row.kind == "sigmoid":
                gx = group[0].backward(g)
            else:
                gx = g
                for b in reversed(group):
                    gx = b.backward(gx, grads)
            _route(i - 1, gx)
        return grads, pending.pop(INPUT_SOURCE)

    # ---- accounting ---------------------------------------------------------

    def param_count(self) -> tuple[list[int], int]:
        """Per-row trainable parameter counts and their total."""
        per_row = []
        for group in self.blocks:
            per_row.append(sum(getattr(b, "param_count", 0) for b in group))
        return per_row, sum(per_row)

    def row_costs(self, hw: tuple[int, int] | None = None) -> list[dict]:
        """Per-row report: input shape, operator fields, params, madds."""
        h, w = hw if hw is not None else self.input_shape[1:]
        c_cur = self.input_shape[0]
        report = []
        for i, (row, group) in enumerate(zip(self.rows, self.blocks)):
            entry = {"row": i, "kind": row.kind, "t": row.t, "c": row.c,
                     "n": row.n, "s": row.s,
                     "in_shape": (c_cur, h, w)}
            tally = CostTally(0, 0)
            if row.kind == "upconcat":
                h, w = 2 * h, 2 * w
                c_cur = row.c
            elif row.kind == "sigmoid":
                pass
            else:
                for b in group:
                    t2, h, w = b.cost(h, w)
                    tally += t2
                c_cur = row.c
            entry["params"] = tally.params
            entry["madds"] = tally.madds
            entry["out_shape"] = (c_cur, h, w)
            report.append(entry)
        return report

    def madds_count(self, hw: tuple[int, int] | None = None) -> int:
        """Multiply-accumulate count of one forward pass (one MAC = 1)."""
        return sum(e["madds"] for e in self.row_costs(hw))

    # ---- identity ------------------------------------------------------------

    def config_signature(self) -> dict:
        sig_rows = [[r.kind, None if r.t is None else float(r.t), r.c, r.n,
                     r.s, r.skip_source] for r in self.rows]
        return {
            "rows": sig_rows,
            "input_channels": self.input_shape[0],
            "act": self.act,
        }

    def arch_hash(self) -> str:
        blob = json.dumps(self.config_signature(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


# =============================================================================
# Canonical layout
# =============================================================================


def m2u_rows(t_decoder: float = DECODER_T_DEFAULT) -> list[LayerSpec]:
    """The 19 canonical rows, decoder contraction factor configurable."""
    enc = [
        LayerSpec("conv", c=32, s=2),
        LayerSpec("dwisesep", t=1, c=16),
        LayerSpec("bottleneck", t=6, c=24, s=2),
        LayerSpec("resbottleneck", t=6, c=24),
        LayerSpec("bottleneck", t=6, c=32, s=2),
        LayerSpec("resbottleneck", t=6, c=32, n=2),
        LayerSpec("bottleneck", t=6, c=64, s=2),
        LayerSpec("resbottleneck", t=6, c=64, n=3),
        LayerSpec("bottleneck", t=6, c=96),
        LayerSpec("resbottleneck", t=6, c=96, n=2),
    ]
    # tap the last feature map at each resolution, i.e. the row just before
    # every stride-2 operator; the image itself backs the first stride
    taps = [i - 1 for i, r in enumerate(enc) if r.s == 2]
    rows = list(enc)
    for c_out in (64, 44, 30, 1):
        rows.append(LayerSpec("upconcat", skip_source=taps.pop()))
        rows.append(LayerSpec("bottleneck", t=t_decoder, c=c_out))
    rows.append(LayerSpec("sigmoid", c=1))
    return rows


def build_m2unet(input_shape: tuple, t_decoder: float = DECODER_T_DEFAULT,
                 act: str = "relu6", dtype=np.float32) -> ModelGraph:
    """Builds the canonical graph for (h, w) or (3, h, w) input shapes."""
    if len(input_shape) == 2:
        input_shape = (INPUT_CHANNELS,) + tuple(input_shape)
    if len(input_shape) != 3 or input_shape[0] != INPUT_CHANNELS:
        raise ConfigError(
            f"expected a 3-channel (c, h, w) input shape, got {input_shape}")
    _, h, w = input_shape
    if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        raise ConfigError(
            f"input size {h}x{w} is not a multiple of {SIZE_MULTIPLE}")
    return ModelGraph(m2u_rows(t_decoder), input_shape, act=act, dtype=dtype)
