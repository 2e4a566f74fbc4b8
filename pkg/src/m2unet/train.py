"""Training loop: AdamW over the joint BCE + Jaccard loss.

Checkpoint selection keeps the epoch with the highest validation Dice at
threshold 0.5 (ties go to the earlier epoch); with no validation images
the final epoch wins.  A non-finite loss or gradient aborts the run and
returns the last good checkpoint instead of raising.

Reproducibility: the epoch shuffle draws from a Philox stream keyed by
(seed, epoch); each sample's augmentation stream is keyed by (seed,
epoch, position in the training list), validation samples continuing the
index range after the training ones.  Identical seeds and configs replay
the identical history up to 32-bit accumulation order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import losses, metrics
from .data import AugmentConfig, Sample, augment, sample_stream
from .errors import ConfigError, NumericError, UsageError
from .fileio import install_weights, load_weights
from .graph import Bottleneck, ModelGraph
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 0.001
    loss_weight: float = 0.3
    epochs: int = 300
    batch_size: int = 4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 0
    val_size: int = 2
    accumulate: int = 1    # micro-batches summed per optimizer step

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.accumulate < 1:
            raise ConfigError("batch size and accumulation must be >= 1")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive, weight_decay >= 0")

    def to_dict(self) -> dict:
        return {"lr": self.lr, "loss_weight": self.loss_weight,
                "epochs": self.epochs, "batch_size": self.batch_size,
                "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "seed": self.seed,
                "val_size": self.val_size, "accumulate": self.accumulate}


@dataclass
class AdamWState:
    """First/second moment estimates per parameter plus the step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def for_params(params: dict[str, np.ndarray]) -> "AdamWState":
        return AdamWState(m={k: np.zeros_like(a) for k, a in params.items()},
                          v={k: np.zeros_like(a) for k, a in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place:

        theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    for name in params:
        if name not in grads:
            raise UsageError(f"no gradient supplied for parameter {name!r}")
        if not np.isfinite(np.sum(grads[name])):
            raise NumericError(f"non-finite gradient for {name!r}")
    b1, b2 = cfg.betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name].astype(theta.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        theta[...] = theta - cfg.lr * (update + cfg.weight_decay * theta)


# =============================================================================
# Initialization
# =============================================================================


def init_weights(graph: ModelGraph, mode: str = "scratch",
                 source=None, seed: int = 0) -> ModelGraph:
    """Initialize parameters in place and return the graph.

    scratch: kernels drawn uniformly from +-1/sqrt(fan_in), identity batch
    norm except that residual bottlenecks start with a zeroed projection
    gamma so every shortcut block begins as the identity map; that keeps
    early running statistics close to the batch statistics and speeds up
    short runs.  pretrained-encoder: scratch everywhere, then the encoder
    tensors (``enc*``) are replaced from the weight file at `source`.
    """
    if mode not in ("scratch", "pretrained-encoder"):
        raise UsageError(f"unknown init mode {mode!r}")
    zeroed = {f"{block.name}.project.bn.gamma"
              for group in graph.blocks for block in group
              if isinstance(block, Bottleneck) and block.spec.residual}
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, 0xC0FFEE])))
    for name, arr in graph.named_params().items():
        if name.endswith(".kernel"):
            bound = 1.0 / math.sqrt(np.prod(arr.shape[1:]))
            arr[...] = rng.uniform(-bound, bound, arr.shape).astype(arr.dtype)
        elif name.endswith(".gamma"):
            arr[...] = 0.0 if name in zeroed else 1.0
        else:
            arr[...] = 0.0
    for name, arr in graph.named_state().items():
        arr[...] = 1.0 if name.endswith(".running_var") else 0.0
    if mode == "pretrained-encoder":
        if source is None:
            raise UsageError("pretrained-encoder mode needs a weight file")
        tensors, meta = load_weights(source)
        install_weights(graph, tensors, meta, encoder_only=True)
    return graph


# =============================================================================
# Loop
# =============================================================================


@dataclass
class TrainResult:
    best_epoch: int
    best_val_dice: float | None
    history: list[dict]
    checkpoint: dict[str, np.ndarray]
    aborted: bool = False


def _snapshot(graph: ModelGraph) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in
            {**graph.named_params(), **graph.named_state()}.items()}


def load_snapshot(graph: ModelGraph, snapshot: dict[str, np.ndarray]) -> None:
    for name, arr in snapshot.items():
        graph.set_tensor(name, arr)


def _batch(samples: list[Sample]) -> tuple[Tensor, np.ndarray]:
    x = Tensor(np.stack([s.image for s in samples]))
    y = np.stack([s.mask for s in samples])
    return x, y


def _val_dice(graph: ModelGraph, val: list[Sample]) -> float:
    scores = []
    for s in val:
        prob = graph.forward(Tensor(s.image[None])).data[0]
        c = metrics.confusion(prob, s.mask, threshold=0.5)
        scores.append(metrics.dice_score(c))
    return float(np.mean(scores))


def train(graph: ModelGraph, train_samples: list[Sample],
          val_samples: list[Sample], cfg: TrainConfig,
          aug: AugmentConfig | None = None) -> TrainResult:
    """Optimize the graph on prepared (cropped) samples.

    Augmentation applies to training and validation samples alike; pass
    ``AugmentConfig.disabled()`` to train on the raw samples.
    """
    if not train_samples:
        raise UsageError("no training samples")
    if aug is None:
        aug = AugmentConfig()
    params = graph.named_params()
    state = AdamWState.for_params(params)
    history: list[dict] = []
    best: tuple[float, int, dict] | None = None   # (dice, epoch, snapshot)
    last_good = _snapshot(graph)
    n_train = len(train_samples)

    for epoch in range(1, cfg.epochs + 1):
        shuffle_rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([cfg.seed, epoch])))
        order = shuffle_rng.permutation(n_train)
        epoch_losses = []
        try:
            step_grads: dict[str, np.ndarray] | None = None
            micro_count = 0
            for start in range(0, n_train, cfg.batch_size):
                chosen = order[start:start + cfg.batch_size]
                batch = [augment(train_samples[i], aug,
                                 sample_stream(aug.seed, epoch, int(i)))
                         for i in chosen]
                x, y = _batch(batch)
                prob = graph.forward(x, train=True)
                loss = losses.jbce_loss(prob.data, y, cfg.loss_weight)
                if not math.isfinite(loss):
                    raise NumericError(f"loss diverged at epoch {epoch}")
                epoch_losses.append(loss)
                g_flat = losses.jbce_loss_grad(prob.data, y, cfg.loss_weight)
                g_prob = Tensor(g_flat.reshape(prob.shape).astype(prob.dtype))
                grads, _ = graph.backward(g_prob)
                if step_grads is None:
                    step_grads = grads
                else:
                    for name in step_grads:
                        step_grads[name] += grads[name]
                micro_count += 1
                if micro_count == cfg.accumulate:
                    if cfg.accumulate > 1:
                        for name in step_grads:
                            step_grads[name] /= cfg.accumulate
                    adamw_step(params, step_grads, state, cfg)
                    step_grads, micro_count = None, 0
            if step_grads is not None:       # leftover micro-batches
                for name in step_grads:
                    step_grads[name] /= micro_count
                adamw_step(params, step_grads, state, cfg)
        except NumericError:
            if best is not None:
                dice, ep, snap = best
                return TrainResult(ep, dice, history, snap, aborted=True)
            return TrainResult(0, None, history, last_good, aborted=True)

        row = {"epoch": epoch, "loss": float(np.mean(epoch_losses)),
               "val_dice": None}
        if val_samples:
            val_aug = [augment(s, aug,
                               sample_stream(aug.seed, epoch, n_train + j))
                       for j, s in enumerate(val_samples)]
            vd = _val_dice(graph, val_aug)
            row["val_dice"] = vd
            if best is None or vd > best[0]:
                best = (vd, epoch, _snapshot(graph))
        history.append(row)
        last_good = _snapshot(graph)

    if best is not None:
        dice, ep, snap = best
        return TrainResult(ep, dice, history, snap)
    return TrainResult(cfg.epochs, None, history, last_good)


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "loss", "val_dice"])
        for row in history:
            vd = row["val_dice"]
            wr.writerow([row["epoch"], f"{row['loss']:.17g}",
                         "" if vd is None else f"{vd:.17g}"])
