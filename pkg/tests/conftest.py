"""Shared helpers: finite differences, miniature graphs, synthetic data."""

from __future__ import annotations

import numpy as np
import pytest

from m2unet.data import Sample
from m2unet.graph import LayerSpec, ModelGraph

FIXTURE_DIR = __file__.rsplit("/", 1)[0] + "/fixtures"


def fd_gradient(fn, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function at `arr` (64-bit)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = fn()
        flat[i] = keep - eps
        lo = fn()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray,
                floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def mini_rows() -> list[LayerSpec]:
    """Miniature two-bottleneck layout: one residual encoder block, one
    contracting decoder block, skip lifted from the input image."""
    return [LayerSpec("conv", c=4, s=2),
            LayerSpec("resbottleneck", t=2, c=4),
            LayerSpec("upconcat", skip_source=-1),
            LayerSpec("bottleneck", t=0.5, c=1),
            LayerSpec("sigmoid", c=1)]


def build_mini(hw=(16, 16), dtype=np.float64, seed: int = 0) -> ModelGraph:
    graph = ModelGraph(mini_rows(), (3,) + tuple(hw), dtype=dtype)
    rng = np.random.default_rng(seed)
    for name, arr in graph.named_params().items():
        if name.endswith(".kernel"):
            arr[...] = rng.normal(0.0, 0.4, arr.shape)
        elif name.endswith(".gamma"):
            arr[...] = rng.uniform(0.8, 1.2, arr.shape)
        else:
            arr[...] = rng.normal(0.0, 0.1, arr.shape)
    for name, arr in graph.named_state().items():
        if name.endswith(".running_var"):
            arr[...] = rng.uniform(0.6, 1.4, arr.shape)
        else:
            arr[...] = rng.normal(0.0, 0.1, arr.shape)
    return graph


def vessel_sample(size: int = 64, widths=(3.2, 4.0, 2.6), contrast: float = 0.8,
                  noise: float = 0.01, seed: int = 5) -> Sample:
    """Synthetic fundus-like tile: three dark sinusoidal vessels on a flat
    background with mild pixel noise."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    mask = np.zeros((size, size), bool)
    waves = [(6.0, 23.0, 3.0), (9.0, 37.0, 19.0), (5.0, 17.0, 40.0)]
    for k, (amp, period, phase) in enumerate(waves):
        center = (phase + (size - 2 * phase) * (k + 1) / 4
                  + amp * np.sin(xx / period * 2 * np.pi))
        mask |= np.abs(yy - center) <= widths[k]
    rng = np.random.default_rng(seed)
    img = np.stack([0.75 * (1.0 - contrast * mask)
                    + noise * rng.standard_normal((size, size))
                    for _ in range(3)])
    return Sample(np.clip(img, 0.0, 1.0).astype(np.float32),
                  mask[None].astype(np.float32), "synthetic")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
