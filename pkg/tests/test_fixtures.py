"""Replay of the committed golden fixtures through the engine.

Each file stores float32 inputs plus reference outputs computed in
float64 by an independent implementation and rounded once on write.  The
engine runs its normal float32 path on the stored bits; agreement within
1e-4 absolute, single-threaded, is the contract.  Most cases land far
below that (the slack covers float32 accumulation in the mini network).
"""

import csv

import numpy as np
import pytest

from m2unet import metrics, ops
from m2unet.data import AugmentConfig, Sample, augment, sample_stream
from m2unet.fileio import read_fixture
from m2unet.graph import LayerSpec, ModelGraph
from m2unet.tensor import BatchNormParams, ConvWeights, Tensor

from conftest import FIXTURE_DIR

TOL = 1e-4


def _load(name):
    return read_fixture(f"{FIXTURE_DIR}/{name}")


def _max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a, np.float64)
                               - np.asarray(b, np.float64))))


def test_conv_s2_fixture():
    fx = _load("conv_s2.bin")
    w = ConvWeights(fx["kernel"], stride=int(fx["stride"][0]),
                    padding=int(fx["padding"][0]))
    with ops.thread_limit(1):
        y = ops.conv2d(Tensor(fx["x"]), w)
    assert y.shape == fx["y"].shape
    assert _max_abs(y.data, fx["y"]) <= TOL


def test_dwconv_s2_fixture():
    fx = _load("dwconv_s2.bin")
    w = ConvWeights(fx["kernel"], groups=fx["kernel"].shape[0],
                    stride=int(fx["stride"][0]), padding=int(fx["padding"][0]))
    with ops.thread_limit(1):
        y = ops.depthwise_conv2d(Tensor(fx["x"]), w)
    assert _max_abs(y.data, fx["y"]) <= TOL


def test_bn_train_fixture():
    fx = _load("bn_train.bin")
    p = BatchNormParams(gamma=fx["gamma"], beta=fx["beta"],
                        running_mean=fx["running_mean"].copy(),
                        running_var=fx["running_var"].copy(),
                        eps=float(fx["eps"][0]),
                        momentum=float(fx["momentum"][0]))
    with ops.thread_limit(1):
        y = ops.batchnorm(Tensor(fx["x"]), p, "train")
    assert _max_abs(y.data, fx["y"]) <= TOL
    assert _max_abs(p.running_mean, fx["updated_mean"]) <= TOL
    assert _max_abs(p.running_var, fx["updated_var"]) <= TOL


def test_bilerp_fixture():
    fx = _load("bilerp.bin")
    with ops.thread_limit(1):
        y = ops.bilinear_upsample_x2(Tensor(fx["x"]))
    assert y.shape == fx["y"].shape
    assert _max_abs(y.data, fx["y"]) <= TOL


def test_sigmoid_fixture():
    fx = _load("sigmoid.bin")          # rank 3: wrap in a batch axis
    with ops.thread_limit(1):
        y = ops.sigmoid(Tensor(fx["x"][None]))
    assert _max_abs(y.data[0], fx["y"]) <= TOL
    # the planted saturation entries stay inside the open interval
    assert 0.0 < y.data.min() and y.data.max() < 1.0


def _mini_fixture_graph():
    rows = [
        LayerSpec("conv", c=8, s=2),
        LayerSpec("resbottleneck", t=2, c=8),
        LayerSpec("upconcat", skip_source=-1),
        LayerSpec("bottleneck", t=0.5, c=1),
        LayerSpec("sigmoid", c=1),
    ]
    return ModelGraph(rows, (3, 64, 64))


def test_m2u_mini_fixture():
    fx = _load("m2u_mini.bin")
    graph = _mini_fixture_graph()
    for name, arr in fx.items():
        if name in ("input", "output"):
            continue
        graph.set_tensor(name, arr)
    with ops.thread_limit(1):
        y = graph.forward(Tensor(fx["input"]))
    assert y.shape == fx["output"].shape
    assert _max_abs(y.data, fx["output"]) <= TOL


def test_m2u_mini_fixture_covers_every_graph_tensor():
    fx = _load("m2u_mini.bin")
    graph = _mini_fixture_graph()
    stored = set(fx) - {"input", "output"}
    needed = set(graph.named_params()) | set(graph.named_state())
    assert stored == needed


def test_augment_fixture_replays_bit_exact():
    fx = _load("aug_s42.bin")
    sample = Sample(fx["image"], fx["mask"], "aug_s42")
    out = augment(sample, AugmentConfig(), sample_stream(42, 0, 0))
    assert np.array_equal(out.mask, fx["aug_mask"])
    assert _max_abs(out.image, fx["aug_image"]) <= TOL
    assert _max_abs(out.image, fx["aug_image"]) == 0.0


def test_pr_fixture_matches_curve():
    with open(f"{FIXTURE_DIR}/pr.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 255

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([0, 7])))
    scores = rng.random(2000).astype(np.float32)
    labels = rng.random(2000) < 0.35
    points, _ = metrics.pr_curve(scores, labels, metrics.default_thresholds())
    for row, pt in zip(rows, points):
        assert float(row["threshold"]) == pt.threshold
        assert float(row["precision"]) == pt.precision
        assert float(row["recall"]) == pt.recall
        assert float(row["dice"]) == pt.dice
