"""Optimizer math, weight initialization, and the training loop contract."""

import csv
import math

import numpy as np
import pytest

from m2unet import losses
from m2unet.data import AugmentConfig, Sample
from m2unet.errors import ConfigError, NumericError, UsageError
from m2unet.fileio import save_weights
from m2unet.graph import ModelGraph, build_m2unet
from m2unet.train import (AdamWState, TrainConfig, adamw_step, init_weights,
                          load_snapshot, train, write_history_csv)

from conftest import build_mini, mini_rows


def _toy_samples(n, hw=(16, 16), seed=0):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = r.uniform(0, 1, (3,) + hw).astype(np.float32)
        mask = (r.random((1,) + hw) < 0.3).astype(np.float32)
        out.append(Sample(img, mask, f"toy{i}"))
    return out


def _fast_cfg(**kw):
    base = dict(lr=0.01, epochs=2, batch_size=2, val_size=0, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# =============================================================================
# TrainConfig
# =============================================================================


def test_train_config_defaults():
    cfg = TrainConfig()
    assert cfg.lr == 0.001
    assert cfg.loss_weight == 0.3
    assert cfg.betas == (0.9, 0.999)
    assert cfg.weight_decay == 1e-2


def test_train_config_validation():
    TrainConfig(lr=0.0)                      # explicit no-op runs are legal
    for bad in (dict(lr=-1e-3), dict(epochs=0), dict(batch_size=0),
                dict(accumulate=0), dict(betas=(1.0, 0.999)),
                dict(betas=(0.9, -0.1)), dict(eps=0.0),
                dict(weight_decay=-0.1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_train_config_to_dict_round_trips():
    cfg = TrainConfig(lr=0.02, betas=(0.5, 0.9), val_size=3)
    d = cfg.to_dict()
    assert d["betas"] == [0.5, 0.9]
    rebuilt = TrainConfig(**{**d, "betas": tuple(d["betas"])})
    assert rebuilt == cfg


# =============================================================================
# AdamW
# =============================================================================


def test_adamw_two_steps_match_hand_calculation():
    cfg = TrainConfig(lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    params = {"w": np.array([1.0])}
    state = AdamWState.for_params(params)
    m = v = 0.0
    theta = 1.0
    for t in (1, 2):
        g = 0.5
        adamw_step(params, {"w": np.array([g])}, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9 ** t)
        v_hat = v / (1 - 0.999 ** t)
        theta = theta - 0.1 * (m_hat / (math.sqrt(v_hat) + 1e-8) + 0.01 * theta)
        assert params["w"][0] == pytest.approx(theta, rel=1e-14)
    assert state.t == 2


def test_adamw_weight_decay_is_decoupled():
    # zero gradient leaves the Adam term at zero, so only decay acts
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    params = {"w": np.array([2.0, -4.0])}
    state = AdamWState.for_params(params)
    adamw_step(params, {"w": np.zeros(2)}, state, cfg)
    assert np.allclose(params["w"], [2.0 * 0.95, -4.0 * 0.95], rtol=1e-14)


def test_adamw_rejects_bad_gradients():
    cfg = TrainConfig()
    params = {"a": np.ones(3), "b": np.ones(3)}
    state = AdamWState.for_params(params)
    with pytest.raises(UsageError):
        adamw_step(params, {"a": np.zeros(3)}, state, cfg)
    bad = {"a": np.zeros(3), "b": np.array([1.0, np.nan, 0.0])}
    with pytest.raises(NumericError):
        adamw_step(params, bad, state, cfg)
    # validation runs before any write, so the failed step left no trace
    assert np.all(params["a"] == 1.0) and np.all(params["b"] == 1.0)
    assert state.t == 0


def test_adamw_descends_a_quadratic():
    cfg = TrainConfig(lr=0.05, weight_decay=0.0)
    target = np.array([3.0, -1.0, 0.5])
    params = {"w": np.zeros(3)}
    state = AdamWState.for_params(params)

    def loss():
        return float(np.sum((params["w"] - target) ** 2))

    start = loss()
    for _ in range(200):
        adamw_step(params, {"w": 2 * (params["w"] - target)}, state, cfg)
    assert loss() < 1e-2 * start


# =============================================================================
# Initialization
# =============================================================================


def test_init_weights_is_seeded():
    a = init_weights(ModelGraph(mini_rows(), (3, 16, 16)), seed=3)
    b = init_weights(ModelGraph(mini_rows(), (3, 16, 16)), seed=3)
    for name, arr in a.named_params().items():
        assert np.array_equal(arr, b.named_params()[name]), name
    c = init_weights(ModelGraph(mini_rows(), (3, 16, 16)), seed=4)
    assert not np.array_equal(a.named_params()["enc00_conv.conv.kernel"],
                              c.named_params()["enc00_conv.conv.kernel"])


def test_init_weights_kernel_bounds_and_norm_state():
    g = init_weights(build_m2unet((64, 64)), seed=0)
    for name, arr in g.named_params().items():
        if name.endswith(".kernel"):
            bound = 1.0 / math.sqrt(np.prod(arr.shape[1:]))
            assert np.abs(arr).max() <= bound, name
            assert arr.std() > 0.0, name
        elif name.endswith(".beta"):
            assert np.all(arr == 0.0), name
    for name, arr in g.named_state().items():
        want = 1.0 if name.endswith(".running_var") else 0.0
        assert np.all(arr == want), name


def test_init_weights_zeroes_residual_projection_gamma():
    g = init_weights(build_m2unet((64, 64)), seed=0)
    for name, arr in g.named_params().items():
        if not name.endswith(".gamma"):
            continue
        if "resbottleneck" in name and ".project." in name:
            assert np.all(arr == 0.0), name
        else:
            assert np.all(arr == 1.0), name


def test_init_weights_mode_errors():
    g = ModelGraph(mini_rows(), (3, 16, 16))
    with pytest.raises(UsageError):
        init_weights(g, mode="magic")
    with pytest.raises(UsageError):
        init_weights(g, mode="pretrained-encoder")


def test_pretrained_encoder_mixes_donor_and_scratch(tmp_path):
    donor = init_weights(ModelGraph(mini_rows(), (3, 16, 16)), seed=1)
    path = tmp_path / "donor.m2u"
    save_weights(donor, path)

    mixed = init_weights(ModelGraph(mini_rows(), (3, 16, 16)),
                         mode="pretrained-encoder", source=path, seed=2)
    scratch = init_weights(ModelGraph(mini_rows(), (3, 16, 16)), seed=2)

    donor_p = donor.named_params()
    scratch_p = scratch.named_params()
    for name, arr in mixed.named_params().items():
        if name.startswith("enc"):
            assert np.array_equal(arr, donor_p[name]), name
        else:
            assert np.array_equal(arr, scratch_p[name]), name
    assert not np.array_equal(mixed.named_params()["enc00_conv.conv.kernel"],
                              scratch_p["enc00_conv.conv.kernel"])


# =============================================================================
# Training loop
# =============================================================================


def test_train_requires_samples():
    g = init_weights(build_mini((16, 16)), seed=0)
    with pytest.raises(UsageError):
        train(g, [], [], _fast_cfg())


def test_train_checkpoint_is_first_validation_argmax():
    g = init_weights(build_mini((16, 16)), seed=0)
    samples = _toy_samples(4)
    res = train(g, samples[:3], samples[3:], _fast_cfg(epochs=4),
                aug=AugmentConfig.disabled())
    vds = [row["val_dice"] for row in res.history]
    assert len(vds) == 4 and all(v is not None for v in vds)
    assert res.best_val_dice == max(vds)
    assert res.best_epoch == vds.index(max(vds)) + 1
    assert not res.aborted
    assert set(res.checkpoint) == set(g.named_params()) | set(g.named_state())


def test_train_is_reproducible():
    def run():
        g = init_weights(build_mini((16, 16)), seed=5)
        return train(g, _toy_samples(4)[:3], _toy_samples(4)[3:],
                     _fast_cfg(epochs=2), aug=AugmentConfig())
    a, b = run(), run()
    assert a.history == b.history
    for name in a.checkpoint:
        assert np.array_equal(a.checkpoint[name], b.checkpoint[name]), name


def test_train_with_accumulation_handles_leftover():
    g = init_weights(build_mini((16, 16)), seed=0)
    res = train(g, _toy_samples(3), [], _fast_cfg(epochs=1, batch_size=1,
                                                  accumulate=2),
                aug=AugmentConfig.disabled())
    assert len(res.history) == 1
    assert math.isfinite(res.history[0]["loss"])
    assert res.best_val_dice is None
    assert res.best_epoch == 1                # no validation: final epoch


def test_train_aborts_to_last_good_checkpoint(monkeypatch):
    g = init_weights(build_mini((16, 16)), seed=0)
    before = {k: v.copy() for k, v in
              {**g.named_params(), **g.named_state()}.items()}
    # the loop reads the function through the losses module, so patching
    # the module attribute reaches it
    monkeypatch.setattr(losses, "jbce_loss", lambda *a, **k: float("nan"))
    res = train(g, _toy_samples(2), [], _fast_cfg(epochs=3),
                aug=AugmentConfig.disabled())
    assert res.aborted
    assert res.best_epoch == 0 and res.best_val_dice is None
    assert res.history == []
    for name, arr in before.items():
        assert np.array_equal(res.checkpoint[name], arr), name


def test_train_abort_mid_run_keeps_best_epoch(monkeypatch):
    real = losses.jbce_loss
    calls = {"n": 0}

    def flaky(pred, gt, w=losses.DEFAULT_JACCARD_WEIGHT):
        calls["n"] += 1
        if calls["n"] > 2:
            return float("nan")
        return real(pred, gt, w)

    g = init_weights(build_mini((16, 16)), seed=0)
    samples = _toy_samples(4)
    monkeypatch.setattr(losses, "jbce_loss", flaky)
    res = train(g, samples[:2], samples[2:3], _fast_cfg(epochs=5),
                aug=AugmentConfig.disabled())
    assert res.aborted
    assert len(res.history) == 2              # two clean epochs, then the bang
    assert res.best_epoch in (1, 2)
    assert res.best_val_dice == max(r["val_dice"] for r in res.history)


def test_load_snapshot_round_trips():
    g = init_weights(build_mini((16, 16)), seed=1)
    snap = {k: v.copy() for k, v in
            {**g.named_params(), **g.named_state()}.items()}
    for arr in g.named_params().values():
        arr += 1.0
    load_snapshot(g, snap)
    for name, arr in {**g.named_params(), **g.named_state()}.items():
        assert np.array_equal(arr, snap[name]), name


def test_write_history_csv(tmp_path):
    path = tmp_path / "history.csv"
    write_history_csv(path, [
        {"epoch": 1, "loss": 0.75, "val_dice": 0.25},
        {"epoch": 2, "loss": 0.5, "val_dice": None},
    ])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "loss", "val_dice"]
    assert rows[1] == ["1", "0.75", "0.25"]
    assert rows[2] == ["2", "0.5", ""]
