"""Golden fixture generator.

Every case owns a Philox stream keyed [seed, case-number], so cases are
independent of each other and of the draw count inside any other case;
regenerating with the same seed is byte-identical.  Inputs are quantized
to float32 before the reference computes on them (the engine sees exactly
the stored bits); outputs are computed in float64 and rounded once on
write.  The draw order inside each case is frozen: changing it would
silently invalidate every committed fixture.

The augmentation case replays the engine's documented per-sample stream
[42, epoch 0, index 0] on a sample drawn from stream [42, 100], matching
the name `aug_s42.bin`.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from . import augment, reference
from .m2uf import write_m2uf
from .table1 import hidden


def _stream(seed: int, case: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, case])))


def _f32(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32)


# ---------------------------------------------------------------------------
# individual cases
# ---------------------------------------------------------------------------


def _case_conv_s2(seed: int) -> list[tuple[str, np.ndarray]]:
    rng = _stream(seed, 1)
    x = _f32(rng.uniform(-1.0, 1.0, (2, 3, 11, 9)))
    kernel = _f32(rng.normal(0.0, 0.3, (5, 3, 3, 3)))
    y = reference.conv2d(x, kernel, stride=2, padding=1)
    return [("x", x), ("kernel", kernel), ("stride", np.array([2.0])),
            ("padding", np.array([1.0])), ("y", _f32(y))]


def _case_dwconv_s2(seed: int) -> list[tuple[str, np.ndarray]]:
    rng = _stream(seed, 2)
    x = _f32(rng.uniform(-1.0, 1.0, (1, 4, 10, 10)))
    kernel = _f32(rng.normal(0.0, 0.3, (4, 1, 3, 3)))
    y = reference.depthwise_conv2d(x, kernel, stride=2, padding=1)
    return [("x", x), ("kernel", kernel), ("stride", np.array([2.0])),
            ("padding", np.array([1.0])), ("y", _f32(y))]


def _case_bn_train(seed: int) -> list[tuple[str, np.ndarray]]:
    rng = _stream(seed, 3)
    x = _f32(0.3 + 1.5 * rng.normal(0.0, 1.0, (4, 6, 8, 8)))
    gamma = _f32(rng.uniform(0.5, 1.5, 6))
    beta = _f32(rng.normal(0.0, 0.2, 6))
    r_mean = _f32(rng.normal(0.0, 0.2, 6))
    r_var = _f32(rng.uniform(0.5, 1.5, 6))
    y, up_mean, up_var = reference.batchnorm_train(
        x, gamma, beta, r_mean, r_var, eps=1e-5, momentum=0.1)
    return [("x", x), ("gamma", gamma), ("beta", beta),
            ("running_mean", r_mean), ("running_var", r_var),
            ("eps", np.array([1e-5])), ("momentum", np.array([0.1])),
            ("y", _f32(y)), ("updated_mean", _f32(up_mean)),
            ("updated_var", _f32(up_var))]


def _case_bilerp(seed: int) -> list[tuple[str, np.ndarray]]:
    rng = _stream(seed, 4)
    x = _f32(rng.uniform(-1.0, 1.0, (1, 5, 7, 9)))
    return [("x", x), ("y", _f32(reference.upsample_x2(x)))]


def _case_sigmoid(seed: int) -> list[tuple[str, np.ndarray]]:
    rng = _stream(seed, 5)
    x = rng.uniform(-8.0, 8.0, (3, 4, 5))
    x.flat[0] = 30.0     # saturation ends
    x.flat[1] = -30.0
    x = _f32(x)
    return [("x", x), ("y", _f32(reference.sigmoid(x)))]


# the mini network: stem conv (3->8, stride 2) + one residual bottleneck
# t=2, then upconcat with the input image and one contracting bottleneck
# t=0.5 down to a single sigmoid channel.  Names follow the engine's
# row/unit convention so its loader can install them directly.
_MINI_UNITS = [
    ("enc00_conv.conv", 3, 8, 3, False),
    ("enc01_resbottleneck.expand", 8, 16, 1, False),
    ("enc01_resbottleneck.dw", 16, 16, 3, True),
    ("enc01_resbottleneck.project", 16, 8, 1, False),
    ("dec03_bottleneck.expand", 11, 6, 1, False),
    ("dec03_bottleneck.dw", 6, 6, 3, True),
    ("dec03_bottleneck.project", 6, 1, 1, False),
]


def _case_m2u_mini(seed: int) -> list[tuple[str, np.ndarray]]:
    assert hidden(2.0, 8) == 16 and hidden(0.5, 11) == 6
    rng = _stream(seed, 6)
    tensors: list[tuple[str, np.ndarray]] = []
    x = _f32(rng.random((1, 3, 64, 64)))
    tensors.append(("input", x))

    w: dict[str, np.ndarray] = {}
    for name, c_in, c_out, k, depthwise in _MINI_UNITS:
        fan_in = k * k * (1 if depthwise else c_in)
        shape = (c_out, 1, k, k) if depthwise else (c_out, c_in, k, k)
        w[f"{name}.kernel"] = _f32(rng.normal(0.0, fan_in ** -0.5, shape))
        w[f"{name}.bn.gamma"] = _f32(rng.uniform(0.5, 1.5, c_out))
        w[f"{name}.bn.beta"] = _f32(rng.normal(0.0, 0.2, c_out))
        w[f"{name}.bn.running_mean"] = _f32(rng.normal(0.0, 0.2, c_out))
        w[f"{name}.bn.running_var"] = _f32(rng.uniform(0.5, 1.5, c_out))
    tensors += sorted(w.items())

    def unit(name: str, x64: np.ndarray, stride: int, padding: int,
             depthwise: bool, act: bool) -> np.ndarray:
        if depthwise:
            y = reference.depthwise_conv2d(x64, w[f"{name}.kernel"],
                                           stride, padding)
        else:
            y = reference.conv2d(x64, w[f"{name}.kernel"], stride, padding)
        y = reference.batchnorm_infer(
            y, w[f"{name}.bn.gamma"], w[f"{name}.bn.beta"],
            w[f"{name}.bn.running_mean"], w[f"{name}.bn.running_var"])
        return reference.relu6(y) if act else y

    x64 = x.astype(np.float64)
    a = unit("enc00_conv.conv", x64, 2, 1, False, True)
    e = unit("enc01_resbottleneck.expand", a, 1, 0, False, True)
    d = unit("enc01_resbottleneck.dw", e, 1, 1, True, True)
    p = unit("enc01_resbottleneck.project", d, 1, 0, False, False)
    r = p + a
    u = reference.concat_channels(reference.upsample_x2(r), x64)
    e2 = unit("dec03_bottleneck.expand", u, 1, 0, False, True)
    d2 = unit("dec03_bottleneck.dw", e2, 1, 1, True, True)
    p2 = unit("dec03_bottleneck.project", d2, 1, 0, False, False)
    y = reference.sigmoid(p2)

    tensors.append(("output", _f32(y)))
    return tensors


def _case_aug_s42() -> list[tuple[str, np.ndarray]]:
    content = _stream(42, 100)
    image = _f32(content.random((3, 64, 64)))
    yy, xx = np.meshgrid(np.arange(64), np.arange(64), indexing="ij")
    cy, cx = content.integers(20, 44, 2)
    disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= 120
    stripe_at = int(content.integers(8, 56))
    stripe = np.abs(xx - stripe_at) <= 2
    mask = _f32((disk | stripe)[None])

    rng = augment.stream(42, 0, 0)
    aug_img, aug_mask = augment.replay(image, mask, rng)
    return [("image", image), ("mask", mask),
            ("aug_image", _f32(aug_img)), ("aug_mask", _f32(aug_mask))]


def _case_pr(seed: int) -> str:
    rng = _stream(seed, 7)
    scores = _f32(rng.random(2000))
    labels = rng.random(2000) < 0.35
    thresholds = [k / 256.0 for k in range(1, 256)]
    rows = reference.pr_rows(scores, labels, thresholds)
    lines = ["threshold,precision,recall,dice"]
    for threshold, precision, recall, dice in rows:
        lines.append(f"{threshold:.17g},{precision:.17g},"
                     f"{recall:.17g},{dice:.17g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def generate_fixtures(seed: int, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    cases = [
        ("conv_s2.bin", lambda: _case_conv_s2(seed)),
        ("dwconv_s2.bin", lambda: _case_dwconv_s2(seed)),
        ("bn_train.bin", lambda: _case_bn_train(seed)),
        ("bilerp.bin", lambda: _case_bilerp(seed)),
        ("sigmoid.bin", lambda: _case_sigmoid(seed)),
        ("m2u_mini.bin", lambda: _case_m2u_mini(seed)),
        ("aug_s42.bin", _case_aug_s42),
    ]
    for filename, case in cases:
        path = out / filename
        write_m2uf(path, case())
        written.append(path)

    pr_path = out / "pr.csv"
    pr_path.write_text(_case_pr(seed))
    written.append(pr_path)
    return written


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Regenerate the golden fixture files")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)
    for path in generate_fixtures(args.seed, args.out):
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
