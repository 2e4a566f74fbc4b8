"""Command line front end: segment, train, eval, inspect, bench.

Every command writes a machine-readable artifact (JSON or CSV) next to a
plain-text log of what was printed, so batch jobs can be audited later.
Exit codes are a stable scripting contract: 0 success, 1 usage error,
2 data/format/config error, 3 numeric failure.

Determinism: --threads 1 (the default) pins BLAS to a single thread,
which is the mode all fixture comparisons assume.  The dataset root is
--data-root when given, else the M2U_DATA_ROOT environment variable,
else the current directory.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics, ops
from .data import (AugmentConfig, crop, dataset_spec, load_sample,
                   load_split_ids, make_validation)
from .errors import (ConfigError, DataError, NumericError, UsageError)
from .fileio import (install_weights, load_weights, read_image, read_mask,
                     save_weights, write_binary_map, write_overlay,
                     write_prob_map, write_vessel_overlay)
from .graph import CANONICAL_PARAM_TOTAL, SIZE_MULTIPLE, build_m2unet
from .tensor import Tensor
from .train import TrainConfig, init_weights, load_snapshot, train, \
    write_history_csv


class _Parser(argparse.ArgumentParser):
    # argparse would exit(2) on bad flags; route through the usage path
    def error(self, message):
        raise UsageError(message)


class RunLog:
    """Collects printed lines and persists them as <out>/<command>.log."""

    def __init__(self, out_dir: Path, command: str):
        self.path = out_dir / f"{command}.log"
        self.lines: list[str] = []

    def say(self, msg: str) -> None:
        print(msg)
        self.lines.append(msg)

    def warn(self, msg: str) -> None:
        print(msg, file=sys.stderr)
        self.lines.append(msg)

    def flush(self) -> None:
        self.path.write_text("\n".join(self.lines) + "\n")


def _out_dir(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_root(args) -> Path:
    if args.data_root:
        return Path(args.data_root)
    return Path(os.environ.get("M2U_DATA_ROOT", "."))


def _parse_resolution(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"resolution must look like 544x544, got {text!r}")
    if h < 1 or w < 1:
        raise UsageError(f"resolution must be positive, got {text!r}")
    return h, w


def _next_multiple(n: int) -> int:
    return ((n + SIZE_MULTIPLE - 1) // SIZE_MULTIPLE) * SIZE_MULTIPLE


def _pad_image(image: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """Edge-pad (c, h, w) on the bottom/right to the next multiple of 16."""
    _, h, w = image.shape
    ph, pw = _next_multiple(h) - h, _next_multiple(w) - w
    if ph == 0 and pw == 0:
        return image, (h, w)
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge"), (h, w)


def _as_rgb(image: np.ndarray) -> np.ndarray:
    if image.shape[0] == 1:
        return np.repeat(image, 3, axis=0)
    return image


class _ModelCache:
    """One weight file served at several input resolutions."""

    def __init__(self, weights_path):
        self.tensors, self.meta = load_weights(weights_path)
        self._built: dict[tuple[int, int], object] = {}

    def at(self, hw: tuple[int, int]):
        if hw not in self._built:
            g = build_m2unet((3,) + hw,
                             t_decoder=self.meta.get("t_decoder", 0.15))
            install_weights(g, self.tensors, self.meta)
            self._built[hw] = g
        return self._built[hw]


def _forward_prob(graph, image: np.ndarray) -> np.ndarray:
    out = graph.forward(Tensor(image[None].astype(np.float32)))
    return out.data[0, 0]


# =============================================================================
# segment
# =============================================================================


def _optimal_threshold(cache: _ModelCache, val_dir: Path, log: RunLog) -> float:
    """Best Dice threshold over a directory of image/label pairs.

    Validation images are padded to the size contract internally and the
    prediction cropped back, so arbitrary sizes are accepted here.
    """
    image_dir = val_dir / "images"
    label_dir = val_dir / "labels"
    if not image_dir.is_dir() or not label_dir.is_dir():
        raise DataError(f"{val_dir} needs images/ and labels/ subdirectories")
    probs, gts = [], []
    for img_path in sorted(image_dir.iterdir()):
        matches = sorted(label_dir.glob(img_path.stem + ".*"))
        if not matches:
            log.warn(f"warning: no label for {img_path.name}, skipped")
            continue
        image = _as_rgb(read_image(img_path))
        padded, (h, w) = _pad_image(image)
        prob = _forward_prob(cache.at(padded.shape[1:]), padded)[:h, :w]
        probs.append(prob.ravel())
        gts.append(read_mask(matches[0]).ravel())
    if not probs:
        raise DataError(f"no usable image/label pairs under {val_dir}")
    _, best = metrics.pr_curve(np.concatenate(probs), np.concatenate(gts),
                               metrics.default_thresholds())
    log.say(f"optimal threshold {best.threshold:.6g} "
            f"(pooled Dice {best.dice:.4f} over {len(probs)} images)")
    return best.threshold


def cmd_segment(args) -> None:
    out = _out_dir(args.output)
    log = RunLog(out, "segment")
    cache = _ModelCache(args.weights)

    image = _as_rgb(read_image(args.input))
    _, h, w = image.shape
    if (h % SIZE_MULTIPLE or w % SIZE_MULTIPLE) and not args.pad:
        raise UsageError(
            f"input is {h}x{w}; dimensions must be multiples of "
            f"{SIZE_MULTIPLE} (pass --pad to pad and crop automatically)")
    padded, _ = _pad_image(image)
    if padded.shape[1:] != (h, w):
        log.say(f"padded {h}x{w} -> {padded.shape[1]}x{padded.shape[2]}, "
                "output cropped back")

    if args.optimal_from:
        threshold = _optimal_threshold(cache, Path(args.optimal_from), log)
        threshold_source = "optimal-from"
    else:
        threshold = args.threshold
        threshold_source = "flag"

    prob = _forward_prob(cache.at(padded.shape[1:]), padded)[:h, :w]
    binary = prob >= threshold

    stem = Path(args.input).stem
    prob_path = out / f"{stem}_prob.png"
    bin_path = out / f"{stem}_bin.png"
    overlay_path = out / f"{stem}_overlay.png"
    write_prob_map(prob, prob_path)
    write_binary_map(binary, bin_path)

    result = {"input": str(args.input), "weights": str(args.weights),
              "height": h, "width": w, "threshold": threshold,
              "threshold_source": threshold_source,
              "vessel_fraction": float(binary.mean()),
              "prob_map": prob_path.name, "binary_map": bin_path.name,
              "overlay": overlay_path.name}
    if args.gt:
        gt = read_mask(args.gt)
        write_overlay(binary, gt, overlay_path)
        counts = metrics.confusion(prob, gt, threshold)
        result["dice"] = metrics.dice_score(counts)
        log.say(f"Dice vs ground truth at {threshold:.6g}: "
                f"{result['dice']:.4f}")
    else:
        write_vessel_overlay(image, binary, overlay_path)
    log.say(f"{stem}: {h}x{w}, threshold {threshold:.6g}, vessel fraction "
            f"{result['vessel_fraction']:.4f}")
    log.say(f"wrote {prob_path.name}, {bin_path.name}, {overlay_path.name}")

    (out / "segment.json").write_text(json.dumps(result, indent=2) + "\n")
    log.flush()


# =============================================================================
# train
# =============================================================================


def _load_config(path) -> tuple[TrainConfig, AugmentConfig | None]:
    """JSON with optional "train"/"augment" objects mirroring the dataclass
    field names; "augment": null disables augmentation entirely."""
    if path is None:
        return TrainConfig(), AugmentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {"train", "augment"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    train_raw = raw.get("train", {})
    if "betas" in train_raw:
        train_raw["betas"] = tuple(train_raw["betas"])
    try:
        cfg = TrainConfig(**train_raw)
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}")
    if "augment" in raw and raw["augment"] is None:
        return cfg, AugmentConfig.disabled()
    try:
        aug = AugmentConfig(**raw.get("augment", {}))
    except TypeError as exc:
        raise ConfigError(f"bad augmentation config: {exc}")
    return cfg, aug


def cmd_train(args) -> None:
    out = _out_dir(args.out)
    log = RunLog(out, "train")
    cfg, aug = _load_config(args.config)
    root = _data_root(args)

    train_ids, _ = load_split_ids(root, args.dataset)
    train_ids, val_ids = make_validation(train_ids, k=cfg.val_size,
                                         seed=cfg.seed)
    log.say(f"{args.dataset}: {len(train_ids)} training images, "
            f"{len(val_ids)} validation holdout")
    train_samples = [crop(load_sample(root, args.dataset, i), args.dataset)
                     for i in train_ids]
    val_samples = [crop(load_sample(root, args.dataset, i), args.dataset)
                   for i in val_ids]

    hw = train_samples[0].hw
    graph = build_m2unet((3,) + hw)
    init_weights(graph, args.init, source=args.encoder_weights, seed=cfg.seed)
    log.say(f"model at {hw[0]}x{hw[1]}, init {args.init}, "
            f"{cfg.epochs} epochs, batch {cfg.batch_size}, lr {cfg.lr}")

    result = train(graph, train_samples, val_samples, cfg, aug)
    load_snapshot(graph, result.checkpoint)
    weights_path = out / "weights.m2u"
    save_weights(graph, weights_path, train_config=cfg.to_dict())
    write_history_csv(out / "history.csv", result.history)

    if result.aborted:
        log.warn("warning: run aborted on a non-finite loss; kept the last "
                 "good checkpoint")
    best = ("n/a" if result.best_val_dice is None
            else f"{result.best_val_dice:.4f}")
    log.say(f"best epoch {result.best_epoch}, validation Dice {best}")
    log.say(f"wrote {weights_path.name}, history.csv")

    summary = {"dataset": args.dataset, "n_train": len(train_ids),
               "n_val": len(val_ids), "best_epoch": result.best_epoch,
               "best_val_dice": result.best_val_dice,
               "aborted": result.aborted, "weights": weights_path.name,
               "config": cfg.to_dict()}
    (out / "train.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.flush()


# =============================================================================
# eval
# =============================================================================


def cmd_eval(args) -> None:
    out = _out_dir(args.out)
    log = RunLog(out, "eval")
    root = _data_root(args)
    spec = dataset_spec(args.dataset)
    cache = _ModelCache(args.weights)

    train_ids, test_ids = load_split_ids(root, args.dataset)
    ids = train_ids if args.split == "train" else test_ids
    thresholds = metrics.default_thresholds()

    rows, skipped = [], []
    pooled_prob, pooled_gt = [], []
    for image_id in ids:
        try:
            sample = crop(load_sample(root, args.dataset, image_id),
                          args.dataset)
        except DataError as exc:
            log.warn(f"warning: {image_id} skipped ({exc})")
            skipped.append(image_id)
            continue
        prob = _forward_prob(cache.at(sample.hw), sample.image)
        gt = sample.mask[0]
        counts = metrics.confusion(prob, gt, args.threshold,
                                   n_cropped=spec.n_cropped)
        _, best = metrics.pr_curve(prob, gt, thresholds)
        row = {"image_id": image_id,
               "dice": metrics.dice_score(counts),
               "accuracy": metrics.accuracy_adjusted(counts),
               "auc": metrics.roc_auc(prob, gt, n_cropped=spec.n_cropped),
               "optimal_threshold": best.threshold}
        rows.append(row)
        pooled_prob.append(prob.ravel())
        pooled_gt.append(gt.ravel())
        log.say(f"{image_id}: dice {row['dice']:.4f} acc "
                f"{row['accuracy']:.4f} auc {row['auc']:.4f} "
                f"best-t {best.threshold:.6g}")

    if not rows:
        raise DataError(f"no evaluable images in split {args.split!r} "
                        f"({len(skipped)} skipped)")

    points, pooled_best = metrics.pr_curve(np.concatenate(pooled_prob),
                                           np.concatenate(pooled_gt),
                                           thresholds)
    aggregate = {"image_id": "aggregate",
                 "dice": float(np.mean([r["dice"] for r in rows])),
                 "accuracy": float(np.mean([r["accuracy"] for r in rows])),
                 "auc": float(np.mean([r["auc"] for r in rows])),
                 "optimal_threshold": pooled_best.threshold}
    metrics.write_metrics_csv(out / "metrics.csv", rows + [aggregate])
    metrics.write_pr_csv(out / "pr.csv", points)
    log.say(f"aggregate over {len(rows)} images: dice {aggregate['dice']:.4f} "
            f"acc {aggregate['accuracy']:.4f} auc {aggregate['auc']:.4f}")
    log.say(f"pooled optimal threshold {pooled_best.threshold:.6g} "
            f"(Dice {pooled_best.dice:.4f})")
    log.say("wrote metrics.csv, pr.csv")

    summary = dict(aggregate, n_images=len(rows), skipped=skipped,
                   threshold=args.threshold, split=args.split,
                   pooled_optimal_dice=pooled_best.dice)
    del summary["image_id"]
    (out / "eval.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.flush()


# =============================================================================
# inspect
# =============================================================================


def cmd_inspect(args) -> None:
    h, w = _parse_resolution(args.resolution)
    if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        raise UsageError(
            f"resolution must be a multiple of {SIZE_MULTIPLE}, got {h}x{w}")
    out = _out_dir(args.out)
    log = RunLog(out, "inspect")

    graph = build_m2unet((3, h, w))
    report = graph.row_costs((h, w))
    header = (f"{'row':>3} {'input':>14} {'operator':<14} {'t':>5} {'c':>4} "
              f"{'n':>2} {'s':>2} {'params':>8} {'madds':>14}")
    log.say(header)
    log.say("-" * len(header))
    for e in report:
        c, eh, ew = e["in_shape"]
        t = "-" if e["t"] is None else f"{e['t']:g}"
        log.say(f"{e['row']:>3} {f'{c}x{eh}x{ew}':>14} {e['kind']:<14} "
                f"{t:>5} {e['c']:>4} {e['n']:>2} {e['s']:>2} "
                f"{e['params']:>8,} {e['madds']:>14,}")
    total_params = sum(e["params"] for e in report)
    total_madds = sum(e["madds"] for e in report)
    log.say("-" * len(header))
    log.say(f"total params {total_params:,}  total madds {total_madds:,} "
            f"at {h}x{w}")

    csv_lines = ["row,kind,t,c,n,s,in_c,in_h,in_w,params,madds"]
    for e in report:
        c, eh, ew = e["in_shape"]
        t = "" if e["t"] is None else f"{e['t']:g}"
        csv_lines.append(f"{e['row']},{e['kind']},{t},{e['c']},{e['n']},"
                         f"{e['s']},{c},{eh},{ew},{e['params']},{e['madds']}")
    csv_lines.append(f"total,,,,,,,,,{total_params},{total_madds}")
    (out / "inspect.csv").write_text("\n".join(csv_lines) + "\n")
    log.flush()

    if total_params != CANONICAL_PARAM_TOTAL:
        raise DataError(
            f"parameter audit failed: built {total_params:,}, canonical "
            f"model has {CANONICAL_PARAM_TOTAL:,}")


# =============================================================================
# bench
# =============================================================================


def cmd_bench(args) -> None:
    h, w = _parse_resolution(args.resolution)
    if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        raise UsageError(
            f"resolution must be a multiple of {SIZE_MULTIPLE}, got {h}x{w}")
    if args.repeats < 1:
        raise UsageError(f"repeats must be >= 1, got {args.repeats}")
    out = _out_dir(args.out)
    log = RunLog(out, "bench")

    if args.weights:
        graph = _ModelCache(args.weights).at((h, w))
    else:
        graph = init_weights(build_m2unet((3, h, w)))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([0])))
    x = Tensor(rng.random((1, 3, h, w), dtype=np.float32))

    graph.forward(x)    # warmup excluded from the statistics
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        graph.forward(x)
        times.append(time.perf_counter() - t0)

    madds = graph.madds_count((h, w))
    median = statistics.median(times)
    p95 = float(np.percentile(times, 95))
    throughput = madds / median
    log.say(f"{h}x{w}, {args.repeats} repeats, {args.threads} thread(s)")
    log.say(f"median {median * 1e3:.2f} ms  p95 {p95 * 1e3:.2f} ms  "
            f"{madds:,} madds  {throughput / 1e9:.2f} Gmadds/s")

    lines = ["metric,value",
             f"resolution,{h}x{w}", f"repeats,{args.repeats}",
             f"threads,{args.threads}", f"madds,{madds}",
             f"median_s,{median:.17g}", f"p95_s,{p95:.17g}",
             f"madds_per_s,{throughput:.17g}"]
    lines += [f"run_{i}_s,{t:.17g}" for i, t in enumerate(times)]
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    log.flush()


# =============================================================================
# wiring
# =============================================================================


def _build_parser() -> _Parser:
    parser = _Parser(prog="m2unet",
                     description="Retinal vessel segmentation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS thread cap; 1 is the deterministic mode")

    p = sub.add_parser("segment", help="segment one fundus image")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="output directory")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--threshold", type=float, default=0.5)
    group.add_argument("--optimal-from", metavar="VAL_DIR",
                       help="pick the best-Dice threshold on this "
                            "images/+labels/ directory")
    p.add_argument("--gt", help="ground truth mask; enables the Dice report "
                                "and the error-colored overlay")
    p.add_argument("--pad", action="store_true",
                   help="pad inputs to the next multiple of 16, crop back")
    common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--dataset", required=True,
                   choices=["drive", "chase_db1", "hrf"])
    p.add_argument("--config", help="JSON training/augmentation config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data-root", help="dataset root (default "
                                       "$M2U_DATA_ROOT or .)")
    p.add_argument("--init", default="scratch",
                   choices=["scratch", "pretrained-encoder"])
    p.add_argument("--encoder-weights",
                   help="weight file for --init pretrained-encoder")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate weights on a dataset split")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True,
                   choices=["drive", "chase_db1", "hrf"])
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data-root")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print the per-row layout and cost")
    p.add_argument("--resolution", default="544x544", help="HxW")
    p.add_argument("--out", default=".", help="directory for inspect.csv")
    common(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="forward-pass latency statistics")
    p.add_argument("--weights", help="optional weight file; "
                                     "random init otherwise")
    p.add_argument("--resolution", default="544x544", help="HxW")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        with ops.thread_limit(args.threads):
            args.func(args)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
