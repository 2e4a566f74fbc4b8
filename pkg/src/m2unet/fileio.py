"""File formats: weight checkpoints, golden fixtures, images, reports.

Two tiny binary containers share the same record idea (named float32
tensors, little-endian):

* fixture files, magic ``M2UF``: u32 version, u32 tensor count, then per
  tensor u32 name length + UTF-8 name, u8 rank, rank u32 dims, raw f32
  data.  Packed, no padding.
* weight files, magic ``M2UW``: same records but every field starts on a
  4-byte boundary (names padded with NUL to a multiple of 4, rank byte
  followed by 3 pad bytes), and the tensor section is followed by a u32
  length + UTF-8 JSON metadata block (architecture hash, decoder
  contraction factor, batch-norm constants, training config).

Loaders parse the whole file before handing anything out, so a truncated
or corrupt file never yields a partial model.  Image support is
deliberately small: 8-bit non-interlaced PNG (gray or RGB) and binary
PPM/PGM; everything else is an explicit unsupported-format error.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError, FormatError, UsageError

FIXTURE_MAGIC = b"M2UF"
WEIGHTS_MAGIC = b"M2UW"
FORMAT_VERSION = 1

_IMAGE_SUFFIXES = {".png", ".ppm", ".pgm"}


# =============================================================================
# Low-level record helpers
# =============================================================================


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what} "
                          f"(wanted {n} bytes, got {len(data)})")
    return data


def _read_u32(fh, what: str) -> int:
    return struct.unpack("<I", _read_exact(fh, 4, what))[0]


def _pad4(n: int) -> int:
    return (-n) % 4


def _check_names_unique(names) -> None:
    seen = set()
    for name in names:
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r}")
        seen.add(name)


def _write_header(fh, magic: bytes, count: int) -> None:
    fh.write(magic)
    fh.write(struct.pack("<II", FORMAT_VERSION, count))


def _read_header(fh, magic: bytes, path) -> int:
    got = _read_exact(fh, 4, "magic")
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    version = _read_u32(fh, "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return _read_u32(fh, "tensor count")


def _write_tensor_record(fh, name: str, arr: np.ndarray, aligned: bool) -> None:
    # not ascontiguousarray: that would promote rank-0 tensors to rank 1,
    # and tobytes() below copies to C order anyway
    data = np.asarray(arr, dtype="<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    if aligned:
        fh.write(b"\0" * _pad4(len(encoded)))
    fh.write(struct.pack("<B", data.ndim))
    if aligned:
        fh.write(b"\0" * 3)
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def _read_tensor_record(fh, aligned: bool) -> tuple[str, np.ndarray]:
    name_len = _read_u32(fh, "name length")
    name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
    if aligned:
        _read_exact(fh, _pad4(name_len), "name padding")
    rank = _read_exact(fh, 1, "rank")[0]
    if aligned:
        _read_exact(fh, 3, "rank padding")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
    size = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = _read_exact(fh, 4 * size, f"data of {name!r}")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    return name, arr


# =============================================================================
# Fixture files (M2UF)
# =============================================================================


def write_fixture(path, tensors) -> None:
    """Write named float32 tensors; `tensors` is a dict or (name, array) list."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    _check_names_unique(name for name, _ in items)
    with open(path, "wb") as fh:
        _write_header(fh, FIXTURE_MAGIC, len(items))
        for name, arr in items:
            _write_tensor_record(fh, name, np.asarray(arr), aligned=False)


def read_fixture(path) -> dict[str, np.ndarray]:
    """Read a fixture file into an ordered name -> float32 array dict."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open fixture {path}: {exc}") from exc
    with fh:
        count = _read_header(fh, FIXTURE_MAGIC, path)
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, arr = _read_tensor_record(fh, aligned=False)
            if name in out:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            out[name] = arr
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last tensor")
    return out


# =============================================================================
# Weight files (M2UW)
# =============================================================================


def _decoder_t(graph) -> float | None:
    seen_upconcat = False
    for row in graph.rows:
        if row.kind == "upconcat":
            seen_upconcat = True
        elif seen_upconcat and row.kind == "bottleneck":
            return float(row.t)
    return None


def _bn_constants(graph) -> tuple[float, float]:
    for group in graph.blocks:
        for block in group:
            units = getattr(block, "units", None)
            if units:
                return float(units[0].bn.eps), float(units[0].bn.momentum)
    return 1e-5, 0.1


def save_weights(graph, path, train_config: dict | None = None) -> dict:
    """Serialize all parameters and running statistics plus metadata.

    Returns the metadata dict that was written.
    """
    tensors = {**graph.named_params(), **graph.named_state()}
    eps, momentum = _bn_constants(graph)
    meta = {
        "arch_hash": graph.arch_hash(),
        "t_decoder": _decoder_t(graph),
        "bn_eps": eps,
        "bn_momentum": momentum,
        "train_config": train_config,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        _write_header(fh, WEIGHTS_MAGIC, len(tensors))
        for name, arr in tensors.items():
            _write_tensor_record(fh, name, arr, aligned=True)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
    return meta


def load_weights(path) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a weight file fully; returns (tensor store, metadata)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open weight file {path}: {exc}") from exc
    with fh:
        count = _read_header(fh, WEIGHTS_MAGIC, path)
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, arr = _read_tensor_record(fh, aligned=True)
            if name in tensors:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            tensors[name] = arr
        meta_len = _read_u32(fh, "metadata length")
        try:
            meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad metadata block: {exc}") from exc
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after metadata")
    return tensors, meta


def install_weights(graph, tensors: dict[str, np.ndarray], meta: dict,
                    encoder_only: bool = False) -> None:
    """Install loaded tensors into a graph, validating before any write.

    Full installs require the stored architecture hash to match the graph.
    encoder_only installs just the tensors named ``enc*`` (for decoder
    reinitialization on top of a pretrained encoder) and skips the hash
    check, since the donor's decoder may differ.
    """
    expected = {**graph.named_params(), **graph.named_state()}
    if encoder_only:
        expected = {k: v for k, v in expected.items() if k.startswith("enc")}
        source = {k: v for k, v in tensors.items() if k.startswith("enc")}
    else:
        file_hash = meta.get("arch_hash")
        if file_hash != graph.arch_hash():
            raise FormatError(
                f"weight file architecture hash {file_hash!r} does not match "
                f"the built graph ({graph.arch_hash()!r})")
        source = tensors
    problems = []
    for name, dst in expected.items():
        if name not in source:
            problems.append(f"missing tensor {name!r}")
        elif tuple(source[name].shape) != tuple(dst.shape):
            problems.append(
                f"tensor {name!r}: file shape {tuple(source[name].shape)}, "
                f"graph needs {tuple(dst.shape)}")
    problems += [f"unknown tensor {name!r}" for name in source
                 if name not in expected]
    if problems:
        raise ConfigError("weight file does not fit the graph: "
                          + "; ".join(sorted(problems)))
    for name, dst in expected.items():
        dst[...] = source[name]


# =============================================================================
# Images
# =============================================================================


def _open_image(path) -> Image.Image:
    suffix = Path(path).suffix.lower()
    if suffix not in _IMAGE_SUFFIXES:
        raise UsageError(f"unsupported image format {suffix!r} "
                         f"(supported: {sorted(_IMAGE_SUFFIXES)})")
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError as exc:
        raise DataError(f"image not found: {path}") from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise UsageError(f"cannot decode image {path}: {exc}") from exc
    if img.format == "PNG" and img.info.get("interlace"):
        raise UsageError(f"{path}: interlaced PNG is not supported")
    if img.mode not in ("L", "RGB"):
        raise UsageError(
            f"{path}: unsupported pixel mode {img.mode!r} "
            "(only 8-bit grayscale and RGB)")
    return img


def read_image(path) -> np.ndarray:
    """Load an image as float32 (c, h, w) scaled to [0, 1]."""
    img = _open_image(path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None, :, :]
    return arr.transpose(2, 0, 1)


def read_mask(path) -> np.ndarray:
    """Load a label image as a binary float32 (1, h, w) mask.

    Multi-channel labels are reduced by their first channel; anything
    above half intensity counts as vessel.
    """
    arr = read_image(path)[:1]
    return (arr > 0.5).astype(np.float32)


def _to_u8_gray(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3:
        if v.shape[0] != 1:
            raise UsageError(f"expected a single-channel map, got {v.shape}")
        v = v[0]
    if v.ndim != 2:
        raise UsageError(f"expected a 2-D map, got shape {v.shape}")
    return np.rint(255.0 * np.clip(v, 0.0, 1.0)).astype(np.uint8)


def _save_u8(arr: np.ndarray, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix not in _IMAGE_SUFFIXES:
        raise UsageError(f"unsupported image format {suffix!r} "
                         f"(supported: {sorted(_IMAGE_SUFFIXES)})")
    img = Image.fromarray(arr)
    if suffix == ".png":
        img.save(path, format="PNG")
    else:
        img.save(path, format="PPM")


def write_prob_map(prob: np.ndarray, path) -> None:
    """Probability map as 8-bit grayscale, value = round(255 * p)."""
    _save_u8(_to_u8_gray(prob), path)


def write_binary_map(mask: np.ndarray, path) -> None:
    _save_u8(_to_u8_gray((np.asarray(mask) > 0.5).astype(np.float64)), path)


def write_vessel_overlay(image: np.ndarray, mask: np.ndarray, path) -> None:
    """Predicted vessels drawn in red over the (c, h, w) input image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise UsageError(f"expected a (c, h, w) image, got {img.shape}")
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    rgb = np.rint(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
    rgb = np.transpose(rgb, (1, 2, 0)).copy()
    rgb[np.squeeze(np.asarray(mask)) > 0.5] = (255, 0, 0)
    _save_u8(rgb, path)


def write_overlay(pred: np.ndarray, gt: np.ndarray, path) -> None:
    """Confusion overlay: TP white, FP yellow, FN red, TN black."""
    p = np.squeeze(np.asarray(pred)) > 0.5
    g = np.squeeze(np.asarray(gt)) > 0.5
    if p.shape != g.shape or p.ndim != 2:
        raise UsageError(
            f"overlay needs two matching 2-D maps, got {p.shape} and {g.shape}")
    rgb = np.zeros(p.shape + (3,), dtype=np.uint8)
    rgb[p & g] = (255, 255, 255)
    rgb[p & ~g] = (255, 255, 0)
    rgb[~p & g] = (255, 0, 0)
    _save_u8(rgb, path)
