"""Dataset definitions, preprocessing crops, and the augmentation stack.

Three retinal fundus datasets are wired in:

=========  ==========  =================================  =====  ======
name       native      crop                               train  batch
=========  ==========  =================================  =====  ======
DRIVE      584 x 565   center 544 x 544                   20/20  4
CHASE_DB1  960 x 999   drop 18 left / 21 right columns    8/20   2
HRF        2336 x 3504 none                               15/30  1
=========  ==========  =================================  =====  ======

Post-crop sizes are multiples of 16.  Cropped-away pixel counts feed the
true-negative metric adjustment downstream.

Randomness contract
-------------------
All augmentation draws come from a counter-based Philox generator so the
reference implementation can replay sequences exactly.  Per sample the
stream is seeded with (seed, epoch, sample index) and consumed in a fixed
order, whether or not each transform triggers:

    flip-h uniform, flip-v uniform, angle, elastic dy (grid x grid),
    elastic dx, brightness, contrast, saturation, hue factor.

Geometry is evaluated in float64 and cast back to float32 at the end.
The image is resampled bilinearly, the mask with nearest neighbor
(rounding half up), both with symmetric border reflection (edge pixel
repeated), so masks stay exactly binary.  Color jitter multiplies
brightness, scales contrast/saturation deviations around the (per-image /
per-pixel) luma, and shifts HSV hue additively by factor - 1; factors are
drawn from [1-c, 1+c] and the result is clipped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, UsageError
from .fileio import read_image, read_mask

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


# =============================================================================
# Dataset table
# =============================================================================


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    native_hw: tuple[int, int]
    cropped_hw: tuple[int, int]
    n_train: int
    n_test: int
    batch_size: int

    @property
    def n_cropped(self) -> int:
        nh, nw = self.native_hw
        ch, cw = self.cropped_hw
        return nh * nw - ch * cw


DATASETS = {
    "DRIVE": DatasetSpec("DRIVE", (584, 565), (544, 544), 20, 20, 4),
    "CHASE_DB1": DatasetSpec("CHASE_DB1", (960, 999), (960, 960), 8, 20, 2),
    "HRF": DatasetSpec("HRF", (2336, 3504), (2336, 3504), 15, 30, 1),
}


def dataset_spec(name: str) -> DatasetSpec:
    spec = DATASETS.get(name) or DATASETS.get(name.upper())
    if spec is None:
        raise UsageError(
            f"unknown dataset {name!r} (known: {sorted(DATASETS)})")
    return spec


# canonical image ids, used when no dataset directory is present
_CANONICAL_IDS = {
    "DRIVE": [f"{i:02d}_test" for i in range(1, 21)]
             + [f"{i}_training" for i in range(21, 41)],
    "CHASE_DB1": [f"Image_{i:02d}{side}" for i in range(1, 15)
                  for side in ("L", "R")],
    "HRF": [f"{i:02d}_{cat}" for cat in ("dr", "g", "h")
            for i in range(1, 16)],
}


@dataclass
class Sample:
    """One image/mask pair; image float32 (3, h, w) in [0,1], mask binary."""

    image: np.ndarray
    mask: np.ndarray
    image_id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(
                f"{self.image_id}: image must be (3, h, w), got {self.image.shape}")
        if self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise DataError(
                f"{self.image_id}: mask must be (1, h, w), got {self.mask.shape}")
        if self.mask.shape[1:] != self.image.shape[1:]:
            raise DataError(
                f"{self.image_id}: image {self.image.shape[1:]} and mask "
                f"{self.mask.shape[1:]} sizes differ")

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


# =============================================================================
# Crop and split
# =============================================================================


def crop(sample: Sample, dataset: str) -> Sample:
    """Apply the dataset's preprocessing crop; idempotent."""
    spec = dataset_spec(dataset)
    if sample.hw == spec.cropped_hw:
        return sample
    if sample.hw != spec.native_hw:
        raise DataError(
            f"{sample.image_id}: expected {spec.name} resolution "
            f"{spec.native_hw} (or already-cropped {spec.cropped_hw}), "
            f"got {sample.hw}")
    h, w = sample.hw
    if spec.name == "DRIVE":
        ch, cw = spec.cropped_hw
        top, left = (h - ch) // 2, (w - cw) // 2
        sl = np.s_[:, top:top + ch, left:left + cw]
    elif spec.name == "CHASE_DB1":
        sl = np.s_[:, :, 18:w - 21]
    else:
        sl = np.s_[:, :, :]
    return Sample(sample.image[sl].copy(), sample.mask[sl].copy(),
                  sample.image_id)


def split(dataset: str, ids: list[str] | None = None
          ) -> tuple[list[str], list[str]]:
    """Deterministic train/test id lists.

    With no explicit ids the canonical file stems are used.  DRIVE sorts
    to 20 test ids before 20 training ids; CHASE_DB1 takes the first 8
    sorted ids for training; HRF takes the first 5 of each category
    (dr / g / h suffix).
    """
    spec = dataset_spec(dataset)
    ids = sorted(_CANONICAL_IDS[spec.name] if ids is None else ids)
    expected = spec.n_train + spec.n_test
    if len(ids) != expected:
        raise DataError(
            f"{spec.name} needs {expected} image ids, found {len(ids)}")
    if spec.name == "DRIVE":
        return ids[spec.n_test:], ids[:spec.n_test]
    if spec.name == "CHASE_DB1":
        return ids[:spec.n_train], ids[spec.n_train:]
    per_cat: dict[str, list[str]] = {}
    for image_id in ids:
        cat = image_id.rsplit("_", 1)[-1] if "_" in image_id else ""
        per_cat.setdefault(cat, []).append(image_id)
    if len(per_cat) != 3:
        raise DataError(
            f"HRF ids must fall into 3 category suffixes, got {sorted(per_cat)}")
    train, test = [], []
    for cat in sorted(per_cat):
        train += per_cat[cat][:5]
        test += per_cat[cat][5:]
    return train, test


def make_validation(train_ids: list[str], k: int = 2, seed: int = 0
                    ) -> tuple[list[str], list[str]]:
    """Hold out k ids for validation, deterministic under the seed."""
    if k < 0:
        raise UsageError(f"validation size must be >= 0, got {k}")
    if k >= len(train_ids) and k > 0:
        raise UsageError(
            f"cannot hold out {k} of {len(train_ids)} training images")
    if k == 0:
        return list(train_ids), []
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    picked = rng.choice(len(train_ids), size=k, replace=False)
    val_set = {train_ids[i] for i in picked}
    train = [i for i in train_ids if i not in val_set]
    val = [i for i in train_ids if i in val_set]
    return train, val


# =============================================================================
# Directory loading
# =============================================================================


def list_ids(root, dataset: str) -> list[str]:
    """Sorted image-file stems under <root>/<dataset>/images."""
    img_dir = Path(root) / dataset_spec(dataset).name / "images"
    if not img_dir.is_dir():
        raise DataError(f"no image directory at {img_dir}")
    stems = sorted(p.stem for p in img_dir.iterdir()
                   if p.suffix.lower() in (".png", ".ppm"))
    if not stems:
        raise DataError(f"no supported images under {img_dir}")
    return stems


def _find_label(label_dir: Path, stem: str) -> Path | None:
    for suffix in (".png", ".pgm", ".ppm"):
        p = label_dir / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def load_sample(root, dataset: str, image_id: str) -> Sample:
    """Load one image/mask pair by file stem."""
    base = Path(root) / dataset_spec(dataset).name
    image_path = None
    for suffix in (".png", ".ppm"):
        p = base / "images" / f"{image_id}{suffix}"
        if p.exists():
            image_path = p
            break
    if image_path is None:
        raise DataError(f"no image for id {image_id!r} under {base / 'images'}")
    label_path = _find_label(base / "labels", image_id)
    if label_path is None:
        raise DataError(f"no label for id {image_id!r} under {base / 'labels'}")
    image = read_image(image_path)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return Sample(image, read_mask(label_path), image_id)


def _read_manifest(path: Path) -> list[str]:
    ids = [line.strip() for line in path.read_text().splitlines()]
    ids = [i for i in ids if i and not i.startswith("#")]
    if not ids:
        raise DataError(f"manifest {path} lists no ids")
    return ids


def load_split_ids(root, dataset: str) -> tuple[list[str], list[str]]:
    """Train/test ids for a dataset directory.

    ``train.txt`` / ``test.txt`` manifests (one id per line, # comments)
    override the built-in split; with only train.txt present the
    remaining ids form the test set.
    """
    base = Path(root) / dataset_spec(dataset).name
    ids = list_ids(root, dataset)
    train_manifest = base / "train.txt"
    test_manifest = base / "test.txt"
    if train_manifest.exists():
        train = _read_manifest(train_manifest)
        unknown = sorted(set(train) - set(ids))
        if unknown:
            raise DataError(f"manifest ids without images: {unknown}")
        if test_manifest.exists():
            test = _read_manifest(test_manifest)
        else:
            test = [i for i in ids if i not in set(train)]
        return train, test
    return split(dataset, ids)


# =============================================================================
# Augmentation
# =============================================================================


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 15.0
    flip_h: float = 0.5
    flip_v: float = 0.5
    c_brightness: float = 0.3
    c_contrast: float = 0.3
    c_saturation: float = 0.02
    c_hue: float = 0.02
    elastic_grid: int = 8
    elastic_magnitude: int = 1
    seed: int = 0

    def __post_init__(self):
        for field_name in ("flip_h", "flip_v"):
            v = getattr(self, field_name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{field_name} must be in [0,1], got {v}")
        for field_name in ("c_brightness", "c_contrast", "c_saturation",
                           "c_hue"):
            v = getattr(self, field_name)
            if not 0 <= v < 1:
                raise ConfigError(f"{field_name} must be in [0,1), got {v}")
        if self.elastic_grid < 2:
            raise ConfigError("elastic grid needs at least 2x2 nodes")
        if self.elastic_magnitude < 0 or self.rotation_deg < 0:
            raise ConfigError("magnitudes must be non-negative")

    @staticmethod
    def disabled() -> "AugmentConfig":
        return AugmentConfig(rotation_deg=0.0, flip_h=0.0, flip_v=0.0,
                             c_brightness=0.0, c_contrast=0.0,
                             c_saturation=0.0, c_hue=0.0,
                             elastic_magnitude=0)


def sample_stream(seed: int, epoch: int, index: int) -> np.random.Generator:
    """The per-sample Philox stream; counter-based, replayable anywhere."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, epoch, index])))


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    # symmetric reflection with the edge pixel repeated: ... 1 0 | 0 1 ...
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n
    j = np.mod(idx, period)
    return np.where(j >= n, period - 1 - j, j)


def _resample(plane: np.ndarray, src_y: np.ndarray, src_x: np.ndarray,
              bilinear: bool) -> np.ndarray:
    """Sample a (c, h, w) array at float64 source coordinates."""
    c, h, w = plane.shape
    if bilinear:
        y0 = np.floor(src_y).astype(np.int64)
        x0 = np.floor(src_x).astype(np.int64)
        ty = src_y - y0
        tx = src_x - x0
        y0r = _reflect_index(y0, h)
        y1r = _reflect_index(y0 + 1, h)
        x0r = _reflect_index(x0, w)
        x1r = _reflect_index(x0 + 1, w)
        top = plane[:, y0r, x0r] * (1 - tx) + plane[:, y0r, x1r] * tx
        bot = plane[:, y1r, x0r] * (1 - tx) + plane[:, y1r, x1r] * tx
        return top * (1 - ty) + bot * ty
    # nearest neighbor, half rounds up
    yn = _reflect_index(np.floor(src_y + 0.5).astype(np.int64), h)
    xn = _reflect_index(np.floor(src_x + 0.5).astype(np.int64), w)
    return plane[:, yn, xn]


def _rotate_coords(h: int, w: int, angle_deg: float
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates rotating the sampling grid by angle_deg about
    the image center."""
    theta = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_y = cy + cos_t * dy - sin_t * dx
    src_x = cx + sin_t * dy + cos_t * dx
    return src_y, src_x


def _elastic_field(offsets: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinearly interpolate integer grid-node offsets to a dense field."""
    g = offsets.shape[0]
    ys = np.arange(h, dtype=np.float64) * (g - 1) / (h - 1) if h > 1 \
        else np.zeros(1)
    xs = np.arange(w, dtype=np.float64) * (g - 1) / (w - 1) if w > 1 \
        else np.zeros(1)
    y0 = np.minimum(np.floor(ys).astype(np.int64), g - 2)
    x0 = np.minimum(np.floor(xs).astype(np.int64), g - 2)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    f = offsets.astype(np.float64)
    top = f[y0[:, None], x0[None, :]] * (1 - tx) + f[y0[:, None], x0[None, :] + 1] * tx
    bot = f[y0[:, None] + 1, x0[None, :]] * (1 - tx) + f[y0[:, None] + 1, x0[None, :] + 1] * tx
    return top * (1 - ty) + bot * ty


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    spread = maxc - minc
    s = np.where(maxc > 0, spread / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(spread > 0, spread, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc,
                 np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(spread > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def augment(sample: Sample, cfg: AugmentConfig,
            rng: np.random.Generator) -> Sample:
    """One random augmentation pass; see the module docstring for the
    exact draw order and resampling conventions."""
    img = sample.image.astype(np.float64)
    mask = sample.mask.astype(np.float64)
    _, h, w = img.shape

    u_flip_h = rng.random()
    u_flip_v = rng.random()
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    mag = int(cfg.elastic_magnitude)
    grid = (cfg.elastic_grid, cfg.elastic_grid)
    dy_nodes = rng.integers(-mag, mag + 1, size=grid)
    dx_nodes = rng.integers(-mag, mag + 1, size=grid)
    f_brightness = rng.uniform(1 - cfg.c_brightness, 1 + cfg.c_brightness)
    f_contrast = rng.uniform(1 - cfg.c_contrast, 1 + cfg.c_contrast)
    f_saturation = rng.uniform(1 - cfg.c_saturation, 1 + cfg.c_saturation)
    f_hue = rng.uniform(1 - cfg.c_hue, 1 + cfg.c_hue)

    if u_flip_h < cfg.flip_h:
        img = img[:, :, ::-1]
        mask = mask[:, :, ::-1]
    if u_flip_v < cfg.flip_v:
        img = img[:, ::-1, :]
        mask = mask[:, ::-1, :]

    if angle != 0.0:
        src_y, src_x = _rotate_coords(h, w, angle)
        img = _resample(img, src_y, src_x, bilinear=True)
        mask = _resample(mask, src_y, src_x, bilinear=False)

    if dy_nodes.any() or dx_nodes.any():
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        src_y = yy + _elastic_field(dy_nodes, h, w)
        src_x = xx + _elastic_field(dx_nodes, h, w)
        img = _resample(img, src_y, src_x, bilinear=True)
        mask = _resample(mask, src_y, src_x, bilinear=False)

    if f_brightness != 1.0:
        img = img * f_brightness
    if f_contrast != 1.0:
        mean = float(np.tensordot(_LUMA, img, axes=([0], [0])).mean())
        img = mean + f_contrast * (img - mean)
    if f_saturation != 1.0:
        luma = np.tensordot(_LUMA, img, axes=([0], [0]))[None]
        img = luma + f_saturation * (img - luma)
    if f_hue != 1.0:
        hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[0] = (hsv[0] + (f_hue - 1.0)) % 1.0
        img = _hsv_to_rgb(hsv)

    img = np.clip(img, 0.0, 1.0)
    return Sample(np.ascontiguousarray(img, dtype=np.float32),
                  np.ascontiguousarray(mask, dtype=np.float32),
                  sample.image_id)
