"""Replay of the documented augmentation sequence, loops and colorsys.

The engine publishes the sampling contract: one Philox stream per sample
keyed [seed, epoch, index]; draws in the fixed order flip-h u, flip-v u,
angle, elastic dy nodes, dx nodes, brightness, contrast, saturation, hue
(all consumed even when a transform ends up disabled); a transform is
skipped when its draw is the identity (angle == 0, all node offsets zero,
factor == 1.0).  Geometry: rotation of the sampling grid about the image
center ((h-1)/2, (w-1)/2) with src = c + R(theta) (dst - c), R in (y, x)
order [[cos, -sin], [sin, cos]]; bilinear taps for the image and
floor(src + 0.5) nearest for the mask; out-of-range taps reflect
symmetrically with the edge repeated (period 2n).  The elastic field
bilinearly interpolates the integer node offsets over the pixel grid and
displaces source coordinates; jitter multiplies brightness, blends
contrast about the scalar luma mean and saturation about per-pixel luma
(weights 0.299/0.587/0.114), and shifts hue by factor - 1 in HSV, wrapped
mod 1.  Everything below re-derives that contract with per-pixel loops.
"""

from __future__ import annotations

import colorsys

import numpy as np

LUMA = (0.299, 0.587, 0.114)


def stream(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, epoch, index])))


def _reflect(i: int, n: int) -> int:
    if n == 1:
        return 0
    j = i % (2 * n)
    if j < 0:
        j += 2 * n
    return 2 * n - 1 - j if j >= n else j


def _sample_bilinear(plane: np.ndarray, sy: float, sx: float) -> float:
    h, w = plane.shape
    y0 = int(np.floor(sy))
    x0 = int(np.floor(sx))
    ty = sy - y0
    tx = sx - x0
    y0r, y1r = _reflect(y0, h), _reflect(y0 + 1, h)
    x0r, x1r = _reflect(x0, w), _reflect(x0 + 1, w)
    top = plane[y0r, x0r] * (1 - tx) + plane[y0r, x1r] * tx
    bot = plane[y1r, x0r] * (1 - tx) + plane[y1r, x1r] * tx
    return top * (1 - ty) + bot * ty


def _sample_nearest(plane: np.ndarray, sy: float, sx: float) -> float:
    h, w = plane.shape
    return plane[_reflect(int(np.floor(sy + 0.5)), h),
                 _reflect(int(np.floor(sx + 0.5)), w)]


def _warp(img: np.ndarray, mask: np.ndarray, src_y: np.ndarray,
          src_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, h, w = img.shape
    img_out = np.zeros_like(img)
    mask_out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                img_out[ch, i, j] = _sample_bilinear(
                    img[ch], src_y[i, j], src_x[i, j])
            mask_out[0, i, j] = _sample_nearest(
                mask[0], src_y[i, j], src_x[i, j])
    return img_out, mask_out


def _node_field(nodes: np.ndarray, h: int, w: int) -> np.ndarray:
    """Dense (h, w) field from a g x g node grid spanning the image."""
    g = nodes.shape[0]
    field = np.zeros((h, w))
    for i in range(h):
        gy = i * (g - 1) / (h - 1) if h > 1 else 0.0
        y0 = min(int(np.floor(gy)), g - 2)
        ty = gy - y0
        for j in range(w):
            gx = j * (g - 1) / (w - 1) if w > 1 else 0.0
            x0 = min(int(np.floor(gx)), g - 2)
            tx = gx - x0
            field[i, j] = (nodes[y0, x0] * (1 - ty) * (1 - tx)
                           + nodes[y0, x0 + 1] * (1 - ty) * tx
                           + nodes[y0 + 1, x0] * ty * (1 - tx)
                           + nodes[y0 + 1, x0 + 1] * ty * tx)
    return field


def replay(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
           rotation_deg: float = 15.0, flip_h: float = 0.5,
           flip_v: float = 0.5, c_brightness: float = 0.3,
           c_contrast: float = 0.3, c_saturation: float = 0.02,
           c_hue: float = 0.02, elastic_grid: int = 8,
           elastic_magnitude: int = 1) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(image, dtype=np.float64).copy()
    msk = np.asarray(mask, dtype=np.float64).copy()
    _, h, w = img.shape

    u_flip_h = rng.random()
    u_flip_v = rng.random()
    angle = rng.uniform(-rotation_deg, rotation_deg)
    mag = int(elastic_magnitude)
    dy_nodes = rng.integers(-mag, mag + 1,
                            size=(elastic_grid, elastic_grid))
    dx_nodes = rng.integers(-mag, mag + 1,
                            size=(elastic_grid, elastic_grid))
    f_brightness = rng.uniform(1 - c_brightness, 1 + c_brightness)
    f_contrast = rng.uniform(1 - c_contrast, 1 + c_contrast)
    f_saturation = rng.uniform(1 - c_saturation, 1 + c_saturation)
    f_hue = rng.uniform(1 - c_hue, 1 + c_hue)

    if u_flip_h < flip_h:
        img = img[:, :, ::-1].copy()
        msk = msk[:, :, ::-1].copy()
    if u_flip_v < flip_v:
        img = img[:, ::-1, :].copy()
        msk = msk[:, ::-1, :].copy()

    if angle != 0.0:
        theta = np.deg2rad(angle)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        src_y = np.zeros((h, w))
        src_x = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                dy, dx = i - cy, j - cx
                src_y[i, j] = cy + np.cos(theta) * dy - np.sin(theta) * dx
                src_x[i, j] = cx + np.sin(theta) * dy + np.cos(theta) * dx
        img, msk = _warp(img, msk, src_y, src_x)

    if dy_nodes.any() or dx_nodes.any():
        fy = _node_field(dy_nodes, h, w)
        fx = _node_field(dx_nodes, h, w)
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        img, msk = _warp(img, msk, yy + fy, xx + fx)

    if f_brightness != 1.0:
        img = img * f_brightness
    if f_contrast != 1.0:
        mean = 0.0
        for ch, wt in enumerate(LUMA):
            mean += wt * float(img[ch].sum())
        mean /= h * w
        img = mean + f_contrast * (img - mean)
    if f_saturation != 1.0:
        luma = LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]
        img = luma[None] + f_saturation * (img - luma[None])
    if f_hue != 1.0:
        img = np.clip(img, 0.0, 1.0)
        shift = f_hue - 1.0
        for i in range(h):
            for j in range(w):
                hh, ss, vv = colorsys.rgb_to_hsv(img[0, i, j], img[1, i, j],
                                                 img[2, i, j])
                r, g, b = colorsys.hsv_to_rgb((hh + shift) % 1.0, ss, vv)
                img[0, i, j], img[1, i, j], img[2, i, j] = r, g, b

    img = np.clip(img, 0.0, 1.0)
    return img, msk
