"""Resize -> intensity normalization -> multiscale morphological enhancement."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

DEFAULT_RADII = (1, 2, 3)


def resize_bilinear(img, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centre alignment and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output extents must be >= 1, got {out_w}x{out_h}")
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def resize_nearest(mask, out_w: int, out_h: int) -> np.ndarray:
    """Nearest-neighbour resampling for label grids."""
    mask = np.asarray(mask)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output extents must be >= 1, got {out_w}x{out_h}")
    h, w = mask.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[ys][:, xs].copy()


def normalize(img) -> np.ndarray:
    """Affine stretch of [min, max] onto [0, 255]; constant images map to 0."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) * (255.0 / (hi - lo))


def _size(radius: int) -> tuple[int, int]:
    if radius < 1:
        raise ValueError(f"structuring element radius must be >= 1, got {radius}")
    return (2 * radius + 1, 2 * radius + 1)


def erode(img, radius: int) -> np.ndarray:
    return ndimage.minimum_filter(np.asarray(img, dtype=np.float64), size=_size(radius), mode="nearest")


def dilate(img, radius: int) -> np.ndarray:
    return ndimage.maximum_filter(np.asarray(img, dtype=np.float64), size=_size(radius), mode="nearest")


def opening(img, radius: int) -> np.ndarray:
    return dilate(erode(img, radius), radius)


def closing(img, radius: int) -> np.ndarray:
    return erode(dilate(img, radius), radius)


def multiscale_enhance(img, radii: Sequence[int] = DEFAULT_RADII) -> np.ndarray:
    """Add white top-hats and subtract black top-hats over every radius, then clamp to [0, 255]."""
    radii = list(radii)
    if not radii:
        raise ValueError("radii must be non-empty")
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError(f"radii must be strictly increasing, got {radii}")
    img = np.asarray(img, dtype=np.float64)
    out = img.copy()
    for r in radii:
        out += img - opening(img, r)
        out -= closing(img, r) - img
    return np.clip(out, 0.0, 255.0)


def preprocess_image(img, out_w: int, out_h: int, radii: Sequence[int] | None = DEFAULT_RADII) -> np.ndarray:
    """Full pipeline; ``radii`` empty or ``None`` skips the enhancement step."""
    out = normalize(resize_bilinear(img, out_w, out_h))
    if radii:
        out = multiscale_enhance(out, radii)
    return out
