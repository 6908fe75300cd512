"""Image operators used between stages: warping, landmark heatmaps, upscaling.

Grayscale images are 2-D float arrays indexed ``img[y, x]``; integer
coordinates are pixel centers and samples outside the image read as 0.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import interpolation_matrix
from .geometry import FRAME, SimilarityTransform

HEATMAP_RADIUS = 16


def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at arrays of coordinates, zero outside the image."""
    h, w = img.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros(xs.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = img[np.where(inside, yi, 0), np.where(inside, xi, 0)]
            out += np.where(inside, vals, 0.0) * (wx * wy)
    return out


def bilinear_sample(img: np.ndarray, x: float, y: float) -> float:
    return float(sample_bilinear(img, np.array(x), np.array(y)))


def warp_image(img: np.ndarray, transform: SimilarityTransform, out_w: int = FRAME, out_h: int = FRAME) -> np.ndarray:
    """Resample ``img`` so that output pixel p shows input location T^-1(p)."""
    inv = transform.inverse()
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    src_x = inv.a * xs - inv.b * ys + inv.tx
    src_y = inv.b * xs + inv.a * ys + inv.ty
    return sample_bilinear(img, src_x, src_y)


def generate_heatmap(landmarks: np.ndarray, w: int = FRAME, h: int = FRAME, radius: float = HEATMAP_RADIUS) -> np.ndarray:
    """H(x, y) = 1 / (1 + distance to the nearest landmark), zero beyond ``radius``.

    Distances are only evaluated inside the square window around each
    landmark that contains its disc.
    """
    pts = np.asarray(landmarks, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("landmarks must be finite")
    nearest = np.full((h, w), np.inf)
    for sx, sy in pts:
        x_lo, x_hi = max(math.ceil(sx - radius), 0), min(math.floor(sx + radius), w - 1)
        y_lo, y_hi = max(math.ceil(sy - radius), 0), min(math.floor(sy + radius), h - 1)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        dx = np.arange(x_lo, x_hi + 1, dtype=np.float64) - sx
        dy = np.arange(y_lo, y_hi + 1, dtype=np.float64) - sy
        d = np.sqrt(dy[:, None] * dy[:, None] + dx[None, :] * dx[None, :])
        win = nearest[y_lo:y_hi + 1, x_lo:x_hi + 1]
        np.minimum(win, d, out=win)
    within = nearest <= radius
    out = np.zeros((h, w))
    out[within] = 1.0 / (1.0 + nearest[within])
    return out


def upscale_2x(img: np.ndarray) -> np.ndarray:
    """Bilinear 56x56 -> 112x112 magnification with corner pixels aligned."""
    img = np.asarray(img)
    if img.shape != (FRAME // 2, FRAME // 2):
        raise ValueError(f"upscale_2x expects a {FRAME // 2}x{FRAME // 2} image, got {img.shape}")
    m = interpolation_matrix(FRAME, FRAME // 2, np.float64)
    return m @ img @ m.T


def standardize(img: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Zero-mean, unit-variance intensities."""
    img = np.asarray(img, dtype=np.float64)
    return (img - img.mean()) / max(float(img.std()), eps)
