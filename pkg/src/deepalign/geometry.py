"""Face shapes, similarity transforms and the canonical (mean) shape.

Shapes are ``(N, 2)`` float arrays of (x, y) pixel coordinates; face shapes
use the 68-point iBUG markup.  Integer coordinates are pixel centers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

N_LANDMARKS = 68
FRAME = 112

# 0-based indices into the 68-point markup
LEFT_EYE = np.arange(36, 42)
RIGHT_EYE = np.arange(42, 48)
LEFT_EYE_OUTER = 36
RIGHT_EYE_OUTER = 45

# left/right correspondence used when an image is mirrored around the vertical axis
MIRROR_PERMUTATION = np.array(
    list(range(16, -1, -1))                         # jaw
    + list(range(26, 16, -1))                       # eyebrows
    + [27, 28, 29, 30]                              # nose bridge
    + [35, 34, 33, 32, 31]                          # nostrils
    + [45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40]  # eyes
    + [54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55]  # outer lips
    + [64, 63, 62, 61, 60, 67, 66, 65]              # inner lips
)


def check_shape(points, n_points: int | None = N_LANDMARKS) -> np.ndarray:
    """Return ``points`` as a float64 (N, 2) array, validating count and finiteness."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"shape must be an (N, 2) array, got {arr.shape}")
    if n_points is not None and arr.shape[0] != n_points:
        raise ValueError(f"expected {n_points} landmarks, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("shape contains non-finite coordinates")
    return arr


def pupils(shape: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eye centers as the centroids of the six landmarks of each eye."""
    return shape[LEFT_EYE].mean(axis=0), shape[RIGHT_EYE].mean(axis=0)


def interpupil_distance(shape: np.ndarray) -> float:
    left, right = pupils(shape)
    return float(np.hypot(*(right - left)))


def interocular_distance(shape: np.ndarray) -> float:
    return float(np.hypot(*(shape[RIGHT_EYE_OUTER] - shape[LEFT_EYE_OUTER])))


def mirror_shape(shape: np.ndarray, width: int) -> np.ndarray:
    """Landmarks of the image mirrored around its vertical axis (x -> width - 1 - x)."""
    out = shape[MIRROR_PERMUTATION].copy()
    out[:, 0] = (width - 1) - out[:, 0]
    return out


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> [[a, -b], [b, a]] p + (tx, ty)."""

    a: float = 1.0
    b: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def from_params(cls, scale: float = 1.0, angle: float = 0.0, tx: float = 0.0, ty: float = 0.0) -> SimilarityTransform:
        return cls(scale * math.cos(angle), scale * math.sin(angle), tx, ty)

    @property
    def scale(self) -> float:
        return math.hypot(self.a, self.b)

    @property
    def angle(self) -> float:
        return math.atan2(self.b, self.a)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, -self.b, self.tx], [self.b, self.a, self.ty], [0.0, 0.0, 1.0]])

    def is_identity(self) -> bool:
        return (self.a, self.b, self.tx, self.ty) == (1.0, 0.0, 0.0, 0.0)

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        x, y = p[..., 0], p[..., 1]
        return np.stack([self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty], axis=-1)

    def inverse(self) -> SimilarityTransform:
        det = self.a * self.a + self.b * self.b
        if not det > 0 or not math.isfinite(det):
            raise ValueError("similarity transform is not invertible")
        ia, ib = self.a / det, -self.b / det
        return SimilarityTransform(ia, ib, -(ia * self.tx - ib * self.ty), -(ib * self.tx + ia * self.ty))

    def compose(self, other: SimilarityTransform) -> SimilarityTransform:
        """The transform applying ``other`` first, then ``self``."""
        a = self.a * other.a - self.b * other.b
        b = self.b * other.a + self.a * other.b
        tx = self.a * other.tx - self.b * other.ty + self.tx
        ty = self.b * other.tx + self.a * other.ty + self.ty
        return SimilarityTransform(a, b, tx, ty)


IDENTITY = SimilarityTransform()


def estimate_similarity(src, dst) -> SimilarityTransform:
    """Least-squares similarity (no reflection) taking ``src`` points onto ``dst``."""
    src = check_shape(src, None)
    dst = check_shape(dst, None)
    if src.shape != dst.shape:
        raise ValueError(f"point sets differ in size: {src.shape} vs {dst.shape}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    ps, pd = src - mu_s, dst - mu_d
    # same summation order as the numerators, so src == dst gives a == 1 exactly
    spread = float((ps[:, 0] * ps[:, 0] + ps[:, 1] * ps[:, 1]).sum())
    if spread <= 0.0:
        raise ValueError("source points are all coincident; similarity is undefined")
    a = float((ps[:, 0] * pd[:, 0] + ps[:, 1] * pd[:, 1]).sum()) / spread
    b = float((ps[:, 0] * pd[:, 1] - ps[:, 1] * pd[:, 0]).sum()) / spread
    tx = mu_d[0] - (a * mu_s[0] - b * mu_s[1])
    ty = mu_d[1] - (b * mu_s[0] + a * mu_s[1])
    return SimilarityTransform(a, b, float(tx), float(ty))


def apply_transform(transform: SimilarityTransform, shape) -> np.ndarray:
    return transform(shape)


def invert_transform(transform: SimilarityTransform) -> SimilarityTransform:
    return transform.inverse()


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"degenerate bounding box {self}")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.width, self.height)):
            raise ValueError(f"non-finite bounding box {self}")

    @classmethod
    def from_points(cls, points, expand: float = 0.0) -> BoundingBox:
        """Tight box around ``points``, each side grown by ``expand`` of its length."""
        p = np.asarray(points, dtype=np.float64)
        lo, hi = p.min(axis=0), p.max(axis=0)
        w, h = hi - lo
        return cls(float(lo[0] - w * expand / 2), float(lo[1] - h * expand / 2),
                   float(w * (1 + expand)), float(h * (1 + expand)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x + self.width / 2, self.y + self.height / 2])

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)


def place_shape_in_bbox(shape, box: BoundingBox) -> np.ndarray:
    """Scale and translate ``shape`` so its box shares ``box``'s center and larger side."""
    shape = check_shape(shape, None)
    own = BoundingBox.from_points(shape)
    scale = max(box.width, box.height) / max(own.width, own.height)
    return (shape - own.center) * scale + box.center


def _normalize(shape: np.ndarray) -> np.ndarray:
    centered = shape - shape.mean(axis=0)
    return centered / np.sqrt((centered * centered).sum())


def procrustes_mean(shapes: Sequence[np.ndarray], max_iter: int = 100, tol: float = 1e-8) -> np.ndarray:
    """Generalized Procrustes mean, centered with unit Frobenius norm."""
    aligned = [_normalize(check_shape(s, None)) for s in shapes]
    mean = aligned[0]
    for _ in range(max_iter):
        new = np.mean([estimate_similarity(s, mean)(s) for s in aligned], axis=0)
        new = _normalize(estimate_similarity(new, mean)(new))
        moved = float(np.abs(new - mean).max())
        mean = new
        if moved < tol:
            break
    return mean


def compute_canonical_shape(training_shapes: Sequence, frame: int = FRAME, margin_fraction: float = 0.1) -> np.ndarray:
    """Mean face shape, upright, centered in a ``frame`` x ``frame`` image.

    The Procrustes mean is rotated so the line between the eye centers is
    horizontal, then scaled so its longer side spans ``1 - 2 * margin_fraction``
    of the frame.
    """
    if len(training_shapes) == 0:
        raise ValueError("cannot compute a canonical shape from an empty set")
    if not 0 <= margin_fraction < 0.5:
        raise ValueError("margin_fraction must lie in [0, 0.5)")
    mean = procrustes_mean([check_shape(s) for s in training_shapes])
    left, right = pupils(mean)
    dx, dy = right - left
    mean = SimilarityTransform.from_params(angle=-math.atan2(dy, dx))(mean)
    box = BoundingBox.from_points(mean)
    scale = frame * (1 - 2 * margin_fraction) / max(box.width, box.height)
    return (mean - box.center) * scale + (frame - 1) / 2
