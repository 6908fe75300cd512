"""Procedurally rendered grayscale faces with 68-point annotations.

Used as a stand-in for licensed face datasets in tests and desk-scale
experiments.  Each face is a bright head region with dark strokes along the
brows, eyes, nose and lips, posed by a random similarity transform over a
textured background; a detector-like box is jittered around the landmarks.

    python -m deepalign.synthetic OUT_DIR --count 300 --seed 0
"""
from __future__ import annotations

import argparse
import math
from pathlib import Path

import numpy as np

from .datasets import FaceRecord, format_bbox_manifest, write_image, write_pts
from .geometry import BoundingBox, SimilarityTransform


def template_shape() -> np.ndarray:
    """Mirror-symmetric 68-point face in a unit frame (x right, y down)."""
    pts = []
    for k in range(17):
        phi = math.pi * k / 16
        pts.append((-0.95 * math.cos(phi), -0.25 + 1.2 * math.sin(phi)))
    brow_x = np.linspace(-0.82, -0.18, 5)
    brow_y = -0.58 - 0.1 * np.sin(np.linspace(0.3, math.pi - 0.3, 5))
    pts += list(zip(brow_x, brow_y))
    pts += list(zip(-brow_x[::-1], brow_y[::-1]))
    pts += [(0.0, y) for y in np.linspace(-0.4, 0.05, 4)]
    pts += [(x, 0.2 + 0.04 * (1 - abs(x) / 0.2)) for x in np.linspace(-0.2, 0.2, 5)]
    for cx, inner_first in ((-0.42, False), (0.42, True)):
        w, h, cy = 0.3, 0.12, -0.3
        left, right = (cx - w / 2, cy), (cx + w / 2, cy)
        tl, tr = (cx - w / 6, cy - h / 2), (cx + w / 6, cy - h / 2)
        br, bl = (cx + w / 6, cy + h / 2), (cx - w / 6, cy + h / 2)
        pts += [left, tl, tr, right, br, bl]
    for k in range(12):
        a = math.pi - k * 2 * math.pi / 12
        pts.append((0.34 * math.cos(a), 0.52 - 0.12 * math.sin(a)))
    for k in range(8):
        a = math.pi - k * 2 * math.pi / 8
        pts.append((0.22 * math.cos(a), 0.52 - 0.04 * math.sin(a)))
    return np.array(pts)


# landmark chains drawn as dark strokes; (indices, closed)
_STROKES = [
    (range(17, 22), False), (range(22, 27), False),
    (range(27, 31), False), (range(31, 36), False),
    (range(36, 42), True), (range(42, 48), True),
    (range(48, 60), True), (range(60, 68), True),
    (range(0, 17), False),
]


def _deform(base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    s = base.copy()
    s[:17, 0] *= 1 + 0.08 * rng.standard_normal()               # jaw width
    s[:17, 1] = -0.25 + (s[:17, 1] + 0.25) * (1 + 0.06 * rng.standard_normal())
    spread = 0.04 * rng.standard_normal()                        # eye separation
    s[36:42, 0] -= spread
    s[42:48, 0] += spread
    open_eye = 1 + 0.25 * rng.standard_normal()
    for eye in (slice(36, 42), slice(42, 48)):
        cy = s[eye, 1].mean()
        s[eye, 1] = cy + (s[eye, 1] - cy) * max(open_eye, 0.2)
    s[17:27, 1] += 0.04 * rng.standard_normal()                  # brow height
    s[27:36, 1] += np.linspace(0, 0.05, 9) * rng.standard_normal()  # nose length
    mouth_open = max(0.0, 0.06 * rng.standard_normal() + 0.02)
    s[60:68, 1] += np.where(s[60:68, 1] > 0.52, mouth_open, -mouth_open / 2)
    s[56:59, 1] += mouth_open
    s[48:68, 0] *= 1 + 0.1 * rng.standard_normal()               # mouth width
    return s + 0.008 * rng.standard_normal(s.shape)


def _segment_distance(px: np.ndarray, py: np.ndarray, a, b) -> np.ndarray:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    L2 = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0, 1) if L2 > 0 else 0.0
    return np.hypot(px - ax - t * dx, py - ay - t * dy)


def _inside_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        crosses = (y1 > py) != (y0 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
        x0, y0 = x1, y1
    return inside


def render_face(shape: np.ndarray, width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a face whose features follow ``shape`` (image coordinates)."""
    py, px = np.mgrid[0:height, 0:width].astype(np.float64)
    gx, gy = rng.uniform(-0.3, 0.3, 2)
    img = 0.35 + 0.1 * (gx * (px / width - 0.5) + gy * (py / height - 0.5)) * 2
    img = img + 0.04 * rng.standard_normal((height // 8 + 1, width // 8 + 1)).repeat(8, 0).repeat(8, 1)[:height, :width]

    # head outline: jaw plus an arc over the forehead
    jaw = shape[:17]
    brow_top = shape[17:27, 1].min()
    chin_to_brow = jaw[8, 1] - brow_top
    center = (jaw[0] + jaw[16]) / 2
    half = (jaw[16] - jaw[0]) / 2
    up = np.array([half[1], -half[0]])
    up = up / np.hypot(*up) * 0.45 * chin_to_brow
    arc = [center + math.cos(a) * half + math.sin(a) * up * 1.6 for a in np.linspace(0, math.pi, 12)]
    head = np.vstack([jaw, np.array(arc[1:-1])])
    skin = 0.65 + 0.1 * rng.standard_normal()
    img = np.where(_inside_polygon(px, py, head), skin, img)

    scale = np.hypot(*(shape[45] - shape[36]))
    sigma = max(0.6, 0.025 * scale)
    for idx, closed in _STROKES:
        chain = shape[list(idx)]
        segs = list(zip(chain[:-1], chain[1:]))
        if closed:
            segs.append((chain[-1], chain[0]))
        d = np.min([_segment_distance(px, py, a, b) for a, b in segs], axis=0)
        strength = 0.2 if idx == range(0, 17) else 0.45
        img -= strength * np.exp(-0.5 * (d / sigma) ** 2)
    for eye in (slice(36, 42), slice(42, 48)):
        c = shape[eye].mean(axis=0)
        r = 0.3 * np.hypot(*(shape[eye][3] - shape[eye][0]))
        img -= 0.35 * np.exp(-0.5 * ((px - c[0]) ** 2 + (py - c[1]) ** 2) / (0.5 * r) ** 2)
    img += 0.02 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def detector_box(shape: np.ndarray, rng: np.random.Generator, jitter: float = 0.04) -> BoundingBox:
    """Square box around the landmarks with detector-like center and size noise."""
    tight = BoundingBox.from_points(shape)
    side = max(tight.width, tight.height) * (1.05 + jitter * rng.standard_normal())
    cx, cy = tight.center + jitter * side * rng.standard_normal(2)
    return BoundingBox(float(cx - side / 2), float(cy - side / 2), float(side), float(side))


def generate_face(rng: np.random.Generator, size: int = 128, face_fraction: float = 0.55,
                  rotation_std: float = 10.0, offset_std: float = 0.05) -> FaceRecord:
    """One synthetic face record with a jittered detector box."""
    unit = _deform(template_shape(), rng)
    scale = size * face_fraction / 2 * (1 + 0.08 * rng.standard_normal())
    angle = math.radians(rotation_std * rng.standard_normal())
    center = (size - 1) / 2 + offset_std * size * rng.standard_normal(2)
    shape = SimilarityTransform.from_params(scale, angle, *center)(unit - [0.0, 0.15])
    image = render_face(shape, size, size, rng)
    return FaceRecord(image, shape, detector_box(shape, rng), box_derived=False)


def generate_faces(count: int, seed: int = 0, size: int = 128, **kwargs) -> list[FaceRecord]:
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        rec = generate_face(rng, size, **kwargs)
        rec.source = f"face_{i:05d}"
        records.append(rec)
    return records


def write_dataset(out_dir: str | Path, records: list[FaceRecord]) -> Path:
    """Write PGM images, landmark files and a ``bboxes.txt`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_image(out / f"{rec.source}.pgm", rec.image)
        write_pts(out / f"{rec.source}.pts", rec.shape)
    manifest = out / "bboxes.txt"
    manifest.write_text(format_bbox_manifest({r.source: r.box for r in records if r.box is not None}))
    return manifest


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description="write a synthetic annotated face dataset")
    parser.add_argument("out_dir")
    parser.add_argument("--count", type=int, default=300)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--size", type=int, default=128)
    args = parser.parse_args(argv)
    manifest = write_dataset(args.out_dir, generate_faces(args.count, args.seed, args.size))
    print(f"wrote {args.count} faces to {args.out_dir} (boxes in {manifest})")


if __name__ == "__main__":
    main()
