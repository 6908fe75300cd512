"""Annotated face data: landmark files, PGM images, bounding boxes, splits."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import N_LANDMARKS, BoundingBox, check_shape

log = logging.getLogger(__name__)

DERIVED_BOX_EXPANSION = 0.05
IMAGE_SUFFIXES = (".pgm",)


# ---------------------------------------------------------------- landmark files


class PtsError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class PtsHeaderError(PtsError):
    pass


class PtsCountError(PtsError):
    pass


class PtsBraceError(PtsError):
    pass


class PtsNumberError(PtsError):
    pass


def parse_pts(text: str) -> np.ndarray:
    """Parse a 68-point landmark file into an (68, 2) array."""
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    while lines and not lines[-1].strip():
        lines.pop()

    def field_value(lineno: int, key: str) -> str:
        if lineno > len(lines):
            raise PtsHeaderError(f"missing '{key}:' header", lineno)
        m = re.fullmatch(rf"\s*{key}\s*:\s*(\S+)\s*", lines[lineno - 1])
        if m is None:
            raise PtsHeaderError(f"expected '{key}: <value>'", lineno)
        return m.group(1)

    field_value(1, "version")
    n_text = field_value(2, "n_points")
    try:
        n_points = int(n_text)
    except ValueError:
        raise PtsNumberError(f"n_points is not an integer: {n_text!r}", 2) from None
    if n_points != N_LANDMARKS:
        raise PtsCountError(f"expected n_points: {N_LANDMARKS}, file declares {n_points}", 2)
    if len(lines) < 3 or lines[2].strip() != "{":
        raise PtsBraceError("expected '{'", 3)

    points = []
    lineno = 3
    for lineno in range(4, len(lines) + 1):
        raw = lines[lineno - 1].strip()
        if raw == "}":
            break
        parts = raw.split()
        if len(parts) != 2:
            raise PtsNumberError(f"expected two coordinates, got {raw!r}", lineno)
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise PtsNumberError(f"non-numeric coordinate in {raw!r}", lineno) from None
    else:
        raise PtsBraceError("missing closing '}'", lineno + 1)
    if lineno != len(lines):
        raise PtsBraceError("unexpected content after '}'", lineno + 1)
    if len(points) != n_points:
        raise PtsCountError(f"declared {n_points} points but found {len(points)}", lineno)
    return check_shape(points)


def serialize_pts(shape) -> str:
    shape = check_shape(shape)
    body = "".join(f"{x:.6f} {y:.6f}\n" for x, y in shape)
    return f"version: 1\nn_points: {len(shape)}\n{{\n{body}}}\n"


def read_pts(path: str | PathLike) -> np.ndarray:
    return parse_pts(Path(path).read_text())


def write_pts(path: str | PathLike, shape) -> None:
    Path(path).write_text(serialize_pts(shape))


# ---------------------------------------------------------------- PGM images


class PgmError(ValueError):
    pass


class PgmMagicError(PgmError):
    pass


class PgmTruncatedError(PgmError):
    pass


class PgmMaxvalError(PgmError):
    pass


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def load_gray_image(data: bytes) -> np.ndarray:
    """Decode binary 8-bit PGM (P5) bytes into a float image scaled to [0, 1]."""
    if data[:2] != b"P5":
        raise PgmMagicError(f"not a binary PGM (magic {data[:2]!r})")
    pos = 2
    header = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PgmTruncatedError("incomplete PGM header")
        header.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(t) for t in header)
    except ValueError:
        raise PgmError(f"non-numeric PGM header {header!r}") from None
    if width <= 0 or height <= 0:
        raise PgmError(f"invalid PGM size {width}x{height}")
    if not 0 < maxval <= 255:
        raise PgmMaxvalError(f"maxval {maxval} unsupported (only 8-bit images)")
    pos += 1  # single whitespace byte before the raster
    raster = data[pos:pos + width * height]
    if len(raster) < width * height:
        raise PgmTruncatedError(f"raster has {len(raster)} bytes, expected {width * height}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width) / float(maxval)


def encode_gray_image(img: np.ndarray) -> bytes:
    """Encode a [0, 1] float image as 8-bit binary PGM."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got {img.shape}")
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_image(path: str | PathLike) -> np.ndarray:
    return load_gray_image(Path(path).read_bytes())


def write_image(path: str | PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_gray_image(img))


# ---------------------------------------------------------------- bounding boxes


def parse_bbox_manifest(text: str) -> dict[str, BoundingBox]:
    """Lines of ``stem x y width height``; blank lines and ``#`` comments ignored."""
    boxes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"bbox manifest line {lineno}: expected 'stem x y width height'")
        try:
            boxes[parts[0]] = BoundingBox(*(float(v) for v in parts[1:]))
        except ValueError as exc:
            raise ValueError(f"bbox manifest line {lineno}: {exc}") from None
    return boxes


def format_bbox_manifest(boxes: dict[str, BoundingBox]) -> str:
    return "".join(f"{stem} {b.x:.6f} {b.y:.6f} {b.width:.6f} {b.height:.6f}\n" for stem, b in sorted(boxes.items()))


# ---------------------------------------------------------------- records


@dataclass
class FaceRecord:
    image: np.ndarray
    shape: np.ndarray
    box: BoundingBox | None = None
    source: str = ""
    box_derived: bool = False   # box built from the ground truth, not a detector

    def __post_init__(self):
        self.shape = check_shape(self.shape)
        h, w = np.shape(self.image)
        lo, hi = self.shape.min(axis=0), self.shape.max(axis=0)
        margin = 0.5 * max(w, h)
        if lo[0] < -margin or lo[1] < -margin or hi[0] > w + margin or hi[1] > h + margin:
            log.warning("landmarks of %s lie far outside the %dx%d image", self.source or "record", w, h)


@dataclass
class LoadReport:
    issues: list[tuple[str, str]] = field(default_factory=list)

    def add(self, path, reason: str) -> None:
        self.issues.append((str(path), reason))

    def __len__(self) -> int:
        return len(self.issues)


class DatasetError(ValueError):
    pass


def load_dataset(root: str | PathLike, bbox_manifest: str | PathLike | None = None, strict: bool = False,
                 derive_missing_boxes: bool = True) -> tuple[list[FaceRecord], LoadReport]:
    """Pair same-stem image and landmark files under ``root`` (sorted by stem).

    Boxes come from ``bbox_manifest`` when given.  Records without one get
    the ground-truth box grown by 5% if ``derive_missing_boxes``.  Problems
    are collected in the report; in strict mode the first one raises.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    boxes = {}
    if bbox_manifest is not None:
        boxes = parse_bbox_manifest(Path(bbox_manifest).read_text())
    images = {p.stem: p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    annotations = {p.stem: p for p in root.iterdir() if p.suffix.lower() == ".pts"}
    report = LoadReport()

    def problem(path, reason):
        if strict:
            raise DatasetError(f"{path}: {reason}")
        report.add(path, reason)

    records = []
    for stem in sorted(set(images) | set(annotations)):
        if stem not in images:
            problem(annotations[stem], "landmark file without image")
            continue
        if stem not in annotations:
            problem(images[stem], "image without landmark file")
            continue
        try:
            image = read_image(images[stem])
            shape = read_pts(annotations[stem])
        except (OSError, ValueError) as exc:
            problem(images[stem], str(exc))
            continue
        box, derived = boxes.get(stem), False
        if box is None and derive_missing_boxes:
            box, derived = BoundingBox.from_points(shape, DERIVED_BOX_EXPANSION), True
        records.append(FaceRecord(image, shape, box, stem, derived))
    return records, report


@dataclass
class DatasetSplit:
    train: list[FaceRecord]
    validation: list[FaceRecord]
    test: list[FaceRecord] = field(default_factory=list)


def split_validation(records: Sequence[FaceRecord], n: int, seed: int = 0,
                     test: Sequence[FaceRecord] = ()) -> DatasetSplit:
    """Seeded shuffle; the first ``n`` records become the validation set."""
    if not 0 <= n < len(records):
        raise ValueError(f"validation size {n} must be smaller than the {len(records)} records")
    order = np.random.default_rng(seed).permutation(len(records))
    val = [records[i] for i in order[:n]]
    train = [records[i] for i in sorted(order[n:])]
    return DatasetSplit(train, val, list(test))
