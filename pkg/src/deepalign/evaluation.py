"""Landmark error measures, CED curves, AUC, failure rate and box-free alignment."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from os import PathLike
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (
    LEFT_EYE, LEFT_EYE_OUTER, RIGHT_EYE, RIGHT_EYE_OUTER, BoundingBox, check_shape, estimate_similarity,
    place_shape_in_bbox,
)
from .imaging import standardize, warp_image
from .model import DanModel, run_model

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.08
DEFAULT_THRESHOLD = 0.08
TWO_STEP_HEIGHT_FRACTION = 0.46


class NormKind(str, Enum):
    INTEROCULAR = "interocular"
    INTERPUPIL = "interpupil"
    DIAGONAL = "diagonal"


@dataclass(frozen=True)
class ErrorSample:
    value: float
    kind: NormKind

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"normalized error must be non-negative, got {self.value}")


def _normalizers(gt: np.ndarray, kind: NormKind, boxes) -> np.ndarray:
    """Per-face normalizing distance for a (N, 68, 2) ground-truth stack."""
    if kind is NormKind.INTEROCULAR:
        d = gt[:, RIGHT_EYE_OUTER] - gt[:, LEFT_EYE_OUTER]
    elif kind is NormKind.INTERPUPIL:
        d = gt[:, RIGHT_EYE].mean(axis=1) - gt[:, LEFT_EYE].mean(axis=1)
    else:
        if boxes is None or any(b is None for b in boxes):
            raise ValueError("diagonal normalization needs a bounding box for every face")
        return np.array([b.diagonal for b in boxes], dtype=np.float64)
    return np.sqrt((d * d).sum(axis=-1))


def normalized_errors(pred, gt, kind: NormKind | str = NormKind.INTEROCULAR,
                      boxes: Sequence[BoundingBox | None] | None = None) -> np.ndarray:
    """Mean point-to-point distance of each face divided by its normalizer, shape (N,)."""
    kind = NormKind(kind)
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 2:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} must both be (N, P, 2)")
    norm = _normalizers(gt, kind, boxes)
    if np.any(norm <= 0):
        raise ValueError(f"zero {kind.value} normalizer")
    diff = pred - gt
    return np.sqrt((diff * diff).sum(axis=-1)).mean(axis=1) / norm


def normalized_error(pred, gt, kind: NormKind | str = NormKind.INTEROCULAR,
                     box: BoundingBox | None = None) -> ErrorSample:
    kind = NormKind(kind)
    pred, gt = check_shape(pred), check_shape(gt)
    value = normalized_errors(pred[None], gt[None], kind, None if box is None else [box])[0]
    return ErrorSample(float(value), kind)


def _error_array(errors) -> np.ndarray:
    arr = np.array([e.value if isinstance(e, ErrorSample) else e for e in errors], dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("need a non-empty sequence of errors")
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError("errors must be finite and non-negative")
    return arr


@dataclass(frozen=True)
class CedCurve:
    thresholds: np.ndarray
    fractions: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("CED thresholds must be strictly increasing")

    def to_csv(self) -> str:
        return "".join(f"{t:.6g},{f:.6f}\n" for t, f in zip(self.thresholds, self.fractions))


def default_thresholds(alpha: float = DEFAULT_ALPHA, steps: int = 100) -> np.ndarray:
    return np.linspace(alpha / steps, alpha, steps)


def ced_curve(errors, thresholds=None) -> CedCurve:
    """Fraction of faces with error <= each threshold."""
    err = np.sort(_error_array(errors))
    th = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    counts = np.searchsorted(err, th, side="right")
    return CedCurve(th, counts / err.size)


def auc_alpha(errors, alpha: float = DEFAULT_ALPHA) -> float:
    """Area under the empirical CED on [0, alpha], divided by alpha.

    The CED is a step function rising by 1/n at each error, so the area is
    the sum of (alpha - e) over errors below alpha, divided by n.
    """
    if not (alpha > 0 and math.isfinite(alpha)):
        raise ValueError(f"alpha must be positive, got {alpha}")
    err = _error_array(errors)
    return float(np.clip(alpha - err, 0.0, None).sum() / (err.size * alpha))


def failure_rate(errors, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Percentage of faces whose error is at or above ``threshold``."""
    err = _error_array(errors)
    return 100.0 * np.count_nonzero(err >= threshold) / err.size


# ---------------------------------------------------------------- model evaluation


@dataclass
class StageRow:
    stage: int
    mean_error: float
    auc: float
    failure: float


@dataclass
class EvalReport:
    kind: NormKind
    alpha: float
    threshold: float
    count: int
    rows: list[StageRow]
    errors: np.ndarray                     # (stages, N) per-face errors
    sources: list[str] = field(default_factory=list)

    @property
    def final(self) -> StageRow:
        return self.rows[-1]

    def ced(self, thresholds=None, stage: int | None = None) -> CedCurve:
        row = len(self.rows) - 1 if stage is None else stage - 1
        return ced_curve(self.errors[row], default_thresholds(self.alpha) if thresholds is None else thresholds)

    def to_text(self) -> str:
        lines = [
            f"kind={self.kind.value}",
            f"alpha={self.alpha!r}",
            f"threshold={self.threshold!r}",
            f"count={self.count}",
            f"stages={len(self.rows)}",
            f"mean_error={self.final.mean_error!r}",
            f"auc={self.final.auc!r}",
            f"failure_rate={self.final.failure!r}",
        ]
        for row in self.rows:
            lines.append(f"stage{row.stage}.mean_error={row.mean_error!r}")
            lines.append(f"stage{row.stage}.auc={row.auc!r}")
            lines.append(f"stage{row.stage}.failure_rate={row.failure!r}")
        for row, errs in zip(self.rows, self.errors):
            lines.append(f"stage{row.stage}.errors=" + " ".join(repr(float(e)) for e in errs))
        if self.sources:
            lines.append("sources=" + " ".join(self.sources))
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> EvalReport:
    """Inverse of ``EvalReport.to_text``."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"report line {lineno}: expected key=value")
        values[key.strip()] = value.strip()
    try:
        n_stages = int(values["stages"])
        rows, errors = [], []
        for s in range(1, n_stages + 1):
            rows.append(StageRow(s, float(values[f"stage{s}.mean_error"]), float(values[f"stage{s}.auc"]),
                                 float(values[f"stage{s}.failure_rate"])))
            errors.append([float(v) for v in values[f"stage{s}.errors"].split()])
        return EvalReport(NormKind(values["kind"]), float(values["alpha"]), float(values["threshold"]),
                          int(values["count"]), rows, np.array(errors), values.get("sources", "").split())
    except KeyError as exc:
        raise ValueError(f"report is missing {exc.args[0]!r}") from None


def write_report(report: EvalReport, path: str | PathLike) -> None:
    Path(path).write_text(report.to_text())


def read_report(path: str | PathLike) -> EvalReport:
    return parse_report(Path(path).read_text())


def initial_shape(model: DanModel, box: BoundingBox) -> np.ndarray:
    return place_shape_in_bbox(model.canonical, box)


def predict_records(model: DanModel, records, n_stages: int | None = None, batch_size: int = 32) -> np.ndarray:
    """Per-stage predictions for records initialized from their boxes, (stages, N, 68, 2)."""
    missing = [r.source or f"#{i}" for i, r in enumerate(records) if r.box is None or r.box_derived]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise ValueError(f"{len(missing)} records lack a detector box: {shown}")
    inits = np.stack([initial_shape(model, r.box) for r in records])
    return run_model(model, [r.image for r in records], inits, n_stages, batch_size)


def summarize(errors: np.ndarray, kind: NormKind | str = NormKind.INTEROCULAR, alpha: float = DEFAULT_ALPHA,
              threshold: float = DEFAULT_THRESHOLD, sources: Sequence[str] = ()) -> EvalReport:
    """Aggregate a (stages, N) error table into a report."""
    errors = np.atleast_2d(np.asarray(errors, dtype=np.float64))
    rows = [StageRow(s + 1, float(e.mean()), auc_alpha(e, alpha), failure_rate(e, threshold))
            for s, e in enumerate(errors)]
    return EvalReport(NormKind(kind), alpha, threshold, errors.shape[1], rows, errors, list(sources))


def evaluate_model(model: DanModel, records, kind: NormKind | str = NormKind.INTEROCULAR,
                   alpha: float = DEFAULT_ALPHA, threshold: float = DEFAULT_THRESHOLD,
                   n_stages: int | None = None) -> EvalReport:
    """Align every record from its detector box and report metrics after each stage."""
    if not records:
        raise ValueError("no records to evaluate")
    kind = NormKind(kind)
    preds = predict_records(model, records, n_stages)
    gt = np.stack([r.shape for r in records])
    boxes = [r.box for r in records]
    errors = np.stack([normalized_errors(p, gt, kind, boxes) for p in preds])
    return summarize(errors, kind, alpha, threshold, [r.source for r in records])


# ---------------------------------------------------------------- box-free alignment


def centered_square_box(width: int, height: int, height_fraction: float = TWO_STEP_HEIGHT_FRACTION) -> BoundingBox:
    """Square box in the middle of the image with side ``height_fraction * height``."""
    side = height_fraction * height
    if not 0 < side < min(width, height):
        raise ValueError(f"a {side:g}-pixel box does not fit a {width}x{height} image")
    return BoundingBox((width - side) / 2, (height - side) / 2, side, side)


def align(model: DanModel, img: np.ndarray, box: BoundingBox) -> np.ndarray:
    return run_model(model, [img], initial_shape(model, box)[None])[-1, 0]


def two_step_align(model: DanModel, img: np.ndarray, height_fraction: float = TWO_STEP_HEIGHT_FRACTION) -> np.ndarray:
    """Align a face without a detector box.

    Step one starts from a centered square box.  Step two warps the image so
    the step-one estimate matches the canonical shape, starts again from the
    box of the warped estimate, and maps the result back.
    """
    h, w = np.shape(img)
    box = centered_square_box(w, h, height_fraction)
    log.info("step-1 box side %g", box.width)
    std = standardize(img)
    first = run_model(model, [std], initial_shape(model, box)[None], standardized=True)[-1, 0]
    try:
        transform = estimate_similarity(first, model.canonical)
        inverse = transform.inverse()
        warped_shape = transform(first)
        warped_box = BoundingBox.from_points(warped_shape)
    except ValueError as exc:
        log.warning("step-1 shape is degenerate (%s); keeping the step-1 result", exc)
        return first
    warped = warp_image(std, transform, model.frame, model.frame)
    second = run_model(model, [warped], initial_shape(model, warped_box)[None], standardized=True)[-1, 0]
    return inverse(second)
