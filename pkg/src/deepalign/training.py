"""Sequential stage-wise training with the inter-pupil normalized landmark loss."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .datasets import FaceRecord, split_validation
from .evaluation import NormKind, normalized_errors
from .geometry import (
    BoundingBox, SimilarityTransform, check_shape, compute_canonical_shape, interpupil_distance, mirror_shape,
    place_shape_in_bbox, pupils,
)
from .imaging import standardize, warp_image
from .model import (
    FULL_WIDTHS, DanModel, StageInputs, StageParams, apply_stage, prepare_inputs,
    stage_graph,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 0.001
    batch_size: int = 64
    augment_count: int = 10
    validation_size: int = 100
    patience: int = 10
    max_epochs: int = 100
    dropout: float = 0.5
    seed: int = 0
    widths: tuple[int, ...] = FULL_WIDTHS
    fc1_units: int = 256
    margin: float = 0.1
    rotation_std: float = 20.0          # degrees
    scale_std: float = 0.1
    translation_std: float = 0.05       # fraction of the larger side of the shape's box
    mirror_probability: float = 0.5
    target_error: float = 0.0           # stop a stage once validation error drops below this
    stop_when_stalled: bool = False     # stop adding stages that do not improve validation error

    def __post_init__(self):
        if not self.step_size >= 0:
            raise ValueError("step_size must be non-negative")
        for name in ("batch_size", "augment_count", "patience", "max_epochs", "fc1_units"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.validation_size < 0:
            raise ValueError("validation_size must be non-negative")
        if not 0 <= self.dropout <= 1:
            raise ValueError("dropout must lie in [0, 1]")
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ValueError("widths must be four positive channel counts")
        for name in ("rotation_std", "scale_std", "translation_std", "target_error"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.mirror_probability <= 1:
            raise ValueError("mirror_probability must lie in [0, 1]")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- loss and optimizer


def interpupil_loss(predicted, ground_truth) -> float:
    """Mean landmark distance divided by the ground truth's inter-pupil distance."""
    predicted, ground_truth = check_shape(predicted), check_shape(ground_truth)
    d = interpupil_distance(ground_truth)
    if not d > 0:
        raise ValueError("ground truth has zero inter-pupil distance")
    return float(np.sqrt(((predicted - ground_truth) ** 2).sum(axis=1)).mean() / d)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameters and a new state."""
    if params.keys() != grads.keys():
        raise ValueError("parameters and gradients name different tensors")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient of {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (p - update).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_params, AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------- augmentation


def _mirror_box(box: BoundingBox, width: int) -> BoundingBox:
    return BoundingBox((width - 1) - box.x - box.width, box.y, box.width, box.height)


def augment(record: FaceRecord, rng: np.random.Generator, count: int = 10,
            config: TrainConfig | None = None) -> list[FaceRecord]:
    """Randomly mirrored, rotated, scaled and shifted copies of ``record``.

    The face moves inside the image while the box stays where it was, so
    each copy also starts from a different initialization.
    """
    cfg = config or TrainConfig()
    h, w = record.image.shape
    out = []
    for k in range(count):
        image, shape, box = record.image, record.shape, record.box
        if rng.random() < cfg.mirror_probability:
            image = image[:, ::-1].copy()
            shape = mirror_shape(shape, w)
            box = None if box is None else _mirror_box(box, w)
        angle = math.radians(cfg.rotation_std * rng.standard_normal())
        scale = 1.0 + cfg.scale_std * rng.standard_normal()
        extent = BoundingBox.from_points(shape)
        shift = cfg.translation_std * max(extent.width, extent.height) * rng.standard_normal(2)
        c = extent.center
        rot = SimilarityTransform.from_params(scale, angle)
        rc = rot(c)
        transform = SimilarityTransform(rot.a, rot.b, c[0] - rc[0] + shift[0], c[1] - rc[1] + shift[1])
        if not transform.is_identity():
            image = warp_image(image, transform, w, h)
            shape = transform(shape)
        out.append(FaceRecord(image.copy(), shape.copy(), box, f"{record.source}#{k}", record.box_derived))
    return out


def augment_records(records: Sequence[FaceRecord], config: TrainConfig) -> list[FaceRecord]:
    """Augment every record with its own seeded generator."""
    out = []
    for i, rec in enumerate(records):
        out.extend(augment(rec, np.random.default_rng([config.seed, 4, i]), config.augment_count, config))
    return out


# ---------------------------------------------------------------- samples


@dataclass
class Samples:
    """Standardized images with ground truth and the box-derived initial shapes."""

    images: list[np.ndarray]
    targets: np.ndarray         # (N, 68, 2)
    inits: np.ndarray           # (N, 68, 2)

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_records(cls, records: Sequence[FaceRecord], canonical: np.ndarray) -> Samples:
        if not records:
            raise ValueError("no records")
        missing = [r.source for r in records if r.box is None]
        if missing:
            raise ValueError(f"records without a bounding box: {', '.join(missing[:10])}")
        return cls([standardize(r.image).astype(np.float32) for r in records],
                   np.stack([r.shape for r in records]),
                   np.stack([place_shape_in_bbox(canonical, r.box) for r in records]))


@dataclass
class StageState:
    """Outputs of the trained stages for a sample set (initial shapes before any stage)."""

    shapes: np.ndarray
    fc1: np.ndarray | None = None
    stage: int = 0              # number of stages already applied


def advance(model: DanModel, samples: Samples, state: StageState, batch_size: int = 32) -> StageState:
    t = state.stage
    inputs = prepare_inputs(model, t, samples.images, state.shapes, state.fc1)
    shapes, fc1 = apply_stage(model.stages[t], inputs, batch_size)
    return StageState(shapes, fc1, t + 1)


def prefix_state(model: DanModel, samples: Samples, n_stages: int) -> StageState:
    state = StageState(samples.inits.copy())
    for _ in range(n_stages):
        state = advance(model, samples, state)
    return state


def mean_interocular(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(normalized_errors(pred, gt, NormKind.INTEROCULAR).mean())


# ---------------------------------------------------------------- stage training


@dataclass
class EpochRecord:
    stage: int          # 1-based
    epoch: int
    train_loss: float
    val_error: float
    wall_time: float

    HEADER = "stage,epoch,train_loss,val_error,wall_time"

    def csv(self) -> str:
        loss = "" if math.isnan(self.train_loss) else f"{self.train_loss:.6f}"
        return f"{self.stage},{self.epoch},{loss},{self.val_error:.6f},{self.wall_time:.3f}"


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    out = [order[i:i + size] for i in range(0, len(order), size)]
    if len(out) > 1 and len(out[-1]) == 1:   # batch statistics need two samples
        out[-2] = np.concatenate(out[-2:])
        out.pop()
    return out


def _targets(inputs: StageInputs, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Base shapes, targets and inter-pupil normalizers in the canonical frame."""
    base = inputs.normalized_shapes()
    tgt = np.stack([tr(s) for tr, s in zip(inputs.transforms, targets)])
    left, right = pupils(tgt.transpose(1, 0, 2))
    norm = np.sqrt(((right - left) ** 2).sum(axis=-1))
    if np.any(norm <= 0):
        raise ValueError("a training target has zero inter-pupil distance")
    return base, tgt, norm


def train_stage(model: DanModel, t: int, train: Samples, val: Samples, config: TrainConfig,
                train_state: StageState | None = None, val_state: StageState | None = None,
                on_epoch: Callable[[EpochRecord], None] | None = None,
                stage: StageParams | None = None) -> tuple[StageParams, list[EpochRecord]]:
    """Train stage ``t`` (0-based) with the stages before it frozen.

    Earlier stages only run in inference mode to produce this stage's inputs.
    Returns the parameters with the lowest validation error (mean inter-ocular)
    and the per-epoch log; epoch 0 is the untrained stage.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if t > len(model.stages):
        raise ValueError(f"stage {t} needs stages 0..{t - 1} to be trained first")
    dtype = model.stages[0].dtype if model.stages else np.float32
    if stage is None:
        stage = StageParams.init(
            np.random.default_rng([config.seed, 1, t]), 1 if t == 0 else 3, config.widths, config.fc1_units,
            None if t == 0 else model.stages[t - 1].fc1_units, config.dropout, dtype)
    stage = stage.copy()
    frozen = DanModel(model.canonical, list(model.stages[:t]), model.radius, model.frame)
    train_state = train_state or prefix_state(frozen, train, t)
    val_state = val_state or prefix_state(frozen, val, t)
    train_in = prepare_inputs(frozen, t, train.images, train_state.shapes, train_state.fc1)
    val_in = prepare_inputs(frozen, t, val.images, val_state.shapes, val_state.fc1)
    base, target, norm = _targets(train_in, train.targets)

    def val_error(params: StageParams) -> float:
        return mean_interocular(apply_stage(params, val_in)[0], val.targets)

    shuffle_rng = np.random.default_rng([config.seed, 2, t])
    dropout_rng = np.random.default_rng([config.seed, 3, t])
    named = stage.parameters()
    adam = AdamState()
    start = time.perf_counter()
    best_err = val_error(stage)
    best = stage.copy()
    history = [EpochRecord(t + 1, 0, float("nan"), best_err, time.perf_counter() - start)]
    if on_epoch:
        on_epoch(history[-1])
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        total = 0.0
        for idx in _batches(shuffle_rng.permutation(len(train)), config.batch_size):
            batch = train_in.subset(idx)
            # a single-sample set has no batch statistics; train through the running ones
            delta, _ = stage_graph(stage, batch.images, batch.heatmaps, batch.fc1_prev,
                                   train=len(idx) > 1, rng=dropout_rng)
            loss = ad.landmark_loss(delta, base[idx], target[idx], norm[idx])
            ad.backward(loss)
            total += float(loss.data) * len(idx)
            params = {name: p.data for name, p in named}
            grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in named}
            params, adam = adam_step(params, grads, adam, config.step_size)
            for name, p in named:
                p.data = params[name]
        err = val_error(stage)
        history.append(EpochRecord(t + 1, epoch, total / len(train), err, time.perf_counter() - start))
        if on_epoch:
            on_epoch(history[-1])
        if err < best_err:
            best_err, best, stale = err, stage.copy(), 0
        else:
            stale += 1
        if stale >= config.patience or best_err < config.target_error:
            break
    return best, history


@dataclass
class TrainResult:
    model: DanModel
    history: list[EpochRecord]
    split: tuple[list[FaceRecord], list[FaceRecord]]


def train_model(records: Sequence[FaceRecord], n_stages: int, config: TrainConfig,
                validation: Sequence[FaceRecord] | None = None,
                on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Compute the canonical shape and train ``n_stages`` stages one after another.

    Without an explicit ``validation`` set, ``config.validation_size`` records
    are held out of ``records``.  Augmentation applies to the training part only.
    """
    if n_stages < 1:
        raise ValueError("need at least one stage")
    if not records:
        raise ValueError("no training records")
    if validation is None:
        split = split_validation(records, config.validation_size, config.seed)
        train_recs, val_recs = split.train, split.validation
        if not val_recs:
            raise ValueError("validation_size must be positive when no validation set is given")
    else:
        train_recs, val_recs = list(records), list(validation)
        if not val_recs:
            raise ValueError("empty validation set")
    canonical = compute_canonical_shape([r.shape for r in train_recs], margin_fraction=config.margin)
    augmented = augment_records(train_recs, config)
    log.info("training on %d samples (%d records), validating on %d", len(augmented), len(train_recs), len(val_recs))
    train = Samples.from_records(augmented, canonical)
    val = Samples.from_records(val_recs, canonical)

    model = DanModel(canonical)
    history: list[EpochRecord] = []
    train_state, val_state = StageState(train.inits.copy()), StageState(val.inits.copy())
    previous = mean_interocular(val.inits, val.targets)
    for t in range(n_stages):
        stage, stage_log = train_stage(model, t, train, val, config, train_state, val_state, on_epoch)
        history.extend(stage_log)
        best = min(r.val_error for r in stage_log)
        if config.stop_when_stalled and t > 0 and not best < previous:
            log.info("stage %d did not reduce the validation error; stopping at %d stages", t + 1, t)
            break
        model.stages.append(stage)
        previous = best
        if t + 1 < n_stages:
            train_state = advance(model, train, train_state)
            val_state = advance(model, val, val_state)
    return TrainResult(model, history, (train_recs, val_recs))
