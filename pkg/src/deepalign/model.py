"""Multi-stage alignment network: stages, connection layers and the chained shape update.

Each stage is a VGG-like regressor (four
double-conv blocks, fc1, fc2).  Stages after the first receive the input
image warped to the canonical pose together with a landmark heatmap and a
feature image, stacked as three input channels.
"""
from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .geometry import FRAME, N_LANDMARKS, SimilarityTransform, check_shape, estimate_similarity
from .imaging import HEATMAP_RADIUS, generate_heatmap, standardize, warp_image

FULL_WIDTHS = (64, 128, 256, 512)
FC1_UNITS = 256
FEATURE_SIDE = FRAME // 2
CONV_LAYERS = ("conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b", "conv4a", "conv4b")
MAGIC = b"DAN1"
FORMAT_VERSION = 1


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class StageParams:
    """Parameters of one stage: conv/dense weights and batch-norm states."""

    weights: dict[str, Tensor]
    norms: dict[str, BatchNormState]
    in_channels: int = 1
    widths: tuple[int, ...] = FULL_WIDTHS
    fc1_units: int = FC1_UNITS
    dropout: float = 0.5

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int = 1, widths=FULL_WIDTHS, fc1_units: int = FC1_UNITS,
             prev_fc1_units: int | None = None, dropout: float = 0.5, dtype=np.float32) -> StageParams:
        """Fresh stage; fc2 starts at zero so an untrained stage predicts no update.

        ``prev_fc1_units`` adds the feature-image dense layer fed by the
        previous stage's fc1 (needed when ``in_channels`` is 3).
        """
        if in_channels not in (1, 3):
            raise ValueError("a stage takes 1 (image) or 3 (image, heatmap, feature) input channels")
        if (in_channels == 3) != (prev_fc1_units is not None):
            raise ValueError("the feature-image layer exists exactly when the stage has 3 input channels")
        widths = tuple(int(w) for w in widths)
        weights: dict[str, Tensor] = {}
        norms: dict[str, BatchNormState] = {}
        c = in_channels
        for i, name in enumerate(CONV_LAYERS):
            o = widths[i // 2]
            weights[name] = ad.parameter(_he_uniform(rng, (o, c, 3, 3), c * 9, dtype), dtype)
            norms[name] = BatchNormState.create(o, dtype)
            c = o
        flat = c * (FRAME // 16) ** 2
        weights["fc1.w"] = ad.parameter(_he_uniform(rng, (fc1_units, flat), flat, dtype), dtype)
        weights["fc1.b"] = ad.parameter(np.zeros(fc1_units), dtype)
        norms["fc1"] = BatchNormState.create(fc1_units, dtype)
        weights["fc2.w"] = ad.parameter(np.zeros((2 * N_LANDMARKS, fc1_units)), dtype)
        weights["fc2.b"] = ad.parameter(np.zeros(2 * N_LANDMARKS), dtype)
        if prev_fc1_units is not None:
            n_feat = FEATURE_SIDE * FEATURE_SIDE
            weights["feat.w"] = ad.parameter(_he_uniform(rng, (n_feat, prev_fc1_units), prev_fc1_units, dtype), dtype)
            weights["feat.b"] = ad.parameter(np.zeros(n_feat), dtype)
        return cls(weights, norms, in_channels, widths, fc1_units, dropout)

    @property
    def dtype(self):
        return self.weights["fc2.w"].dtype

    @property
    def has_feature(self) -> bool:
        return "feat.w" in self.weights

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors, including batch-norm scale and shift."""
        out = list(self.weights.items())
        for name, bn in self.norms.items():
            out.append((f"{name}.gamma", bn.gamma))
            out.append((f"{name}.beta", bn.beta))
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        """Every stored array (trainable and running statistics), in a fixed order."""
        out = {name: t.data for name, t in self.weights.items()}
        for name, bn in self.norms.items():
            out[f"{name}.gamma"] = bn.gamma.data
            out[f"{name}.beta"] = bn.beta.data
            out[f"{name}.mean"] = bn.running_mean
            out[f"{name}.var"] = bn.running_var
        return out

    def set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            if name in self.weights:
                self.weights[name].data = np.array(value, dtype=self.dtype)
                continue
            layer, kind = name.rsplit(".", 1)
            bn = self.norms[layer]
            if kind == "gamma":
                bn.gamma.data = np.array(value, dtype=self.dtype)
            elif kind == "beta":
                bn.beta.data = np.array(value, dtype=self.dtype)
            elif kind == "mean":
                bn.running_mean = np.array(value, dtype=self.dtype)
            elif kind == "var":
                bn.running_var = np.array(value, dtype=self.dtype)
            else:
                raise KeyError(name)

    def astype(self, dtype) -> StageParams:
        out = copy.deepcopy(self)
        for t in out.weights.values():
            t.data = t.data.astype(dtype)
        for bn in out.norms.values():
            bn.gamma.data = bn.gamma.data.astype(dtype)
            bn.beta.data = bn.beta.data.astype(dtype)
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return out

    def copy(self) -> StageParams:
        return copy.deepcopy(self)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class DanModel:
    canonical: np.ndarray
    stages: list[StageParams] = field(default_factory=list)
    radius: float = HEATMAP_RADIUS
    frame: int = FRAME

    def __post_init__(self):
        self.canonical = check_shape(self.canonical)
        if self.frame != FRAME:
            raise ValueError(f"the stage architecture fixes the frame at {FRAME} pixels")


# ---------------------------------------------------------------- stage forward


def _as_tensor(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype))


def feature_image(stage: StageParams, fc1_prev: Tensor) -> Tensor:
    """Dense 3136-unit ReLU layer on the previous fc1, reshaped to 56x56 and upscaled."""
    hidden = ad.relu(ad.dense(fc1_prev, stage.weights["feat.w"], stage.weights["feat.b"]))
    small = ad.reshape(hidden, (fc1_prev.shape[0], 1, FEATURE_SIDE, FEATURE_SIDE))
    return ad.resize_bilinear(small, FRAME, FRAME)


def _trunk(stage: StageParams, x: Tensor, train: bool, rng, trace: dict | None) -> tuple[Tensor, Tensor]:
    def record(name, t):
        if trace is not None:
            trace[name] = t.shape

    record("input", x)
    for i, name in enumerate(CONV_LAYERS):
        x = ad.conv2d(x, stage.weights[name], stride=1, padding=1)
        x = ad.relu(ad.batch_norm(x, stage.norms[name], train))
        record(name, x)
        if name.endswith("b"):
            x = ad.max_pool2d(x, 2, 2)
            record(f"pool{i // 2 + 1}", x)
    x = ad.dropout(ad.flatten(x), stage.dropout, train, rng)
    fc1 = ad.relu(ad.batch_norm(ad.dense(x, stage.weights["fc1.w"], stage.weights["fc1.b"]), stage.norms["fc1"], train))
    record("fc1", fc1)
    out = ad.dense(fc1, stage.weights["fc2.w"], stage.weights["fc2.b"])
    record("fc2", out)
    return out, fc1


def stage_graph(stage: StageParams, images, heatmaps=None, fc1_prev=None, train: bool = False,
                rng: np.random.Generator | None = None, trace: dict | None = None) -> tuple[Tensor, Tensor]:
    """Build the graph of one stage on a batch.

    ``images`` and ``heatmaps`` are (N, 112, 112); ``fc1_prev`` is the
    previous stage's (N, fc1) activations.  Returns (delta_s, fc1) tensors
    of shapes (N, 136) and (N, fc1_units).
    """
    dtype = stage.dtype
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[1:] != (FRAME, FRAME):
        raise ValueError(f"stage input images must be (N, {FRAME}, {FRAME}), got {images.shape}")
    x = _as_tensor(images[:, None], dtype)
    if stage.in_channels == 3:
        if heatmaps is None or fc1_prev is None:
            raise ValueError("this stage needs a heatmap and the previous stage's fc1 activations")
        feat = feature_image(stage, fc1_prev if isinstance(fc1_prev, Tensor) else _as_tensor(fc1_prev, dtype))
        x = ad.concat_channels([x, _as_tensor(np.asarray(heatmaps)[:, None], dtype), feat])
    return _trunk(stage, x, train, rng, trace)


def stage_forward(stage: StageParams, img, heatmap=None, feature=None, train: bool = False,
                  rng: np.random.Generator | None = None, trace: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Run one stage on a single 112x112 image, with an explicit feature image.

    A first stage (1 input channel) accepts only absent or all-zero heatmap
    and feature planes.  Returns (delta_s of length 136, fc1 activations).
    """
    img = np.asarray(img)
    for name, plane in (("image", img), ("heatmap", heatmap), ("feature", feature)):
        if plane is not None and np.shape(plane) != (FRAME, FRAME):
            raise ValueError(f"{name} must be {FRAME}x{FRAME}, got {np.shape(plane)}")
    dtype = stage.dtype
    x = _as_tensor(img[None, None], dtype)
    if stage.in_channels == 1:
        for plane in (heatmap, feature):
            if plane is not None and np.any(plane):
                raise ValueError("a first stage takes only the image; heatmap and feature must be zero")
    else:
        if heatmap is None or feature is None:
            raise ValueError("this stage needs heatmap and feature images")
        x = ad.concat_channels([x, _as_tensor(np.asarray(heatmap)[None, None], dtype),
                                _as_tensor(np.asarray(feature)[None, None], dtype)])
    out, fc1 = _trunk(stage, x, train, rng, trace)
    return out.data[0], fc1.data[0]


# ---------------------------------------------------------------- connection layers


class Connection(NamedTuple):
    image: np.ndarray
    heatmap: np.ndarray
    feature: np.ndarray | None
    transform: SimilarityTransform
    inverse: SimilarityTransform


def connection_forward(model: DanModel, t: int, img: np.ndarray, shape: np.ndarray, fc1_prev=None) -> Connection:
    """Inputs for stage ``t + 1`` (1-based) from the output ``shape`` of stage ``t``.

    ``img`` is the (standardized) original image.  The feature image uses the
    feature layer of stage ``t + 1`` and is None when ``fc1_prev`` is None.
    """
    shape = check_shape(shape)
    transform = estimate_similarity(shape, model.canonical)
    warped = warp_image(img, transform, model.frame, model.frame)
    heatmap = generate_heatmap(transform(shape), model.frame, model.frame, model.radius)
    feature = None
    if fc1_prev is not None:
        stage = model.stages[t]
        fc1 = _as_tensor(np.asarray(fc1_prev)[None], stage.dtype)
        feature = feature_image(stage, fc1).data[0, 0]
    return Connection(warped, heatmap, feature, transform, transform.inverse())


# ---------------------------------------------------------------- whole model


@dataclass
class StageInputs:
    """Everything a stage consumes for a batch of faces."""

    images: np.ndarray                      # (N, 112, 112) warped, standardized
    heatmaps: np.ndarray | None             # (N, 112, 112)
    fc1_prev: np.ndarray | None             # (N, fc1 units of the previous stage)
    transforms: list[SimilarityTransform]   # T_t per face
    shapes: np.ndarray                      # (N, 68, 2) S_{t-1}, original coordinates

    def __len__(self) -> int:
        return len(self.transforms)

    def normalized_shapes(self) -> np.ndarray:
        return np.stack([tr(s) for tr, s in zip(self.transforms, self.shapes)])

    def subset(self, idx) -> StageInputs:
        idx = np.asarray(idx)
        return StageInputs(
            self.images[idx],
            None if self.heatmaps is None else self.heatmaps[idx],
            None if self.fc1_prev is None else self.fc1_prev[idx],
            [self.transforms[i] for i in idx],
            self.shapes[idx],
        )


def prepare_inputs(model: DanModel, t: int, images: Sequence[np.ndarray], shapes: np.ndarray,
                   fc1_prev: np.ndarray | None = None) -> StageInputs:
    """Normalize standardized ``images`` so ``shapes`` align with the canonical shape.

    ``t`` is the 0-based index of the stage that will consume the inputs.
    The heatmap is only built for stages that take one.
    """
    frame = model.frame
    n = len(images)
    warped = np.empty((n, frame, frame), dtype=np.float32)
    needs_heatmap = t > 0
    heatmaps = np.empty((n, frame, frame), dtype=np.float32) if needs_heatmap else None
    transforms = []
    for i, (img, shape) in enumerate(zip(images, shapes)):
        tr = estimate_similarity(shape, model.canonical)
        transforms.append(tr)
        warped[i] = warp_image(img, tr, frame, frame)
        if heatmaps is not None:
            heatmaps[i] = generate_heatmap(tr(shape), frame, frame, model.radius)
    return StageInputs(warped, heatmaps, fc1_prev if needs_heatmap else None, transforms, np.asarray(shapes, dtype=np.float64))


def apply_stage(stage: StageParams, inputs: StageInputs, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Inference through one stage; returns (S_t in original coordinates, fc1)."""
    deltas, fc1s = [], []
    for lo in range(0, len(inputs), batch_size):
        sl = slice(lo, lo + batch_size)
        out, fc1 = stage_graph(stage, inputs.images[sl],
                               None if inputs.heatmaps is None else inputs.heatmaps[sl],
                               None if inputs.fc1_prev is None else inputs.fc1_prev[sl], train=False)
        deltas.append(out.data.astype(np.float64))
        fc1s.append(fc1.data)
    delta = np.concatenate(deltas).reshape(len(inputs), N_LANDMARKS, 2)
    base = inputs.normalized_shapes()
    shapes = np.stack([tr.inverse()(b + d) for tr, b, d in zip(inputs.transforms, base, delta)])
    return shapes, np.concatenate(fc1s)


def run_model(model: DanModel, images: Sequence[np.ndarray], inits: np.ndarray, n_stages: int | None = None,
              batch_size: int = 32, standardized: bool = False) -> np.ndarray:
    """Per-stage predictions, shape (n_stages, N, 68, 2), for faces initialized at ``inits``."""
    n_stages = len(model.stages) if n_stages is None else n_stages
    if not 1 <= n_stages <= len(model.stages):
        raise ValueError(f"model has {len(model.stages)} stages, asked for {n_stages}")
    std = list(images) if standardized else [standardize(im) for im in images]
    shapes = np.asarray(inits, dtype=np.float64)
    fc1 = None
    outputs = []
    for t in range(n_stages):
        inputs = prepare_inputs(model, t, std, shapes, fc1)
        shapes, fc1 = apply_stage(model.stages[t], inputs, batch_size)
        outputs.append(shapes)
    return np.stack(outputs)


def dan_forward(model: DanModel, img: np.ndarray, init: np.ndarray) -> list[np.ndarray]:
    """Align one image; returns the shape estimate after every stage.

    ``init`` is the starting shape in image coordinates (usually the
    canonical shape placed in a detector box).  The first stage sees the image
    warped so that ``init`` coincides with the canonical shape; when the
    caller passes an already normalized image with ``init`` equal to the
    canonical shape this warp is the identity.
    """
    init = check_shape(init)
    return list(run_model(model, [img], init[None])[:, 0])


# ---------------------------------------------------------------- container


class ModelFormatError(ValueError):
    """The file is not a well-formed model container."""


class ModelVersionError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def model_to_bytes(model: DanModel) -> bytes:
    stages = []
    blobs = []
    for stage in model.stages:
        tensors = []
        for name, arr in stage.arrays().items():
            tensors.append({"name": name, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        stages.append({
            "in_channels": stage.in_channels,
            "widths": list(stage.widths),
            "fc1_units": stage.fc1_units,
            "dropout": stage.dropout,
            "bn_eps": stage.norms["fc1"].eps,
            "bn_momentum": stage.norms["fc1"].momentum,
            "tensors": tensors,
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage_count": len(model.stages),
        "frame": model.frame,
        "radius": model.radius,
        "canonical": model.canonical.tolist(),
        "stages": stages,
    }
    text = json.dumps(manifest, indent=1).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(text)) + text + b"".join(blobs)
    return body + _checksum(body)


def _split_container(data: bytes) -> tuple[dict, memoryview]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise ModelFormatError("not a DAN model file (bad magic)")
    body, stored = data[:-8], data[-8:]
    if _checksum(body) != stored:
        raise ChecksumError("model file checksum mismatch (truncated or corrupted)")
    (length,) = struct.unpack("<I", body[4:8])
    if 8 + length > len(body):
        raise ModelFormatError("manifest runs past the end of the file")
    try:
        manifest = json.loads(body[8:8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelVersionError(f"unsupported model format version {manifest.get('format_version')!r}")
    return manifest, memoryview(body)[8 + length:]


def model_from_bytes(data: bytes) -> DanModel:
    manifest, blobs = _split_container(data)
    offset = 0
    stages = []
    try:
        for entry in manifest["stages"]:
            arrays = {}
            for t in entry["tensors"]:
                count = int(np.prod(t["shape"], dtype=np.int64))
                nbytes = 4 * count
                if offset + nbytes > len(blobs):
                    raise ModelFormatError(f"parameter blob {t['name']!r} runs past the end of the file")
                arrays[t["name"]] = np.frombuffer(blobs[offset:offset + nbytes], dtype="<f4").astype(np.float32).reshape(t["shape"])
                offset += nbytes
            stage = _empty_stage(entry, arrays)
            stage.set_arrays(arrays)
            stages.append(stage)
        if offset != len(blobs):
            raise ModelFormatError("trailing bytes after the last parameter blob")
        if len(stages) != manifest["stage_count"]:
            raise ModelFormatError("stage count disagrees with the stage list")
        return DanModel(np.array(manifest["canonical"]), stages, manifest["radius"], manifest["frame"])
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed manifest: {exc}") from exc


def _empty_stage(entry: dict, arrays: dict[str, np.ndarray]) -> StageParams:
    weights = {}
    norms = {}
    for name, arr in arrays.items():
        if name.endswith((".gamma", ".beta", ".mean", ".var")):
            layer = name.rsplit(".", 1)[0]
            if layer not in norms:
                n = arr.shape[0]
                norms[layer] = BatchNormState.create(n, np.float32, entry["bn_eps"], entry["bn_momentum"])
        else:
            weights[name] = ad.parameter(arr, np.float32)
    return StageParams(weights, norms, entry["in_channels"], tuple(entry["widths"]), entry["fc1_units"], entry["dropout"])


def save_model(model: DanModel, destination: str | PathLike) -> None:
    with open(destination, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(source: str | PathLike) -> DanModel:
    with open(source, "rb") as fh:
        return model_from_bytes(fh.read())


def read_manifest(source: str | PathLike) -> dict:
    with open(source, "rb") as fh:
        return _split_container(fh.read())[0]
