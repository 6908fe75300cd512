"""Command-line interface: ``deepalign train|eval|align|ced``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import tempfile
from pathlib import Path

from .datasets import DatasetError, load_dataset, read_image, write_pts
from .evaluation import (
    DEFAULT_ALPHA, DEFAULT_THRESHOLD, TWO_STEP_HEIGHT_FRACTION, NormKind, align, default_thresholds,
    evaluate_model, read_report, two_step_align,
)
from .geometry import BoundingBox
from .model import ModelFormatError, load_model, model_to_bytes
from .training import EpochRecord, TrainConfig, train_model

log = logging.getLogger("deepalign")


class ConfigError(ValueError):
    pass


# keys beyond the training hyper-parameters; value is the default
RUN_KEYS = {
    "data_root": None,
    "bbox_manifest": None,
    "output_dir": None,
    "model": None,
    "stages": 2,
    "kind": NormKind.INTEROCULAR.value,
    "alpha": DEFAULT_ALPHA,
    "threshold": DEFAULT_THRESHOLD,
}


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(key: str, value: str, default):
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.replace(",", " ").split())
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {type(default).__name__}") from None
    return value


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    data_root: Path
    output_dir: Path
    model: Path
    bbox_manifest: Path | None = None
    stages: int = 2
    kind: NormKind = NormKind.INTEROCULAR
    alpha: float = DEFAULT_ALPHA
    threshold: float = DEFAULT_THRESHOLD

    def to_text(self) -> str:
        lines = ["# resolved configuration"]
        for name in TrainConfig.field_names():
            value = getattr(self.train, name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{name} = {value}")
        lines += [
            f"data_root = {self.data_root}",
            f"bbox_manifest = {'' if self.bbox_manifest is None else self.bbox_manifest}",
            f"output_dir = {self.output_dir}",
            f"model = {self.model}",
            f"stages = {self.stages}",
            f"kind = {self.kind.value}",
            f"alpha = {self.alpha!r}",
            f"threshold = {self.threshold!r}",
        ]
        return "\n".join(lines) + "\n"


def load_run_config(path: str | os.PathLike) -> RunConfig:
    """Read and validate a run configuration; relative paths are taken from the file's directory."""
    path = Path(path)
    try:
        entries = parse_config_text(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(entries) - set(defaults) - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    train_kwargs = {k: _convert(k, v, defaults[k]) for k, v in entries.items() if k in defaults}
    run = {k: v for k, v in entries.items() if k in RUN_KEYS}
    try:
        train = TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    base = path.parent

    def resolve(key):
        value = run.get(key) or None
        return None if value is None else (base / value).resolve()

    data_root = resolve("data_root")
    if data_root is None or not data_root.is_dir():
        raise ConfigError(f"data_root must name an existing directory, got {run.get('data_root')!r}")
    manifest = resolve("bbox_manifest")
    if manifest is not None and not manifest.is_file():
        raise ConfigError(f"bbox_manifest {manifest} does not exist")
    output_dir = resolve("output_dir")
    if output_dir is None:
        raise ConfigError("output_dir is required")
    if output_dir.exists() and not output_dir.is_dir():
        raise ConfigError(f"output_dir {output_dir} is not a directory")
    model = resolve("model") or output_dir / "model.dan"
    if not (model.parent.is_dir() or model.parent == output_dir):
        raise ConfigError(f"directory for model file {model} does not exist")
    stages = _convert("stages", run.get("stages", "2"), 2)
    if stages < 1:
        raise ConfigError("stages must be at least 1")
    try:
        kind = NormKind(run.get("kind", RUN_KEYS["kind"]))
    except ValueError:
        raise ConfigError(f"kind must be one of {', '.join(k.value for k in NormKind)}") from None
    alpha = _convert("alpha", run.get("alpha", repr(DEFAULT_ALPHA)), DEFAULT_ALPHA)
    threshold = _convert("threshold", run.get("threshold", repr(DEFAULT_THRESHOLD)), DEFAULT_THRESHOLD)
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    return RunConfig(train, data_root, output_dir, model, manifest, stages, kind, alpha, threshold)


def _write_atomic(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "resolved_config.txt").write_text(cfg.to_text())
    records, report = load_dataset(cfg.data_root, cfg.bbox_manifest)
    for path, reason in report.issues:
        log.warning("skipped %s: %s", path, reason)
    if not records:
        raise DatasetError(f"no usable records under {cfg.data_root}")
    log_path = cfg.output_dir / "train_log.csv"
    with open(log_path, "w") as fh:
        fh.write(EpochRecord.HEADER + "\n")

        def on_epoch(rec: EpochRecord) -> None:
            fh.write(rec.csv() + "\n")
            fh.flush()
            log.info("stage %d epoch %d: val error %.5f", rec.stage, rec.epoch, rec.val_error)

        result = train_model(records, cfg.stages, cfg.train, on_epoch=on_epoch)
    _write_atomic(cfg.model, model_to_bytes(result.model))
    print(f"wrote {cfg.model} ({len(result.model.stages)} stages); log in {log_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    records, report = load_dataset(args.data, args.bbox_manifest, derive_missing_boxes=False)
    for path, reason in report.issues:
        log.warning("skipped %s: %s", path, reason)
    if not records:
        raise DatasetError(f"no usable records under {args.data}")
    result = evaluate_model(model, records, args.kind, args.alpha, args.threshold)
    text = result.to_text()
    summary = [f"faces: {result.count}", f"{'stage':>5} {'mean':>10} {'auc':>8} {'failure%':>9}"]
    summary += [f"{r.stage:>5} {r.mean_error:>10.5f} {r.auc:>8.4f} {r.failure:>9.2f}" for r in result.rows]
    print("\n".join(summary))
    if args.report:
        _write_atomic(Path(args.report), text.encode())
    if args.ced:
        _write_atomic(Path(args.ced), result.ced(default_thresholds(args.alpha, args.ced_steps)).to_csv().encode())
    return 0


def cmd_align(args) -> int:
    model = load_model(args.model)
    img = read_image(args.image)
    if args.two_step:
        shape = two_step_align(model, img, args.height_fraction)
    else:
        shape = align(model, img, BoundingBox(*args.bbox))
    write_pts(args.out, shape)
    print(f"wrote {args.out}")
    return 0


def cmd_ced(args) -> int:
    report = read_report(args.report)
    alpha = report.alpha if args.alpha is None else args.alpha
    curve = report.ced(default_thresholds(alpha, args.steps), args.stage)
    if args.out:
        _write_atomic(Path(args.out), curve.to_csv().encode())
    else:
        sys.stdout.write(curve.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepalign", description="multi-stage facial landmark alignment")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a key = value config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on an annotated directory")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bbox-manifest")
    p.add_argument("--kind", choices=[k.value for k in NormKind], default=NormKind.INTEROCULAR.value)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--report", help="write key=value report here")
    p.add_argument("--ced", help="write threshold,fraction CSV here")
    p.add_argument("--ced-steps", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("align", help="localize landmarks in one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    init = p.add_mutually_exclusive_group(required=True)
    init.add_argument("--bbox", type=float, nargs=4, metavar=("X", "Y", "W", "H"))
    init.add_argument("--two-step", action="store_true", help="start from a centered box, then refine")
    p.add_argument("--height-fraction", type=float, default=TWO_STEP_HEIGHT_FRACTION)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("ced", help="re-emit a CED curve from a stored report")
    p.add_argument("--report", required=True)
    p.add_argument("--stage", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ced)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ModelFormatError, ValueError, OSError) as exc:
        print(f"deepalign {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
