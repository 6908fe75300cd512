"""End-to-end acceptance criteria; each test prints one PASS/FAIL line in the run summary.

The two training experiments take several minutes each on one CPU core.
"""
import time

import numpy as np
import pytest

from deepalign import autodiff as ad
from deepalign import cli
from deepalign import evaluation as ev
from deepalign.datasets import encode_gray_image, load_gray_image, parse_pts, serialize_pts
from deepalign.geometry import IDENTITY, SimilarityTransform, compute_canonical_shape, estimate_similarity, place_shape_in_bbox
from deepalign.imaging import generate_heatmap, warp_image
from deepalign.model import (
    CONV_LAYERS, DanModel, StageParams, dan_forward, load_model, model_from_bytes, model_to_bytes, save_model,
    stage_graph,
)
from deepalign.synthetic import generate_faces, write_dataset
from deepalign.training import TrainConfig, augment, train_model

STAGE_LAYERS = [
    ("conv1a", (112, 112, 1), (112, 112, 64)),
    ("conv1b", (112, 112, 64), (112, 112, 64)),
    ("pool1", (112, 112, 64), (56, 56, 64)),
    ("conv2a", (56, 56, 64), (56, 56, 128)),
    ("conv2b", (56, 56, 128), (56, 56, 128)),
    ("pool2", (56, 56, 128), (28, 28, 128)),
    ("conv3a", (28, 28, 128), (28, 28, 256)),
    ("conv3b", (28, 28, 256), (28, 28, 256)),
    ("pool3", (28, 28, 256), (14, 14, 256)),
    ("conv4a", (14, 14, 256), (14, 14, 512)),
    ("conv4b", (14, 14, 512), (14, 14, 512)),
    ("pool4", (14, 14, 512), (7, 7, 512)),
    ("fc1", (7, 7, 512), (1, 1, 256)),
    ("fc2", (1, 1, 256), (1, 1, 136)),
]


@pytest.fixture
def criterion(record_property):
    def declare(name):
        record_property("criterion", name)
        return lambda text: record_property("detail", text)
    return declare


# ---------------------------------------------------------------- gradients


def f64(rng, *shape):
    return ad.parameter(rng.standard_normal(shape), np.float64)


def op_cases(rng):
    """(name, loss builder, parameters) for every differentiable operation."""
    proj = lambda *shape: ad.Tensor(rng.standard_normal(shape))
    cases = []
    x, k, v = f64(rng, 2, 3, 7, 7), f64(rng, 4, 3, 3, 3), proj(2, 4, 7, 7)
    cases.append(("conv2d", lambda x=x, k=k, v=v: ad.mul(ad.conv2d(x, k, 1, 1), v).sum(), [x, k]))
    x, k, v = f64(rng, 2, 2, 8, 8), f64(rng, 3, 2, 3, 3), proj(2, 3, 3, 3)
    cases.append(("conv2d stride 2", lambda x=x, k=k, v=v: ad.mul(ad.conv2d(x, k, 2, 0), v).sum(), [x, k]))
    x, v = ad.parameter(rng.permutation(128).reshape(2, 1, 8, 8) * 0.1, np.float64), proj(2, 1, 4, 4)
    cases.append(("max_pool2d", lambda x=x, v=v: ad.mul(ad.max_pool2d(x), v).sum(), [x]))
    x, w, b, v = f64(rng, 3, 6), f64(rng, 5, 6), f64(rng, 5), proj(3, 5)
    cases.append(("dense", lambda x=x, w=w, b=b, v=v: ad.mul(ad.dense(x, w, b), v).sum(), [x, w, b]))
    data = rng.standard_normal((4, 8))
    data[np.abs(data) < 0.01] = 0.5
    x, v = ad.parameter(data, np.float64), proj(4, 8)
    cases.append(("relu", lambda x=x, v=v: ad.mul(ad.relu(x), v).sum(), [x]))
    x, v = f64(rng, 3, 2, 4, 4), proj(3, 2, 4, 4)
    bn = ad.BatchNormState.create(2, np.float64)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 2)
    cases.append(("batch_norm train", lambda x=x, v=v, bn=bn: ad.mul(ad.batch_norm(x, bn, True), v).sum(),
                  [x, bn.gamma, bn.beta]))
    x, v = f64(rng, 5, 6), proj(5, 6)
    bn2 = ad.BatchNormState.create(6, np.float64)
    bn2.running_mean, bn2.running_var = rng.normal(0, 1, 6), rng.uniform(0.5, 2, 6)
    cases.append(("batch_norm infer", lambda x=x, v=v, bn=bn2: ad.mul(ad.batch_norm(x, bn, False), v).sum(),
                  [x, bn2.gamma, bn2.beta]))
    x, v = f64(rng, 5, 6), proj(5, 6)
    cases.append(("dropout", lambda x=x, v=v: ad.mul(ad.dropout(x, 0.5, True, np.random.default_rng(1)), v).sum(), [x]))
    x, v = f64(rng, 2, 25), proj(2, 1, 10, 10)
    cases.append(("reshape + resize_bilinear",
                  lambda x=x, v=v: ad.mul(ad.resize_bilinear(ad.reshape(x, (2, 1, 5, 5)), 10, 10), v).sum(), [x]))
    a, b, v = f64(rng, 2, 1, 3, 3), f64(rng, 2, 2, 3, 3), proj(2, 27)
    cases.append(("concat_channels + flatten",
                  lambda a=a, b=b, v=v: ad.mul(ad.flatten(ad.concat_channels([a, b])), v).sum(), [a, b]))
    a, b = f64(rng, 4, 6), f64(rng, 4, 6)
    cases.append(("add + mul", lambda a=a, b=b: ad.mul(ad.add(a, b), b).sum(), [a, b]))
    delta = f64(rng, 3, 136)
    base, target = rng.uniform(20, 90, (3, 68, 2)), rng.uniform(20, 90, (3, 68, 2))
    cases.append(("landmark_loss", lambda d=delta, b=base, t=target: ad.landmark_loss(d, b, t, np.array([30.0, 40, 50])),
                  [delta]))
    return cases


def full_stage_case(rng, train=True):
    """A full-width second stage (3 input channels, feature layer) in 64-bit.

    Every conv and fc1 weight is followed by batch normalization, so their
    scale does not change the stage, and neither does a joint scale of each
    batch-norm (gamma, beta) pair.  Scaling the weights by 10, the batch-norm
    scales by 100 and the previous fc1 activations by 10 keeps a 1e-4 step
    small against the activations; offsets of about three scales keep most
    ReLUs away from zero.  Both make kink-free probes common.  In training mode the loss covers a batch of three; in inference
    mode a single sample, with running statistics taken from that batch.
    """
    stage = StageParams.init(rng, 3, prev_fc1_units=256, dtype=np.float64)
    for name in CONV_LAYERS + ("fc1.w",):
        stage.weights[name].data = stage.weights[name].data * 10
    for bn in stage.norms.values():
        bn.gamma.data = rng.uniform(50, 150, bn.gamma.shape)
        bn.beta.data = bn.gamma.data * rng.uniform(2.5, 3.5, bn.beta.shape)
    stage.weights["fc2.w"].data = rng.normal(0, 0.05, (136, 256))
    stage.weights["fc2.b"].data = rng.normal(0, 0.05, 136)
    stage.weights["feat.b"].data = rng.normal(0, 0.5, 3136)
    images, heatmaps = rng.standard_normal((3, 112, 112)), rng.random((3, 112, 112))
    prev = 10 * np.abs(rng.standard_normal((3, 256)))
    base = rng.uniform(20, 90, (3, 68, 2))
    target = base + rng.normal(0, 3, base.shape)
    if not train:
        for bn in stage.norms.values():
            bn.momentum = 0.0
        stage_graph(stage, images, heatmaps, prev, train=True, rng=np.random.default_rng(3))
        images, heatmaps, prev, base, target = images[:1], heatmaps[:1], prev[:1], base[:1], target[:1]
    fc1_prev = ad.parameter(prev, np.float64)

    def loss():
        delta, _ = stage_graph(stage, images, heatmaps, fc1_prev, train=train, rng=np.random.default_rng(3))
        return ad.landmark_loss(delta, base, target, np.full(len(base), 40.0))

    return loss, [p for _, p in stage.parameters()] + [fc1_prev]


def test_gradient_correctness(criterion):
    detail = criterion("gradient correctness: every op and a full stage, step 1e-4, rel err < 1e-3")
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, fn, params in op_cases(rng):
        assert sum(p.data.size for p in params) >= 20, name
        report = ad.finite_difference_check(fn, params, probes=20, step=1e-4, rng=rng)
        assert len(report.probes) >= 20 and report.passed, f"{name}: {report}"
        worst = max(worst, report.max_rel_error)
    # probes whose +-step straddles a ReLU or pooling switch are redrawn: there the
    # central difference does not estimate the derivative
    loss, params = full_stage_case(rng, train=False)
    infer = ad.finite_difference_check(loss, params, probes=len(params), step=1e-4, rng=rng, skip_kinks=True,
                                       max_redraws=10)
    loss, params = full_stage_case(rng, train=True)
    batch = ad.finite_difference_check(loss, params, probes=len(params), step=1e-4, rng=rng, skip_kinks=True,
                                       max_redraws=10)
    elapsed = time.perf_counter() - start
    detail(f"ops max {worst:.1e}; single sample {infer}; batch of 3 {batch}; {elapsed:.0f} s")
    assert infer.passed and batch.passed
    for report in (infer, batch):
        missing = set(range(len(params))) - {pi for pi, *_ in report.probes}
        assert not missing, f"tensors without a kink-free probe: {sorted(missing)}"
    assert elapsed < 300


# ---------------------------------------------------------------- architecture


def test_stage_layer_shapes(criterion):
    detail = criterion("stage layer shapes, all 14 rows")
    stage = StageParams.init(np.random.default_rng(0))
    trace = {}
    stage_graph(stage, np.zeros((1, 112, 112)), trace=trace)
    names = list(trace)[1:]
    assert names == [row[0] for row in STAGE_LAYERS]
    prev = "input"
    for name, shape_in, shape_out in STAGE_LAYERS:
        for got, want in ((trace[prev], shape_in), (trace[name], shape_out)):
            hwc = (got[2], got[3], got[1]) if len(got) == 4 else (1, 1, got[1])
            assert hwc == want, (name, got, want)
        if name.startswith("conv"):
            o, c, kh, kw = stage.weights[name].shape
            assert (kh, kw, c, o) == (3, 3, shape_in[2], shape_out[2])
        prev = name
    detail("all 14 rows match")


# ---------------------------------------------------------------- heatmap


def naive_heatmap(points, size=112, radius=16):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    best = np.full((size, size), np.inf)
    for sx, sy in points:
        dx, dy = xs - sx, ys - sy
        best = np.minimum(best, np.sqrt(dy * dy + dx * dx))
    return np.where(best <= radius, 1.0 / (1.0 + best), 0.0)


def test_heatmap_equivalence(criterion):
    detail = criterion("truncated heatmap equals naive masked evaluation exactly, 100 shapes")
    rng = np.random.default_rng(1)
    faces = generate_faces(20, seed=3)
    mismatched = 0
    for i in range(100):
        shape = faces[i % 20].shape
        t = SimilarityTransform.from_params(rng.uniform(0.3, 1.5), rng.uniform(-1, 1), *rng.uniform(-40, 60, 2))
        pts = t(shape)
        if i % 5 == 0:
            pts = rng.uniform(-30, 140, (68, 2))          # some landmarks off the frame
        mismatched += not np.array_equal(generate_heatmap(pts), naive_heatmap(pts))
    detail(f"{mismatched} mismatches")
    assert mismatched == 0


# ---------------------------------------------------------------- geometry


def test_geometry(criterion):
    detail = criterion("similarity recovery 1e-9, round trip 1e-12, warp identity exact, ramp round trip 0.02")
    rng = np.random.default_rng(2)
    worst_fit = worst_trip = 0.0
    for _ in range(1000):
        truth = SimilarityTransform.from_params(rng.uniform(0.1, 10), rng.uniform(-np.pi, np.pi), *rng.uniform(-300, 300, 2))
        src = rng.uniform(-50, 150, (68, 2))
        got = estimate_similarity(src, truth(src))
        worst_fit = max(worst_fit, np.abs(np.array([got.a - truth.a, got.b - truth.b, got.tx - truth.tx,
                                                    got.ty - truth.ty])).max())
        pts = rng.uniform(0, 112, (68, 2))
        worst_trip = max(worst_trip, np.abs(truth.inverse()(truth(pts)) - pts).max())
    img = rng.random((112, 112))
    identity_exact = np.array_equal(warp_image(img, IDENTITY), img)
    ys, xs = np.mgrid[0:112, 0:112]
    ramp = (xs + 0.5 * ys) / 170.0
    worst_ramp = 0.0
    for _ in range(20):
        t = SimilarityTransform.from_params(rng.uniform(0.8, 1.25), rng.uniform(-0.5, 0.5), *rng.uniform(-10, 10, 2))
        back = warp_image(warp_image(ramp, t), t.inverse())
        valid = warp_image(warp_image(np.ones_like(ramp), t), t.inverse()) > 1 - 1e-9
        worst_ramp = max(worst_ramp, np.abs(back - ramp)[valid].max())
    detail(f"fit {worst_fit:.1e}, trip {worst_trip:.1e}, ramp {worst_ramp:.1e}")
    assert worst_fit < 1e-9 and worst_trip < 1e-12 and identity_exact and worst_ramp <= 0.02


# ---------------------------------------------------------------- metrics


def test_metric_oracles(criterion):
    detail = criterion("AUC vs 1e6-point grid within 1e-6 on 100 sets; failure and CED counting exact")
    rng = np.random.default_rng(3)
    grid = (np.arange(1_000_000) + 0.5) * (0.08 / 1_000_000)
    worst = 0.0
    counting_ok = True
    for _ in range(100):
        errors = rng.exponential(rng.uniform(0.01, 0.1), rng.integers(1, 300))
        errors = np.round(errors, int(rng.integers(2, 6)))   # ties on the threshold grid
        oracle = (np.searchsorted(np.sort(errors), grid, side="right") / len(errors)).mean()
        worst = max(worst, abs(ev.auc_alpha(errors, 0.08) - oracle))
        th = np.round(np.linspace(0.001, 0.15, 150), 3)
        counting_ok &= list(ev.ced_curve(errors, th).fractions) == [sum(e <= t for e in errors) / len(errors) for t in th]
        counting_ok &= ev.failure_rate(errors, 0.08) == 100 * sum(e >= 0.08 for e in errors) / len(errors)
    examples = (ev.failure_rate([0.04, 0.10], 0.08), ev.failure_rate([0.08], 0.08))
    detail(f"AUC max diff {worst:.1e}; examples {examples}")
    assert worst < 1e-6 and counting_ok and examples == (50.0, 100.0)


# ---------------------------------------------------------------- chained update


def test_zero_update_identity(criterion):
    detail = criterion("zero-update stages return their input shape within 1e-9")
    faces = generate_faces(4, seed=5, size=160)
    model = DanModel(compute_canonical_shape([f.shape for f in generate_faces(30, seed=6)]))
    rng = np.random.default_rng(4)
    model.stages = [StageParams.init(rng), StageParams.init(rng, 3, prev_fc1_units=256)]
    worst = 0.0
    for f in faces:
        init = place_shape_in_bbox(model.canonical, f.box)
        init = SimilarityTransform.from_params(1.1, 0.2, 3, -4)(init) + rng.normal(0, 1, init.shape)
        for out in dan_forward(model, f.image, init):
            worst = max(worst, np.abs(out - init).max())
    detail(f"max deviation {worst:.1e} px")
    assert worst < 1e-9


# ---------------------------------------------------------------- experiments


@pytest.mark.slow
def test_overfit_32_images(criterion):
    detail = criterion("2-stage reduced model on 32 augmented images: train error < 0.02 within 300 epochs")
    faces = generate_faces(32, seed=0)
    images = [augment(f, np.random.default_rng([11, i]), 1, TrainConfig())[0] for i, f in enumerate(faces)]
    cfg = TrainConfig(widths=(8, 16, 32, 64), augment_count=1, rotation_std=0, scale_std=0, translation_std=0,
                      mirror_probability=0, batch_size=8, max_epochs=300, patience=300, target_error=0.02)
    start = time.perf_counter()
    result = train_model(images, 2, cfg, validation=images)
    elapsed = time.perf_counter() - start
    report = ev.evaluate_model(result.model, images)
    epochs = sum(1 for r in result.history if r.epoch > 0)
    detail(f"error {report.final.mean_error:.4f} after {epochs} epochs, {elapsed / 60:.1f} min")
    assert len(result.model.stages) == 2
    assert report.final.mean_error < 0.02 and epochs <= 300 and elapsed < 1800


@pytest.mark.slow
def test_second_stage_improves_held_out(criterion):
    detail = criterion("2-stage held-out error <= 1-stage; failure rate not increased")
    faces = generate_faces(310, seed=100)
    train, held_out = faces[:250], faces[250:]
    cfg = TrainConfig(widths=(8, 16, 32, 64), fc1_units=64, augment_count=2, batch_size=16, max_epochs=15,
                      patience=5, validation_size=50, seed=0)
    result = train_model(train, 2, cfg)
    report = ev.evaluate_model(result.model, held_out)
    one, two = report.rows
    detail(f"{len(result.split[0])} train / {len(held_out)} held out; mean {one.mean_error:.4f} -> {two.mean_error:.4f}, "
           f"failure {one.failure:.1f}% -> {two.failure:.1f}%")
    assert len(result.split[0]) >= 200 and len(held_out) >= 50
    assert two.mean_error <= one.mean_error and two.failure <= one.failure


# ---------------------------------------------------------------- reproducibility and formats


def test_determinism(criterion, tmp_path):
    detail = criterion("identical config and seed: byte-identical models and reports")
    write_dataset(tmp_path / "data", generate_faces(14, seed=9))
    config = ("widths = 4, 8, 8, 16\nfc1_units = 16\nbatch_size = 4\naugment_count = 2\nvalidation_size = 4\n"
              "max_epochs = 2\nseed = 3\ndata_root = data\nbbox_manifest = data/bboxes.txt\noutput_dir = {}\n")
    for run in ("a", "b"):
        (tmp_path / f"{run}.cfg").write_text(config.format(run))
        assert cli.main(["-q", "train", str(tmp_path / f"{run}.cfg")]) == 0
        assert cli.main(["-q", "eval", "--model", str(tmp_path / run / "model.dan"), "--data", str(tmp_path / "data"),
                         "--bbox-manifest", str(tmp_path / "data" / "bboxes.txt"),
                         "--report", str(tmp_path / run / "report.txt")]) == 0
    same_model = (tmp_path / "a" / "model.dan").read_bytes() == (tmp_path / "b" / "model.dan").read_bytes()
    same_report = (tmp_path / "a" / "report.txt").read_bytes() == (tmp_path / "b" / "report.txt").read_bytes()
    detail(f"model identical: {same_model}, report identical: {same_report}")
    assert same_model and same_report


def test_format_round_trips(criterion, tmp_path):
    detail = criterion("container bit-exact; landmark files and PGM within quantization")
    rng = np.random.default_rng(7)
    model = DanModel(compute_canonical_shape([f.shape for f in generate_faces(10, seed=1)]))
    model.stages = [StageParams.init(rng, 1, (4, 8, 8, 16), 32), StageParams.init(rng, 3, (4, 8, 8, 16), 32, 32)]
    for stage in model.stages:
        stage.set_arrays({k: rng.standard_normal(v.shape).astype(np.float32) if not k.endswith(".var")
                          else rng.uniform(0.5, 2, v.shape).astype(np.float32) for k, v in stage.arrays().items()})
    save_model(model, tmp_path / "m.dan")
    back = load_model(tmp_path / "m.dan")
    container_ok = model_to_bytes(back) == (tmp_path / "m.dan").read_bytes() and np.array_equal(back.canonical, model.canonical)
    for a, b in zip(model.stages, back.stages):
        container_ok &= all(np.array_equal(v, b.arrays()[k]) for k, v in a.arrays().items())
    container_ok &= model_to_bytes(model_from_bytes(model_to_bytes(model))) == model_to_bytes(model)
    pts_err = max(np.abs(parse_pts(serialize_pts(s)) - s).max() for s in rng.uniform(-100, 1000, (50, 68, 2)))
    pgm_err = max(np.abs(load_gray_image(encode_gray_image(img)) - img).max()
                  for img in (rng.random((int(h), int(w))) for h, w in rng.integers(1, 200, (20, 2))))
    detail(f"landmark err {pts_err:.1e}, PGM err {pgm_err:.2e}")
    assert container_ok and pts_err <= 5e-7 and pgm_err <= 1 / 510 + 1e-12
