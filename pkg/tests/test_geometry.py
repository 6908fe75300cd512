import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepalign import geometry as geo
from deepalign.geometry import BoundingBox, SimilarityTransform
from deepalign.synthetic import generate_faces, template_shape


def lstsq_similarity(src, dst):
    """Similarity by solving the stacked linear system with a generic least-squares solver."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows += [[x, -y, 1, 0], [y, x, 0, 1]]
        rhs += [u, v]
    sol = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    return SimilarityTransform(*sol)


def random_transform(rng):
    return SimilarityTransform.from_params(rng.uniform(0.2, 5), rng.uniform(-math.pi, math.pi), *rng.uniform(-200, 200, 2))


def test_mirror_permutation_is_an_involution():
    perm = geo.MIRROR_PERMUTATION
    assert sorted(perm) == list(range(68))
    assert np.array_equal(perm[perm], np.arange(68))


def test_mirror_permutation_pairs():
    perm = geo.MIRROR_PERMUTATION
    for a, b in [(0, 16), (8, 8), (17, 26), (27, 27), (30, 30), (31, 35), (33, 33), (36, 45), (39, 42),
                 (40, 47), (48, 54), (51, 51), (57, 57), (60, 64), (62, 62), (66, 66)]:
        assert perm[a] == b and perm[b] == a


def test_mirror_of_symmetric_template_is_itself():
    shape = template_shape() * 40 + 50
    centered = shape.copy()
    centered[:, 0] += 49.5 - 50     # symmetric about x = 49.5 in a 100-pixel image
    np.testing.assert_allclose(geo.mirror_shape(centered, 100), centered, atol=1e-12)


def test_double_mirror_is_identity():
    shape = np.random.default_rng(0).uniform(0, 100, (68, 2))
    np.testing.assert_allclose(geo.mirror_shape(geo.mirror_shape(shape, 120), 120), shape, atol=1e-12, rtol=0)


def test_pupils_and_distances():
    shape = np.zeros((68, 2))
    shape[36:42] = [10, 20]
    shape[42:48] = [40, 20]
    shape[36] = [4, 20]
    shape[45] = [50, 20]
    left, right = geo.pupils(shape)
    assert left[0] == pytest.approx(9) and right[0] == pytest.approx(41.666666666666664)
    assert geo.interocular_distance(shape) == 46


def test_check_shape_rejects_bad_input():
    with pytest.raises(ValueError):
        geo.check_shape(np.zeros((67, 2)))
    with pytest.raises(ValueError):
        geo.check_shape(np.full((68, 2), np.nan))
    with pytest.raises(ValueError):
        geo.check_shape(np.zeros((68, 3)))


def test_transform_params_and_matrix():
    t = SimilarityTransform.from_params(2.0, math.pi / 2, 3, 4)
    assert t.scale == pytest.approx(2) and t.angle == pytest.approx(math.pi / 2)
    np.testing.assert_allclose(t([[1, 0]]), [[3, 6]], atol=1e-12)
    np.testing.assert_allclose(t.matrix @ [1, 0, 1], [3, 6, 1], atol=1e-12)


def test_compose_applies_right_operand_first():
    rng = np.random.default_rng(1)
    a, b = random_transform(rng), random_transform(rng)
    p = rng.standard_normal((5, 2))
    np.testing.assert_allclose(a.compose(b)(p), a(b(p)), rtol=1e-12, atol=1e-9)


def test_inverse_of_degenerate_transform_rejected():
    with pytest.raises(ValueError):
        SimilarityTransform(0, 0, 1, 1).inverse()


def test_estimate_similarity_matches_lstsq_oracle_on_noisy_points():
    rng = np.random.default_rng(2)
    for _ in range(20):
        src = rng.uniform(0, 100, (68, 2))
        dst = random_transform(rng)(src) + rng.normal(0, 2, src.shape)
        got, ref = geo.estimate_similarity(src, dst), lstsq_similarity(src, dst)
        np.testing.assert_allclose([got.a, got.b, got.tx, got.ty], [ref.a, ref.b, ref.tx, ref.ty], rtol=1e-8, atol=1e-8)


def test_estimate_similarity_of_identical_sets_is_exact_identity():
    shape = np.random.default_rng(3).uniform(0, 112, (68, 2))
    assert geo.estimate_similarity(shape, shape).is_identity()


def test_estimate_similarity_rejects_coincident_points():
    with pytest.raises(ValueError):
        geo.estimate_similarity(np.ones((68, 2)), np.zeros((68, 2)))


def test_bounding_box():
    box = BoundingBox.from_points([[0, 0], [10, 4]], expand=0.1)
    assert (box.x, box.y, box.width, box.height) == pytest.approx((-0.5, -0.2, 11, 4.4))
    assert box.diagonal == pytest.approx(math.hypot(11, 4.4))
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 5)


def test_place_shape_in_bbox():
    shape = template_shape()
    placed = geo.place_shape_in_bbox(shape, BoundingBox(10, 20, 50, 50))
    own = BoundingBox.from_points(placed)
    np.testing.assert_allclose(own.center, [35, 45], atol=1e-12)
    assert max(own.width, own.height) == pytest.approx(50)


def test_canonical_shape_fits_frame_and_is_upright():
    shapes = [r.shape for r in generate_faces(30, seed=4)]
    s0 = geo.compute_canonical_shape(shapes)
    box = BoundingBox.from_points(s0)
    assert max(box.width, box.height) == pytest.approx(112 * 0.8)
    np.testing.assert_allclose(box.center, [55.5, 55.5], atol=1e-9)
    left, right = geo.pupils(s0)
    assert abs(left[1] - right[1]) < 1e-9 and right[0] > left[0]


def test_canonical_shape_invariant_to_similarity_of_inputs():
    rng = np.random.default_rng(5)
    shapes = [r.shape for r in generate_faces(20, seed=6)]
    moved = [random_transform(rng)(s) for s in shapes]
    np.testing.assert_allclose(geo.compute_canonical_shape(moved), geo.compute_canonical_shape(shapes), atol=1e-6)


def test_procrustes_mean_of_copies_is_the_shape():
    rng = np.random.default_rng(7)
    shape = template_shape()
    mean = geo.procrustes_mean([random_transform(rng)(shape) for _ in range(5)])
    t = geo.estimate_similarity(mean, shape)
    np.testing.assert_allclose(t(mean), shape, atol=1e-9)


def test_canonical_shape_rejects_empty():
    with pytest.raises(ValueError):
        geo.compute_canonical_shape([])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(-3.1, 3.1), st.floats(-300, 300), st.floats(-300, 300), st.integers(0, 2**31 - 1))
def test_estimate_recovers_exact_transform(scale, angle, tx, ty, seed):
    src = np.random.default_rng(seed).uniform(-50, 150, (68, 2))
    truth = SimilarityTransform.from_params(scale, angle, tx, ty)
    got = geo.estimate_similarity(src, truth(src))
    np.testing.assert_allclose([got.a, got.b, got.tx, got.ty], [truth.a, truth.b, truth.tx, truth.ty], atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(-3.1, 3.1), st.floats(-300, 300), st.floats(-300, 300))
def test_transform_round_trip(scale, angle, tx, ty):
    t = SimilarityTransform.from_params(scale, angle, tx, ty)
    p = np.random.default_rng(0).uniform(0, 112, (68, 2))
    np.testing.assert_allclose(t.inverse()(t(p)), p, atol=1e-12, rtol=0)
