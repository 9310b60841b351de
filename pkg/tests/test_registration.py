import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from oracles import stepwise_similarity
from salient_align.errors import AmbiguousOrientation, DegenerateLandmarks, SingularTransform
from salient_align.registration import (
    LandmarkPair,
    SimilarityTransform,
    apply,
    fit_transform,
    flip_x,
    needs_flip,
    sample_bilinear,
    warp_image,
)

W, H = 288, 224
coord = st.floats(20, 260)


def test_flip_example():
    src = LandmarkPair((60.0, 100.0), (150.0, 110.0), W)
    tgt = LandmarkPair((200.0, 100.0), (120.0, 105.0), W)
    assert needs_flip(src, tgt)
    assert flip_x(100.0, src, tgt) == 188.0
    same = LandmarkPair((70.0, 90.0), (160.0, 95.0), W)
    assert flip_x(100.0, src, same) == 100.0


def test_flip_maps_pixel_centers_to_pixel_centers():
    x = np.arange(W) + 0.5
    assert np.array_equal(np.sort(W - x), x)


def test_vertical_landmarks_are_ambiguous():
    src = LandmarkPair((100.0, 50.0), (100.0, 150.0), W)
    tgt = LandmarkPair((80.0, 60.0), (160.0, 70.0), W)
    with pytest.raises(AmbiguousOrientation):
        fit_transform(src, tgt)
    assert not fit_transform(src, tgt, force=True).flipped


def test_coincident_landmarks_rejected():
    with pytest.raises(DegenerateLandmarks):
        LandmarkPair((5.0, 5.0), (5.0, 5.0), W)


def test_identity_fit():
    p = LandmarkPair((60.0, 100.0), (150.0, 110.0), W)
    tf = fit_transform(p, p)
    assert not tf.flipped
    assert tf.scale == pytest.approx(1.0, abs=1e-12)
    assert tf.rotation == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(tf.matrix, np.eye(3), atol=1e-12)


def test_recovers_rotation_and_scale():
    true = SimilarityTransform(False, (5.0, -3.0), math.radians(30), 1.5, (W / 2, H / 2), W)
    c, d = (100.0, 100.0), (160.0, 120.0)
    src = LandmarkPair(c, d, W)
    tgt = LandmarkPair(tuple(apply(true, c)), tuple(apply(true, d)), W)
    tf = fit_transform(src, tgt)
    assert tf.rotation == pytest.approx(math.radians(30), abs=1e-9)
    assert tf.scale == pytest.approx(1.5, rel=1e-9)
    assert np.allclose(tf.matrix, true.matrix, atol=1e-9)


def test_recovers_mirrored_pose():
    true = SimilarityTransform(True, (-4.0, 6.0), math.radians(-12), 0.95, (W / 2, H / 2), W)
    c, d = (90.0, 110.0), (170.0, 120.0)
    src = LandmarkPair(c, d, W)
    tgt = LandmarkPair(tuple(apply(true, c)), tuple(apply(true, d)), W)
    tf = fit_transform(src, tgt)
    assert tf.flipped
    assert np.allclose(tf.matrix, true.matrix, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.booleans(), st.tuples(st.floats(-20, 20), st.floats(-20, 20)),
       st.floats(-math.pi, math.pi), st.floats(0.5, 2.0), st.tuples(coord, coord))
def test_matrix_matches_stepwise_composition(flipped, t, theta, rho, p):
    tf = SimilarityTransform(flipped, t, theta, rho, (W / 2, H / 2), W)
    expect = stepwise_similarity(p, flipped, W, t, theta, rho, (W / 2, H / 2))
    assert np.allclose(apply(tf, p), expect, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.tuples(coord, coord), st.tuples(coord, coord),
       st.tuples(coord, coord), st.tuples(coord, coord))
def test_fit_maps_both_landmarks(c, d, ck, dk):
    if abs(c[0] - d[0]) < 1 or abs(ck[0] - dk[0]) < 1:
        return
    tf = fit_transform(LandmarkPair(c, d, W), LandmarkPair(ck, dk, W))
    assert np.allclose(apply(tf, c), ck, atol=1e-6)
    assert np.allclose(apply(tf, d), dk, atol=1e-6)
    m = tf.matrix[:2, :2]
    # similarity: orthogonal up to scale, orientation-reversing iff flipped
    assert np.allclose(m @ m.T, tf.scale ** 2 * np.eye(2), atol=1e-9)
    assert (np.linalg.det(m) < 0) == tf.flipped


@settings(max_examples=60, deadline=None)
@given(st.tuples(coord, coord), st.tuples(coord, coord),
       st.tuples(coord, coord), st.tuples(coord, coord))
def test_fit_is_inverse_consistent(c, d, ck, dk):
    if abs(c[0] - d[0]) < 1 or abs(ck[0] - dk[0]) < 1:
        return
    a, b = LandmarkPair(c, d, W), LandmarkPair(ck, dk, W)
    fwd, back = fit_transform(a, b), fit_transform(b, a)
    assert np.allclose(fwd.matrix @ back.matrix, np.eye(3), atol=1e-6)


def test_inverse_of_zero_scale_fails():
    m = np.diag([0.0, 0.0, 1.0])
    with pytest.raises(SingularTransform):
        warp_image(np.ones((4, 4)), m)


def test_json_round_trip():
    tf = SimilarityTransform(True, (1.5, -2.0), 0.3, 1.1, (10.0, 20.0), W)
    back = SimilarityTransform.from_json(tf.to_json())
    assert back == tf
    assert np.array_equal(back.matrix, tf.matrix)


def test_sample_bilinear_inside_and_outside():
    img = np.arange(12.0).reshape(3, 4)
    vals, inside = sample_bilinear(img, np.array([0.5, 3.0, -0.5, 3.2]), np.array([0.5, 2.0, 1.0, 1.0]))
    assert vals[0] == pytest.approx((0 + 1 + 4 + 5) / 4)
    assert vals[1] == 11.0
    assert inside.tolist() == [True, True, False, False]
    assert vals[2] == vals[3] == 0.0


def test_identity_warp_is_exact():
    img = np.random.default_rng(0).random((31, 40))
    assert np.array_equal(warp_image(img, SimilarityTransform.identity()), img)


def test_integer_translation_shifts_pixels():
    img = np.random.default_rng(1).random((30, 40))
    out = warp_image(img, SimilarityTransform(translation=(3.0, -2.0)))
    assert np.allclose(out[0:28, 3:], img[2:30, 0:37], atol=1e-12)
    assert np.all(out[:, :3] == 0)


def test_flip_warp_mirrors_columns():
    img = np.random.default_rng(2).random((10, 16))
    out = warp_image(img, SimilarityTransform.horizontal_flip(16))
    assert np.allclose(out, img[:, ::-1], atol=1e-12)


def test_warp_round_trip_is_close():
    img = ndimage.gaussian_filter(np.random.default_rng(3).random((H, W)), 6)
    img = (img - img.min()) / np.ptp(img)
    tf = SimilarityTransform(False, (6.0, -4.0), math.radians(10), 1.08, (W / 2, H / 2), W)
    fwd = warp_image(img, tf)
    back, inside = warp_image(fwd, tf.inverse_matrix(), return_mask=True)
    core = np.zeros_like(inside)
    core[40:-40, 50:-50] = True
    err = np.abs(back - img)[core]
    assert err.max() < 0.02
