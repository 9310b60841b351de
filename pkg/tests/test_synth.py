import math

import numpy as np
import pytest

from salient_align.clustering import auto_cluster, collect_features
from salient_align.errors import BadParams
from salient_align.evaluation import alignment_error
from salient_align.peaks import extract_landmarks
from salient_align.registration import LandmarkPair, apply, fit_transform
from salient_align.synth import (
    PairParams,
    SynthParams,
    make_cohort,
    make_pair,
    make_scene,
    prototypes,
    with_params,
)


def test_scenes_are_deterministic():
    a = make_scene(9, SynthParams(shadows=True), "TC", 2)
    b = make_scene(9, SynthParams(shadows=True), "TC", 2)
    assert np.array_equal(a.image, b.image)
    assert a.saliency == b.saliency
    assert a.features == b.features
    c = make_scene(10, SynthParams(shadows=True), "TC", 2)
    assert not np.array_equal(a.image, c.image)


def test_params_validation():
    with pytest.raises(BadParams):
        SynthParams(prototype_separation=2.0, feature_noise=0.5).validate()
    with pytest.raises(BadParams):
        make_scene(0, plane="XX")


def test_prototype_separation():
    P = prototypes(SynthParams(prototype_separation=12.0))
    d = [np.linalg.norm(P[i] - P[j]) for i in range(3) for j in range(i + 1, 3)]
    assert np.allclose(d, 12.0)


@pytest.mark.parametrize("plane", ["TV", "TC"])
def test_noise_free_landmarks_within_quarter_cell(plane):
    for index in range(5):
        scene = make_scene(21, SynthParams(image_noise=0.0), plane, index)
        ls = extract_landmarks(scene.saliency, scene.meta)
        assert len(ls) == 2
        for lm, (_, (px, py), _) in zip(ls.landmarks, scene.true_landmarks):
            gx, gy = px / scene.meta.scale_x - 0.5, py / scene.meta.scale_y - 0.5
            assert math.hypot(lm.grid_pos[0] - gx, lm.grid_pos[1] - gy) <= 0.25


def test_features_cluster_into_planted_structures():
    scenes = [make_scene(4, SynthParams(), "TV", i) for i in range(8)]
    sets = [extract_landmarks(s.saliency, s.meta) for s in scenes]
    coll = collect_features(sets, {s.image_id: s.features for s in scenes})
    res = auto_cluster(coll, seed=0)
    assert res.k == 2
    truth = [idx for _, idx in coll.keys]  # CSP is always the brighter landmark
    assert len(set(zip(res.labels.tolist(), truth))) == 2


def test_identity_pair_reproduces_source():
    src = make_scene(2, SynthParams(shadows=True))
    _, tgt, tf = make_pair(src, PairParams(), "copy", fresh_artifacts=False)
    assert np.allclose(tf.matrix, np.eye(3))
    assert np.allclose(tgt.image, src.image)
    assert np.allclose(tgt.saliency.values, src.saliency.values)


def test_fresh_artifacts_differ():
    src = make_scene(2)
    _, tgt, _ = make_pair(src, PairParams(), "copy")
    assert not np.array_equal(tgt.image, src.image)


def _landmark_fit(src, tgt):
    a = LandmarkPair(src.annotations.csp_center, src.annotations.segment_midpoint, src.meta.pixel_width)
    b = LandmarkPair(tgt.annotations.csp_center, tgt.annotations.segment_midpoint, tgt.meta.pixel_width)
    return fit_transform(a, b)


def test_planted_rotation_and_scale_recovered():
    src = make_scene(6, SynthParams(a_range=(60.0, 65.0)))
    _, tgt, true = make_pair(src, PairParams(False, (3.0, -2.0), 20.0, 1.2))
    tf = _landmark_fit(src, tgt)
    assert tf.rotation == pytest.approx(math.radians(20.0), abs=1e-9)
    assert tf.scale == pytest.approx(1.2, rel=1e-9)
    assert np.allclose(tf.matrix, true.matrix, atol=1e-9)


def test_planted_flip_recovered():
    src = make_scene(6)
    _, tgt, true = make_pair(src, PairParams(True, (0.0, 0.0), 0.0, 1.0))
    tf = _landmark_fit(src, tgt)
    assert tf.flipped
    assert np.allclose(tf.matrix, true.matrix, atol=1e-9)


def test_ground_truth_closes():
    for src, tgt, tf in make_cohort(6, 3):
        err = alignment_error(tf, src.annotations, tgt.annotations)
        assert max(err.values()) < 1e-9
        assert np.allclose(apply(tf, src.anatomy.csp), tgt.anatomy.csp)


def test_cohort_layout():
    cohort = make_cohort(6, 1)
    assert [s.plane for s, _, _ in cohort] == ["TV", "TC"] * 3
    ids = [i for s, t, _ in cohort for i in (s.image_id, t.image_id)]
    assert len(set(ids)) == 12
    assert ids[:2] == ["TV000a", "TV000b"]


def test_with_params_rerenders_same_anatomy():
    scene = make_scene(5)
    quiet = with_params(scene, image_noise=0.0)
    assert quiet.anatomy == scene.anatomy
    assert np.ptp(quiet.image - scene.image) > 0
