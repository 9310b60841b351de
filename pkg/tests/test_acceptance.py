"""Acceptance criteria 1-9; each records one PASS/FAIL line in the terminal summary."""

import math
import re
import time

import numpy as np
import pytest
from scipy import ndimage

from oracles import brute_local_maxima, direct_silhouette, window_max
from salient_align.cli import build_parser, run
from salient_align.clustering import auto_cluster, cluster_landmark_sets, silhouette_score
from salient_align.evaluation import COLUMNS, match_report
from salient_align.intensity import MAX_ITER_PER_LEVEL, register_intensity_detailed
from salient_align.peaks import PeakConfig, extract_landmarks, local_maxima, refine_subpixel
from salient_align.pipeline import analyze_cohort, infer_label_map
from salient_align.registration import (
    LandmarkPair,
    SimilarityTransform,
    apply,
    fit_transform,
    needs_flip,
    warp_image,
)
from salient_align.synth import SynthParams, make_cohort, make_scene, render_clean

pytestmark = pytest.mark.acceptance


def _random_grid(rng):
    h, w = rng.integers(8, 65, size=2)
    kind = rng.integers(3)
    if kind == 0:
        return rng.random((h, w))
    if kind == 1:  # coarse levels produce plateaus and ties
        return rng.integers(0, 5, size=(h, w)) / 4.0
    g = ndimage.gaussian_filter(rng.random((h, w)), rng.uniform(0.7, 2.5))
    return np.round((g - g.min()) / max(np.ptp(g), 1e-12), int(rng.integers(1, 4)))


def test_c1_peak_extraction_matches_oracle(criterion):
    rng = np.random.default_rng(2024)
    cases = [(_random_grid(rng), int(rng.choice([1, 2, 3])), float(rng.choice([0.0, 0.1, 0.3])))
             for _ in range(1000)]
    t0 = time.perf_counter()
    got = [local_maxima(s, PeakConfig(d, t)) for s, d, t in cases]
    elapsed = time.perf_counter() - t0
    mismatches = sum(g != brute_local_maxima(s, d, t, window_max)
                     for g, (s, d, t) in zip(got, cases))
    plateaus = sum(np.any(s[:, 1:] == s[:, :-1]) for s, _, _ in cases)
    ok = mismatches == 0 and elapsed < 10.0
    criterion(1, ok, f"{mismatches}/1000 mismatches vs brute force ({plateaus} grids with ties), "
                     f"{elapsed:.2f}s")
    assert mismatches == 0
    assert elapsed < 10.0


def test_c2_subpixel_exact_for_gaussians(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        w, h = rng.integers(7, 20, size=2)
        x, y = int(rng.integers(2, w - 2)), int(rng.integers(2, h - 2))
        dx, dy = rng.uniform(-0.5, 0.5, size=2)
        sigma = rng.uniform(0.8, 3.0)
        amp = rng.uniform(0.2, 1.0)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        s = amp * np.exp(-((xx - x - dx) ** 2 + (yy - y - dy) ** 2) / (2 * sigma ** 2))
        rx, ry = refine_subpixel(s, (x, y))
        worst = max(worst, abs(rx - x - dx), abs(ry - y - dy))
    criterion(2, worst < 1e-6, f"max offset error {worst:.2e} cells over 1000 trials")
    assert worst < 1e-6


SILHOUETTE_CASES = [
    ([[0, 0], [1, 0], [4, 0], [5, 0]], [0, 0, 1, 1]),
    ([[0, 0], [0, 1], [1, 0], [5, 5], [6, 5]], [0, 0, 0, 1, 1]),
    ([[0], [1], [10]], [0, 0, 1]),
    ([[0, 0], [2, 0], [0, 2], [9, 9], [9, 7], [20, 0], [21, 1]], [0, 0, 0, 1, 1, 2, 2]),
    ([[1, 1, 1], [1, 1, 2], [3, 3, 3], [3, 4, 3], [0, 5, 0], [1, 5, 0], [0, 6, 0], [9, 9, 9]],
     [0, 0, 1, 1, 2, 2, 2, 1]),
    ([[0, 0], [0, 0], [3, 4], [3, 4]], [0, 0, 1, 1]),
    ([[0.5, 0.1], [0.4, 0.3], [2.2, 2.0], [2.0, 2.5], [1.0, 1.1], [1.2, 0.9], [5, 5], [5.5, 5.2],
      [4.8, 5.1], [0, 3]], [0, 0, 1, 1, 0, 1, 2, 2, 2, 0]),
]


def _planted_collection(seed):
    rng = np.random.default_rng([seed, 99])
    k = int(rng.integers(2, 7))
    dim = int(rng.integers(k, k + 6))
    noise = rng.uniform(0.1, 1.0)
    # orthogonal prototypes scaled so every pair is exactly 10 noise sigmas apart
    basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0][:k]
    protos = basis * (10.0 * noise / math.sqrt(2))
    sizes = rng.integers(5, 13, size=k)
    X = np.vstack([p + noise * rng.standard_normal((m, dim)) for p, m in zip(protos, sizes)])
    return X, k


def test_c3_silhouette_and_model_selection(criterion):
    worst = max(abs(silhouette_score(X, y) - direct_silhouette(X, y)) for X, y in SILHOUETTE_CASES)
    hand = abs(silhouette_score(*SILHOUETTE_CASES[0]) - 47 / 63)
    hits = 0
    for run_id in range(200):
        X, k = _planted_collection(run_id)
        hits += auto_cluster(X, seed=run_id).k == k
    ok = worst <= 1e-12 and hand <= 1e-12 and hits >= 190
    criterion(3, ok, f"silhouette max deviation {worst:.1e} on {len(SILHOUETTE_CASES)} instances; "
                     f"planted k selected in {hits}/200 runs")
    assert worst <= 1e-12 and hand <= 1e-12
    assert hits >= 190


W, H = 288.0, 224.0


def test_c4_transform_exactness(criterion):
    rng = np.random.default_rng(11)
    worst_map, flips = 0.0, 0
    for _ in range(10_000):
        c, d, ck, dk = rng.uniform((0, 0), (W, H), size=(4, 2))
        tf = fit_transform(LandmarkPair(tuple(c), tuple(d), W), LandmarkPair(tuple(ck), tuple(dk), W))
        flips += tf.flipped
        worst_map = max(worst_map, np.max(np.abs(apply(tf, np.array([c, d])) - [ck, dk])))
    worst_rho = worst_theta = 0.0
    planted = 0
    while planted < 10_000:
        c, d = rng.uniform((0, 0), (W, H), size=(2, 2))
        true = SimilarityTransform(bool(rng.random() < 0.5), tuple(rng.uniform(-30, 30, 2)),
                                   rng.uniform(-3.0, 3.0), rng.uniform(0.5, 2.0), (W / 2, H / 2), W)
        src = LandmarkPair(tuple(c), tuple(d), W)
        tgt = LandmarkPair(tuple(apply(true, c)), tuple(apply(true, d)), W)
        if src.orientation == 0 or tgt.orientation == 0 or needs_flip(src, tgt) != true.flipped:
            continue  # the landmark orientations, not the planted flag, decide the flip
        planted += 1
        tf = fit_transform(src, tgt)
        worst_rho = max(worst_rho, abs(tf.scale - true.scale) / true.scale)
        worst_theta = max(worst_theta, abs(tf.rotation - true.rotation) / abs(true.rotation))
    ok = worst_map < 1e-6 and worst_rho < 1e-9 and worst_theta < 1e-9
    criterion(4, ok, f"max landmark residual {worst_map:.1e} px ({flips} flips in 10000); "
                     f"rho rel err {worst_rho:.1e}, theta rel err {worst_theta:.1e}")
    assert worst_map < 1e-6
    assert worst_rho < 1e-9 and worst_theta < 1e-9


def test_c5_end_to_end_ordering(criterion):
    t0 = time.perf_counter()
    cohort = make_cohort(40, 7, SynthParams(image_noise=0.1, shadows=True))
    analysis = analyze_cohort(cohort, seed=7, jobs=1)
    elapsed = time.perf_counter() - t0
    res = analysis.result
    order = ["SalientLM", "LR+Intensity", "LR", "None"]
    problems = []
    summary = []
    for plane in ("TV", "TC"):
        means = {m: res.report(plane, key).mean()
                 for m, key in zip(order, ["salient", "lr-intensity", "lr", "none"])}
        if res.report(plane, "salient").pair_count == 0:
            problems.append(f"{plane}: no evaluated pairs")
            continue
        for i, col in enumerate(COLUMNS):
            vals = [means[m][i] for m in order]
            if not vals[0] < 3.0:
                problems.append(f"{plane} {col} SalientLM {vals[0]:.2f}%")
            if not all(a < b for a, b in zip(vals, vals[1:])):
                problems.append(f"{plane} {col} order {vals}")
        summary.append(plane + " " + "/".join(f"{means[m].max():.2f}" for m in order))
    pairs = sum(res.report(p, "salient").pair_count for p in ("TV", "TC"))
    ok = not problems and elapsed < 120 and pairs == 40
    criterion(5, ok, f"{pairs} pairs, worst-column means SalientLM/LR+Int/LR/None: "
                     f"{'; '.join(summary)} (%HC axis), {elapsed:.1f}s"
                     + (f"; {problems}" if problems else ""))
    assert not problems
    assert pairs == 40
    assert elapsed < 120


def test_c6_intensity_recovers_planted_similarity(criterion):
    scene = make_scene(3, SynthParams(image_noise=0.0))
    src = ndimage.gaussian_filter(render_clean(scene.anatomy, scene.params), 2.0)
    true = SimilarityTransform(False, (10.0, -6.0), math.radians(5.0), 1.05, (W / 2, H / 2), W)
    tgt = warp_image(src, true)
    res = register_intensity_detailed(src, tgt, SimilarityTransform.identity())
    pts = np.array([scene.annotations.csp_center, scene.annotations.segment_midpoint,
                    scene.annotations.hc_center])
    err = float(np.max(np.hypot(*(apply(res.transform, pts) - apply(true, pts)).T)))
    ok = err < 1.0 and res.ncc > 0.99 and max(res.iterations) <= MAX_ITER_PER_LEVEL
    criterion(6, ok, f"landmark error {err:.3f} px, NCC {res.ncc:.4f}, "
                     f"iterations per level {res.iterations}")
    assert err < 1.0
    assert res.ncc > 0.99
    assert max(res.iterations) <= MAX_ITER_PER_LEVEL


def _matching_rates(noise, seed=11, per_plane=15):
    scenes = [make_scene(seed, SynthParams(saliency_noise=noise), plane, i)
              for plane in ("TV", "TC") for i in range(per_plane)]
    sets = [extract_landmarks(s.saliency, s.meta, plane=s.plane) for s in scenes]
    labeled, _ = cluster_landmark_sets(sets, {s.image_id: s.features for s in scenes}, seed=seed)
    anns = {s.image_id: s.annotations for s in scenes}
    rep = match_report(labeled, anns, infer_label_map(labeled, anns), 0.10)
    return rep.landmark_rate, rep.structure_rate


def test_c7_matching_rates_degrade_with_noise(criterion):
    levels = [0.0, 0.05, 0.1, 0.2]
    rates = [_matching_rates(n) for n in levels]
    clean_ok = rates[0] == (100.0, 100.0)
    mono = all(a[i] > b[i] for a, b in zip(rates, rates[1:]) for i in (0, 1))
    detail = ", ".join(f"noise {n}: {lr:.1f}%/{sr:.1f}%" for n, (lr, sr) in zip(levels, rates))
    criterion(7, clean_ok and mono, f"landmark/structure rates {detail}")
    assert clean_ok
    assert mono


def _pipeline(d, jobs):
    m = str(d / "data" / "manifest.json")
    steps = [
        ["synth", "--n", "8", "--seed", "5", "--shadows", "--out-dir", str(d / "data")],
        ["extract", "--manifest", m, "--out", str(d / "landmarks.json")],
        ["cluster", "--landmarks", str(d / "landmarks.json"), "--manifest", m,
         "--out", str(d / "clusters.json")],
        ["evaluate", "--manifest", m, "--clusters", str(d / "clusters.json"),
         "--jobs", str(jobs), "--out", str(d / "report.csv")],
    ]
    for argv in steps:
        assert run(argv) == 0, argv
    return [(d / name).read_bytes() for name in ("report.csv", "report.json", "clusters.json")]


def test_c8_pipeline_is_deterministic(tmp_path, criterion):
    first = _pipeline(tmp_path, jobs=1)
    second = _pipeline(tmp_path, jobs=2)
    same = [a == b for a, b in zip(first, second)]
    criterion(8, all(same), f"report.csv/report.json/clusters.json identical: {same} "
                            f"(runs with 1 and 2 workers)")
    assert all(same)


def test_c9_defaults_in_help(capsys, criterion):
    assert run(["extract", "--help"]) == 0
    text = " ".join(capsys.readouterr().out.split())
    cfg = PeakConfig()
    has_d = re.search(r"--min-distance MIN_DISTANCE [^-]*\(default: 2\)", text) is not None
    has_t = re.search(r"--threshold THRESHOLD [^-]*\(default: 0\.1\)", text) is not None
    args = build_parser().parse_args(["extract", "--manifest", "m", "--out", "o"])
    ok = (cfg.min_distance, cfg.threshold) == (2, 0.1) and has_d and has_t \
        and (args.min_distance, args.threshold) == (2, 0.1)
    criterion(9, ok, f"PeakConfig() = (d={cfg.min_distance}, t={cfg.threshold}); "
                     f"'(default: 2)' in help: {has_d}, '(default: 0.1)' in help: {has_t}")
    assert ok
