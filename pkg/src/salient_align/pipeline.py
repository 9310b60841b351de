"""End-to-end glue: manifests and synthetic cohorts through extract, cluster, evaluate."""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

from salient_align.clustering import ClusteringResult, cluster_landmark_sets
from salient_align.evaluation import (
    DEFAULT_RADIUS,
    LANDMARK_STRUCTURES,
    METHODS,
    EvalImage,
    EvaluationResult,
    evaluate_all,
)
from salient_align.grids import (
    AnnotationSet,
    ImageRecord,
    Manifest,
    manifest_entry,
    write_grid,
    write_pgm,
)
from salient_align.peaks import LandmarkSet, PeakConfig, extract_landmarks
from salient_align.synth import SynthScene

log = logging.getLogger(__name__)

# clusters are numbered by descending mean saliency; synthetic CSP peaks are the brightest
DEFAULT_LABEL_MAP = {0: "csp", 1: "lv"}


def extract_manifest(manifest: Manifest, cfg: PeakConfig = PeakConfig()) -> list[LandmarkSet]:
    out = []
    for rec in manifest.images:
        grid = rec.load_saliency()
        out.append(extract_landmarks(grid, rec.meta(grid), cfg, plane=rec.plane))
    return out


def cluster_manifest(manifest: Manifest, sets: Sequence[LandmarkSet], k_min: int = 2,
                     k_max: Optional[int] = None, seed: int = 0, normalize: bool = False):
    records = manifest.by_id()
    features = {}
    for ls in sets:
        rec = records.get(ls.image_id)
        if rec is not None and rec.feature_grid is not None and ls.landmarks:
            features[ls.image_id] = rec.load_features()
    return cluster_landmark_sets(sets, features, k_min, k_max, seed, normalize)


def infer_label_map(sets: Sequence[LandmarkSet], annotations: Mapping[str, AnnotationSet]
                    ) -> dict[int, str]:
    """Map each cluster to the structure its members most often lie closest to.

    Only clusters whose members are mostly within 10% of the HC long axis
    of some structure are mapped.
    """
    votes = defaultdict(Counter)
    for ls in sets:
        ann = annotations.get(ls.image_id)
        if ann is None:
            continue
        for lm in ls.landmarks:
            if lm.cluster is None:
                continue
            dists = {s: _dist(lm.pixel_pos, ann.structure_point(s)) for s in LANDMARK_STRUCTURES}
            best = min(dists, key=dists.get)
            near = dists[best] <= DEFAULT_RADIUS * ann.hc_long_axis
            votes[lm.cluster][best if near else None] += 1
    out = {}
    for cluster in sorted(votes):
        struct, _ = max(votes[cluster].items(), key=lambda kv: (kv[1], kv[0] is not None))
        if struct is not None:
            out[cluster] = struct
    return out


def _dist(p, q):
    return ((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) ** 0.5


def eval_images_from_manifest(manifest: Manifest, sets: Sequence[LandmarkSet]) -> list[EvalImage]:
    by_id = {ls.image_id: ls for ls in sets}
    return [EvalImage(rec.image_id, rec.plane, rec.pixel_width, rec.annotations,
                      by_id.get(rec.image_id), rec.image)
            for rec in manifest.images]


@dataclass
class CohortAnalysis:
    landmarks: list[LandmarkSet]
    clustering: dict[str, Optional[ClusteringResult]]
    result: EvaluationResult


def analyze_cohort(cohort, cfg: PeakConfig = PeakConfig(), k_min: int = 2,
                   k_max: Optional[int] = None, seed: int = 0,
                   label_map: Optional[Mapping[int, str]] = None,
                   methods: Sequence[str] = tuple(METHODS), jobs: int = 1) -> CohortAnalysis:
    """Run the full pipeline on in-memory ``(source, target, transform)`` triples."""
    scenes: dict[str, SynthScene] = {}
    for src, tgt, _ in cohort:
        scenes.setdefault(src.image_id, src)
        scenes.setdefault(tgt.image_id, tgt)
    sets = [extract_landmarks(s.saliency, s.meta, cfg, plane=s.plane) for s in scenes.values()]
    features = {s.image_id: s.features for s in scenes.values()}
    labeled, clustering = cluster_landmark_sets(sets, features, k_min, k_max, seed)
    by_id = {ls.image_id: ls for ls in labeled}
    images = [EvalImage(s.image_id, s.plane, s.meta.pixel_width, s.annotations,
                        by_id[s.image_id], s.image) for s in scenes.values()]
    pairs = [(src.image_id, tgt.image_id) for src, tgt, _ in cohort]
    result = evaluate_all(images, label_map or DEFAULT_LABEL_MAP, methods, pairs=pairs, jobs=jobs)
    return CohortAnalysis(labeled, clustering, result)


def write_cohort(cohort, out_dir, provenance: Optional[dict] = None) -> Path:
    """Write images, grids, a manifest with explicit pairs and the planted transforms."""
    out = Path(out_dir)
    for sub in ("images", "grids"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    seen = set()
    truth = []
    for src, tgt, tf in cohort:
        for scene in (src, tgt):
            if scene.image_id in seen:
                continue
            seen.add(scene.image_id)
            sal = out / "grids" / f"{scene.image_id}_saliency.slgd"
            feat = out / "grids" / f"{scene.image_id}_features.slgd"
            img = out / "images" / f"{scene.image_id}.pgm"
            write_grid(scene.saliency, sal)
            write_grid(scene.features, feat)
            write_pgm(scene.image, img)
            records.append(ImageRecord(scene.image_id, scene.meta.pixel_width,
                                       scene.meta.pixel_height, sal, feat, scene.plane,
                                       scene.annotations, img))
        truth.append({"source": src.image_id, "target": tgt.image_id, "transform": tf.to_json()})
    doc = {
        "provenance": provenance or {},
        "images": [manifest_entry(r, out) for r in records],
        "pairs": [[t["source"], t["target"]] for t in truth],
    }
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(doc, indent=2) + "\n")
    (out / "truth.json").write_text(json.dumps({"pairs": truth}, indent=2) + "\n")
    return manifest
