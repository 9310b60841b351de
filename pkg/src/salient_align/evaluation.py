"""Alignment evaluation: baselines, landmark matching rates and error tables.

Errors are distances between transformed source structures and target
structures, in percent of the target's HC long axis.  Structure
reference points are the CSP center, the LV/TCD segment midpoint and the
HC ellipse center.  Aggregates report the mean and the standard error
of the mean.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from salient_align.errors import (
    AmbiguousOrientation,
    DegenerateLandmarks,
    MissingAnnotation,
    SalientAlignError,
    ValidationError,
)
from salient_align.grids import AnnotationSet, read_pgm
from salient_align.intensity import register_intensity
from salient_align.peaks import Landmark, LandmarkSet
from salient_align.registration import LandmarkPair, SimilarityTransform, apply, fit_transform

log = logging.getLogger(__name__)

METHODS = {
    "none": "None",
    "lr": "LR",
    "lr-intensity": "LR+Intensity",
    "salient": "SalientLM",
}
COLUMNS = ("csp", "lv", "hc")
LANDMARK_STRUCTURES = ("csp", "lv")
STRUCTURE_ALIASES = {
    "csp": "csp",
    "lv": "lv",
    "tcd": "lv",
    "cereb": "lv",
    "cerebellum": "lv",
}
DEFAULT_RADIUS = 0.10


def parse_label_map(text: str) -> dict[int, str]:
    """``"csp=0,lv=1"`` -> ``{0: "csp", 1: "lv"}``; several clusters may share a structure."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, _, ids = item.partition("=")
        struct = STRUCTURE_ALIASES.get(name.strip().lower())
        if struct is None or not ids:
            raise ValidationError(f"bad label-map entry {item!r}")
        for cid in ids.split("+"):
            try:
                cluster = int(cid)
            except ValueError:
                raise ValidationError(f"bad cluster id {cid!r} in label map") from None
            if out.get(cluster, struct) != struct:
                raise ValidationError(f"cluster {cluster} mapped to two structures")
            out[cluster] = struct
    if not out:
        raise ValidationError("empty label map")
    return out


def parse_methods(text: str) -> list[str]:
    methods = [m.strip().lower() for m in text.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    return methods


def orientation(ann: AnnotationSet) -> int:
    """Sign of the CSP x coordinate minus the LV/TCD midpoint x coordinate."""
    s = int(np.sign(ann.csp_center[0] - ann.segment_midpoint[0]))
    if s == 0:
        raise AmbiguousOrientation(f"{ann.image_id}: CSP and segment midpoint vertically aligned")
    return s


def select_landmark(ls: LandmarkSet, label_map: Mapping[int, str],
                    structure: str) -> Optional[Landmark]:
    """Most salient landmark whose cluster maps to ``structure``."""
    best = None
    for lm in ls.landmarks:
        if lm.cluster is not None and label_map.get(lm.cluster) == structure:
            if best is None or lm.saliency > best.saliency:
                best = lm
    return best


@dataclass
class MatchCounts:
    landmarks: int = 0
    landmarks_matched: int = 0
    structures: int = 0
    structures_matched: int = 0

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(self.landmarks + other.landmarks,
                           self.landmarks_matched + other.landmarks_matched,
                           self.structures + other.structures,
                           self.structures_matched + other.structures_matched)


@dataclass
class MatchReport:
    landmark_rate: float
    structure_rate: float
    radius: float
    counts: MatchCounts

    @classmethod
    def from_counts(cls, counts: MatchCounts, radius: float) -> "MatchReport":
        def pct(num, den):
            return 100.0 * num / den if den else 0.0
        return cls(pct(counts.landmarks_matched, counts.landmarks),
                   pct(counts.structures_matched, counts.structures), radius, counts)

    def to_json(self) -> dict:
        return {"landmark_rate": self.landmark_rate, "structure_rate": self.structure_rate,
                "radius_frac": self.radius, **self.counts.__dict__}


def match_landmarks(ls: LandmarkSet, ann: Optional[AnnotationSet], label_map: Mapping[int, str],
                    radius_frac: float = DEFAULT_RADIUS) -> MatchCounts:
    """Count landmarks near their mapped structure and structures near a matching landmark.

    Distances are compared with ``<=`` against ``radius_frac`` times the
    HC long axis.  Landmarks in unmapped clusters never match.
    """
    if ann is None:
        raise MissingAnnotation(ls.image_id)
    radius = radius_frac * ann.hc_long_axis
    structures = sorted(set(label_map.values()))
    near = {s: False for s in structures}
    matched = 0
    for lm in ls.landmarks:
        struct = label_map.get(lm.cluster) if lm.cluster is not None else None
        if struct is None:
            continue
        ref = ann.structure_point(struct)
        if math.dist(lm.pixel_pos, ref) <= radius:
            matched += 1
            near[struct] = True
    return MatchCounts(len(ls.landmarks), matched, len(structures), sum(near.values()))


def match_report(sets: Sequence[LandmarkSet], annotations: Mapping[str, AnnotationSet],
                 label_map: Mapping[int, str], radius_frac: float = DEFAULT_RADIUS) -> MatchReport:
    total = MatchCounts()
    for ls in sets:
        ann = annotations.get(ls.image_id)
        if ann is not None:
            total = total + match_landmarks(ls, ann, label_map, radius_frac)
    return MatchReport.from_counts(total, radius_frac)


def is_identified(ls: LandmarkSet, ann: AnnotationSet, label_map: Mapping[int, str],
                  radius_frac: float = DEFAULT_RADIUS) -> bool:
    """True when every landmark structure has its selected landmark within the radius."""
    radius = radius_frac * ann.hc_long_axis
    for struct in LANDMARK_STRUCTURES:
        lm = select_landmark(ls, label_map, struct)
        if lm is None or math.dist(lm.pixel_pos, ann.structure_point(struct)) > radius:
            return False
    return True


def alignment_error(tf, source_ann: Optional[AnnotationSet],
                    target_ann: Optional[AnnotationSet]) -> dict[str, float]:
    """Per-structure error in percent of the target HC long axis."""
    if source_ann is None or target_ann is None:
        raise MissingAnnotation("both images need annotations")
    unit = target_ann.hc_long_axis / 100.0
    out = {}
    for col in COLUMNS:
        moved = apply(tf, source_ann.structure_point(col))
        out[col] = float(np.hypot(*(moved - np.asarray(target_ann.structure_point(col))))) / unit
    return out


def baseline_none(*_args) -> SimilarityTransform:
    return SimilarityTransform.identity()


def baseline_lr(source_ann: AnnotationSet, target_ann: AnnotationSet,
                width: float) -> SimilarityTransform:
    """Horizontal flip when the annotated head orientations differ."""
    if orientation(source_ann) != orientation(target_ann):
        return SimilarityTransform.horizontal_flip(width)
    return SimilarityTransform.identity()


def salient_transform(source: LandmarkSet, target: LandmarkSet, label_map: Mapping[int, str],
                      width: float, force: bool = False) -> SimilarityTransform:
    pts = []
    for ls in (source, target):
        c = select_landmark(ls, label_map, "csp")
        d = select_landmark(ls, label_map, "lv")
        if c is None or d is None:
            raise DegenerateLandmarks(f"{ls.image_id}: missing a CSP or LV/cerebellum landmark")
        pts.append(LandmarkPair(c.pixel_pos, d.pixel_pos, width))
    return fit_transform(pts[0], pts[1], force=force)


@dataclass
class EvalImage:
    """Everything the evaluation needs about one image."""

    image_id: str
    plane: str
    width: int
    annotations: Optional[AnnotationSet]
    landmarks: Optional[LandmarkSet] = None
    image: Union[None, np.ndarray, Path] = None

    def pixels(self) -> np.ndarray:
        if self.image is None:
            raise ValidationError(f"{self.image_id}: no image available for intensity registration")
        if isinstance(self.image, np.ndarray):
            return self.image
        return read_pgm(self.image)


@dataclass
class EvalReport:
    plane: str
    method: str
    pairs: list[str] = field(default_factory=list)
    errors: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def pair_count(self) -> int:
        return len(self.pairs)

    def mean(self) -> np.ndarray:
        if not self.errors:
            return np.full(3, np.nan)
        return np.mean(np.asarray(self.errors), axis=0)

    def sem(self) -> np.ndarray:
        if not self.errors:
            return np.full(3, np.nan)
        arr = np.asarray(self.errors)
        if len(arr) < 2:
            return np.zeros(3)
        return np.std(arr, axis=0, ddof=1) / math.sqrt(len(arr))

    def to_json(self) -> dict:
        mean, sem = self.mean(), self.sem()
        clean = lambda v: None if not np.isfinite(v) else float(v)
        return {
            "plane": self.plane,
            "method": self.method,
            "pair_count": self.pair_count,
            **{col: {"mean": clean(mean[i]), "sem": clean(sem[i])} for i, col in enumerate(COLUMNS)},
        }


@dataclass
class EvaluationResult:
    reports: list[EvalReport]
    skipped: list[dict]
    matching: dict[str, MatchReport]

    def report(self, plane: str, method: str) -> EvalReport:
        key = METHODS.get(method, method)
        for r in self.reports:
            if r.plane == plane and r.method == key:
                return r
        raise KeyError((plane, method))


def _evaluate_pair(job):
    src, tgt, methods, label_map = job
    out = {}
    for method in methods:
        if method == "none":
            tf = baseline_none()
        elif method == "lr":
            tf = baseline_lr(src.annotations, tgt.annotations, src.width)
        elif method == "lr-intensity":
            init = baseline_lr(src.annotations, tgt.annotations, src.width)
            tf = register_intensity(src.pixels(), tgt.pixels(), init)
        else:
            tf = salient_transform(src.landmarks, tgt.landmarks, label_map, src.width)
        err = alignment_error(tf, src.annotations, tgt.annotations)
        out[method] = tuple(err[c] for c in COLUMNS)
    return out


def candidate_pairs(images: Sequence[EvalImage], pairs=None) -> list[tuple[EvalImage, EvalImage]]:
    """Explicit pairs, or every unordered pair within a plane (lower index is the source)."""
    if pairs is not None:
        by_id = {im.image_id: im for im in images}
        out = []
        for a, b in pairs:
            if a not in by_id or b not in by_id:
                raise ValidationError(f"pair ({a}, {b}) references an unknown image")
            out.append((by_id[a], by_id[b]))
        return out
    out = []
    for plane in sorted({im.plane for im in images}):
        group = [im for im in images if im.plane == plane]
        out.extend(itertools.combinations(group, 2))
    return out


def evaluate_all(images: Sequence[EvalImage], label_map: Mapping[int, str],
                 methods: Sequence[str] = tuple(METHODS), pairs=None,
                 radius_frac: float = DEFAULT_RADIUS, jobs: int = 1) -> EvaluationResult:
    """Evaluate every method on every usable pair.

    When ``salient`` is among the methods, only pairs whose two images had
    both landmark structures identified are used, for all methods alike.
    """
    methods = list(methods)
    skipped = []
    eligible = {}
    for im in images:
        if im.annotations is None:
            eligible[im.image_id] = "missing annotations"
        elif "salient" in methods and (im.landmarks is None or not is_identified(
                im.landmarks, im.annotations, label_map, radius_frac)):
            eligible[im.image_id] = "landmark structures not identified"
        else:
            eligible[im.image_id] = None
    jobs_list = []
    for src, tgt in candidate_pairs(images, pairs):
        name = f"{src.image_id}->{tgt.image_id}"
        reason = eligible[src.image_id] or eligible[tgt.image_id]
        if src.plane != tgt.plane:
            reason = "planes differ"
        if reason:
            skipped.append({"pair": name, "plane": src.plane, "reason": reason})
            log.info("skipping %s: %s", name, reason)
            continue
        jobs_list.append((name, src.plane, (src, tgt, methods, dict(label_map))))

    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_safe_evaluate_pair, [j[2] for j in jobs_list]))
    else:
        outcomes = [_safe_evaluate_pair(j[2]) for j in jobs_list]

    reports = {}
    for plane in sorted({im.plane for im in images}):
        for m in methods:
            reports[(plane, m)] = EvalReport(plane, METHODS[m])
    for (name, plane, _), outcome in zip(jobs_list, outcomes):
        if isinstance(outcome, str):
            skipped.append({"pair": name, "plane": plane, "reason": outcome})
            log.warning("skipping %s: %s", name, outcome)
            continue
        for m in methods:
            reports[(plane, m)].pairs.append(name)
            reports[(plane, m)].errors.append(outcome[m])

    matching = {}
    for plane in sorted({im.plane for im in images}):
        sets = [im.landmarks for im in images if im.plane == plane and im.landmarks is not None]
        anns = {im.image_id: im.annotations for im in images if im.annotations is not None}
        if sets:
            matching[plane] = match_report(sets, anns, label_map, radius_frac)
    return EvaluationResult(list(reports.values()), skipped, matching)


def _safe_evaluate_pair(job):
    try:
        return _evaluate_pair(job)
    except (SalientAlignError, ValueError) as exc:
        return f"{type(exc).__name__}: {exc}"


# ---------------------------------------------------------------------------
# report files

CSV_FIELDS = ("plane", "method", "pair", "csp_err", "lv_err", "hc_err")


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.6f}"


def report_csv(result: EvaluationResult, provenance: Optional[dict] = None) -> str:
    buf = io.StringIO()
    if provenance:
        buf.write(f"# {json.dumps(provenance, sort_keys=True)}\n")
    buf.write("# errors in percent of the target HC long axis; 'sem' rows are standard errors of the mean\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for rep in result.reports:
        for pair, err in zip(rep.pairs, rep.errors):
            writer.writerow([rep.plane, rep.method, pair, *map(_fmt, err)])
    for rep in result.reports:
        writer.writerow([rep.plane, rep.method, "mean", *map(_fmt, rep.mean())])
        writer.writerow([rep.plane, rep.method, "sem", *map(_fmt, rep.sem())])
    return buf.getvalue()


def report_json(result: EvaluationResult, provenance: Optional[dict] = None) -> str:
    doc = {
        "provenance": provenance or {},
        "units": "percent of target HC long axis; +/- is the standard error of the mean",
        "reports": [r.to_json() for r in result.reports],
        "matching": {p: m.to_json() for p, m in sorted(result.matching.items())},
        "skipped": result.skipped,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def read_report_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def format_table(result: EvaluationResult) -> str:
    """Plain-text table in the layout plane / method / CSP / LV / HC center."""
    lines = [f"{'Plane':<6}{'Alignment':<14}{'CSP':>16}{'LV/Cereb.':>16}{'HC Center':>16}"]
    for rep in result.reports:
        mean, sem = rep.mean(), rep.sem()
        cells = "".join(f"{f'{m:.1f} ± {s:.1f}':>16}" for m, s in zip(mean, sem))
        lines.append(f"{rep.plane:<6}{rep.method:<14}{cells}")
    return "\n".join(lines)
