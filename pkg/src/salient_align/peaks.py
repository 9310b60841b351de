"""Landmark extraction from saliency grids.

Local maxima are cells equal to the maximum over their ``(2d+1)^2``
window and at least the threshold ``t``.  Each maximum is then refined
to subpixel precision with a separable log-quadratic (Gaussian) fit on
its 3x3 neighborhood.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from salient_align.errors import DegenerateFit, ValidationError
from salient_align.grids import ImageMeta, SaliencyGrid, grid_to_pixel

log = logging.getLogger(__name__)

DEFAULT_MIN_DISTANCE = 2
DEFAULT_THRESHOLD = 0.1
LOG_FLOOR = 1e-12
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PeakConfig:
    min_distance: int = DEFAULT_MIN_DISTANCE
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if int(self.min_distance) != self.min_distance or self.min_distance < 1:
            raise ValidationError(f"min_distance must be an integer >= 1, got {self.min_distance}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError(f"threshold must lie in [0, 1], got {self.threshold}")


@dataclass(frozen=True)
class Landmark:
    grid_pos: tuple[float, float]
    pixel_pos: tuple[float, float]
    saliency: float
    seed: tuple[int, int]
    cluster: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "grid_pos": list(self.grid_pos),
            "pixel_pos": list(self.pixel_pos),
            "saliency": self.saliency,
            "seed": list(self.seed),
            "cluster": self.cluster,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Landmark":
        return cls(
            grid_pos=(float(doc["grid_pos"][0]), float(doc["grid_pos"][1])),
            pixel_pos=(float(doc["pixel_pos"][0]), float(doc["pixel_pos"][1])),
            saliency=float(doc["saliency"]),
            seed=(int(doc["seed"][0]), int(doc["seed"][1])),
            cluster=None if doc.get("cluster") is None else int(doc["cluster"]),
        )


@dataclass(frozen=True)
class LandmarkSet:
    image_id: str
    landmarks: tuple[Landmark, ...] = ()
    plane: str = "TV"

    def __len__(self):
        return len(self.landmarks)

    def with_clusters(self, labels) -> "LandmarkSet":
        labels = list(labels)
        if len(labels) != len(self.landmarks):
            raise ValidationError("one cluster label per landmark required")
        lms = tuple(replace(lm, cluster=int(c)) for lm, c in zip(self.landmarks, labels))
        return replace(self, landmarks=lms)

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "plane": self.plane,
                "landmarks": [lm.to_json() for lm in self.landmarks]}

    @classmethod
    def from_json(cls, doc: dict) -> "LandmarkSet":
        return cls(str(doc["image_id"]),
                   tuple(Landmark.from_json(d) for d in doc["landmarks"]),
                   doc.get("plane", "TV"))


def _as_array(s) -> np.ndarray:
    if isinstance(s, SaliencyGrid):
        return s.values
    arr = np.asarray(s)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2D grid, got shape {arr.shape}")
    return arr


def max_filter(s, d: int) -> np.ndarray:
    """Windowed maximum over ``[-d, d]^2``, windows clipped at the grid edges."""
    if d < 1:
        raise ValidationError("d must be >= 1")
    # edge replication only repeats cells already inside the clipped window
    return ndimage.maximum_filter(_as_array(s), size=2 * d + 1, mode="nearest")


def local_maxima(s, cfg: PeakConfig = PeakConfig()) -> list[tuple[int, int]]:
    """Integer ``(x, y)`` cells of thresholded local maxima, one per plateau."""
    arr = _as_array(s)
    mask = (arr == max_filter(arr, cfg.min_distance)) & (arr >= cfg.threshold)
    if not mask.any():
        return []
    # adjacent maxima are necessarily equal-valued, so components are plateaus
    labels, n = ndimage.label(mask, structure=_EIGHT)
    points = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = np.nonzero(labels[sl] == idx)
        ys = ys + sl[0].start
        xs = xs + sl[1].start
        if len(xs) == 1:
            points.append((int(xs[0]), int(ys[0])))
            continue
        points.append(_plateau_point(xs, ys))
    return sorted(points, key=lambda p: (p[1], p[0]))


def _plateau_point(xs: np.ndarray, ys: np.ndarray) -> tuple[int, int]:
    cx = math.floor(xs.mean() + 0.5)
    cy = math.floor(ys.mean() + 0.5)
    member = (xs == cx) & (ys == cy)
    if member.any():
        return (cx, cy)
    # non-convex plateau: nearest member cell to the centroid, row-major tie break
    d2 = (xs - xs.mean()) ** 2 + (ys - ys.mean()) ** 2
    order = np.lexsort((xs, ys, d2))
    return (int(xs[order[0]]), int(ys[order[0]]))


def refine_subpixel(s, p) -> tuple[float, float]:
    """Fit a Gaussian through the 3x3 neighborhood of integer peak ``p``.

    The fit is separable: a parabola through the log values along each
    axis.  It is exact for sampled isotropic or axis-aligned Gaussians.
    Peaks on the outermost ring of cells are returned unchanged.
    Raises DegenerateFit when either log profile is not strictly concave.
    """
    arr = _as_array(s)
    x, y = int(p[0]), int(p[1])
    h, w = arr.shape
    if x < 1 or y < 1 or x > w - 2 or y > h - 2:
        return (float(x), float(y))
    patch = np.log(np.maximum(arr[y - 1:y + 2, x - 1:x + 2].astype(np.float64), LOG_FLOOR))
    offsets = []
    for lo, mid, hi in ((patch[1, 0], patch[1, 1], patch[1, 2]),
                        (patch[0, 1], patch[1, 1], patch[2, 1])):
        curvature = lo - 2.0 * mid + hi
        if not curvature < 0.0:
            raise DegenerateFit(f"non-concave log profile at {(x, y)}")
        offsets.append(min(0.5, max(-0.5, 0.5 * (lo - hi) / curvature)))
    return (x + offsets[0], y + offsets[1])


def extract_landmarks(s: SaliencyGrid, meta: ImageMeta, cfg: PeakConfig = PeakConfig(),
                      plane: str = "TV") -> LandmarkSet:
    """Local maxima -> subpixel refinement -> pixel coordinates."""
    arr = _as_array(s)
    found = []
    for seed in local_maxima(arr, cfg):
        try:
            pos = refine_subpixel(arr, seed)
        except DegenerateFit:
            log.debug("%s: degenerate fit at %s, keeping integer position", meta.image_id, seed)
            pos = (float(seed[0]), float(seed[1]))
        found.append(Landmark(
            grid_pos=pos,
            pixel_pos=grid_to_pixel(pos, meta),
            saliency=float(arr[seed[1], seed[0]]),
            seed=seed,
        ))
    found.sort(key=lambda lm: (-lm.saliency, lm.seed[1], lm.seed[0]))
    return LandmarkSet(meta.image_id, tuple(found), plane)
