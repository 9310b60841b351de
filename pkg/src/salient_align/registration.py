"""Two-landmark similarity alignment and image resampling.

Coordinates are continuous pixel coordinates: pixel ``(row i, col j)``
covers ``[j, j+1) x [i, i+1)`` and its center is ``(j + 0.5, i + 0.5)``.
Under this convention the horizontal flip ``x -> W - x`` maps pixel
centers exactly onto mirrored pixel centers.

Positive rotation angles are counterclockwise as seen on screen (y axis
pointing down), which makes the linear part of the transform
``rho * [[cos, sin], [-sin, cos]]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from salient_align.errors import AmbiguousOrientation, DegenerateLandmarks, SingularTransform

log = logging.getLogger(__name__)

DET_EPS = 1e-12
BOUNDS_EPS = 1e-6


@dataclass(frozen=True)
class LandmarkPair:
    """The CSP landmark ``c`` and the LV/cerebellum landmark ``d`` of one image."""

    c: tuple[float, float]
    d: tuple[float, float]
    image_width: float

    def __post_init__(self):
        if tuple(self.c) == tuple(self.d):
            raise DegenerateLandmarks("landmarks coincide")

    @property
    def orientation(self) -> int:
        return int(np.sign(self.c[0] - self.d[0]))


@dataclass(frozen=True)
class SimilarityTransform:
    """Optional flip ``x -> W - x``, translation, then rotation/scale about ``center``."""

    flipped: bool = False
    translation: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0
    scale: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)
    width: float = 0.0
    matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        a, b = self.alpha, self.beta
        cx, cy = self.center
        rot = np.array([[a, b, (1.0 - a) * cx - b * cy],
                        [-b, a, b * cx + (1.0 - a) * cy],
                        [0.0, 0.0, 1.0]])
        sx, off = (-1.0, float(self.width)) if self.flipped else (1.0, 0.0)
        pre = np.array([[sx, 0.0, off + self.translation[0]],
                        [0.0, 1.0, self.translation[1]],
                        [0.0, 0.0, 1.0]])
        m = rot @ pre
        m[2] = (0.0, 0.0, 1.0)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def alpha(self) -> float:
        return self.scale * math.cos(self.rotation)

    @property
    def beta(self) -> float:
        return self.scale * math.sin(self.rotation)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def horizontal_flip(cls, width: float) -> "SimilarityTransform":
        return cls(flipped=True, width=width)

    def inverse_matrix(self) -> np.ndarray:
        if abs(np.linalg.det(self.matrix[:2, :2])) < DET_EPS:
            raise SingularTransform("transform is not invertible")
        return np.linalg.inv(self.matrix)

    def to_json(self) -> dict:
        return {
            "flipped": self.flipped,
            "translation": list(self.translation),
            "rotation": self.rotation,
            "rotation_deg": math.degrees(self.rotation),
            "scale": self.scale,
            "alpha": self.alpha,
            "beta": self.beta,
            "center": list(self.center),
            "width": self.width,
            "matrix": self.matrix.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SimilarityTransform":
        return cls(bool(doc["flipped"]), tuple(doc["translation"]), float(doc["rotation"]),
                   float(doc["scale"]), tuple(doc["center"]), float(doc["width"]))


def _orientation_signs(source: LandmarkPair, target: LandmarkPair, force: bool):
    s, t = source.orientation, target.orientation
    if s == 0 or t == 0:
        if not force:
            raise AmbiguousOrientation("landmarks are vertically aligned; orientation undefined")
        log.warning("ambiguous head orientation, assuming no flip")
        return 1, 1
    return s, t


def needs_flip(source: LandmarkPair, target: LandmarkPair, force: bool = False) -> bool:
    s, t = _orientation_signs(source, target, force)
    return s != t


def flip_x(px: float, source: LandmarkPair, target: LandmarkPair, force: bool = False) -> float:
    """Mirror ``px`` when source and target heads face opposite directions."""
    return source.image_width - px if needs_flip(source, target, force) else px


def fit_transform(source: LandmarkPair, target: LandmarkPair,
                  force: bool = False) -> SimilarityTransform:
    """Similarity mapping ``source.c -> target.c`` and ``source.d -> target.d``."""
    flipped = needs_flip(source, target, force)
    w = source.image_width
    f = (lambda x: w - x) if flipped else (lambda x: x)
    cjf = np.array([f(source.c[0]), source.c[1]], dtype=np.float64)
    djf = np.array([f(source.d[0]), source.d[1]], dtype=np.float64)
    ck = np.asarray(target.c, dtype=np.float64)
    dk = np.asarray(target.d, dtype=np.float64)
    vs = djf - cjf
    vt = dk - ck
    ns, nt = np.hypot(*vs), np.hypot(*vt)
    if ns == 0 or nt == 0:
        raise DegenerateLandmarks("landmarks coincide after flipping")
    cross = vs[1] * vt[0] - vs[0] * vt[1]
    theta = math.atan2(cross, float(vs @ vt))
    t = ck - cjf
    return SimilarityTransform(flipped, (float(t[0]), float(t[1])), theta, float(nt / ns),
                               (float(ck[0]), float(ck[1])), float(w))


def apply(tf: SimilarityTransform, p) -> np.ndarray:
    """Transform one point ``(x, y)`` or an ``(N, 2)`` array of points."""
    pts = np.asarray(p, dtype=np.float64)
    m = tf.matrix if isinstance(tf, SimilarityTransform) else np.asarray(tf)
    out = pts @ m[:2, :2].T + m[:2, 2]
    return out


def sample_bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear samples at array-index coordinates; returns ``(values, inside)``.

    Samples outside ``[0, w-1] x [0, h-1]`` are 0 and flagged outside.
    """
    h, w = img.shape
    inside = ((x >= -BOUNDS_EPS) & (x <= w - 1 + BOUNDS_EPS)
              & (y >= -BOUNDS_EPS) & (y <= h - 1 + BOUNDS_EPS))
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = (1.0 - fx) * img[y0, x0] + fx * img[y0, x1]
    bot = (1.0 - fx) * img[y1, x0] + fx * img[y1, x1]
    vals = (1.0 - fy) * top + fy * bot
    return np.where(inside, vals, 0.0), inside


def warp_coordinates(minv: np.ndarray, out_shape, factor: int = 1):
    """Source array-index coordinates for every output pixel.

    ``factor`` > 1 describes images block-averaged by that factor from a
    full-resolution frame in which ``minv`` is expressed.
    """
    h, w = out_shape
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    qx = factor * (jj + 0.5)
    qy = factor * (ii + 0.5)
    px = minv[0, 0] * qx + minv[0, 1] * qy + minv[0, 2]
    py = minv[1, 0] * qx + minv[1, 1] * qy + minv[1, 2]
    return px / factor - 0.5, py / factor - 0.5


def warp_image(img, tf, out_size: Optional[tuple[int, int]] = None,
               return_mask: bool = False):
    """Resample ``img`` into the target frame of ``tf`` (inverse mapping, bilinear).

    ``out_size`` is ``(height, width)`` and defaults to the input shape.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    m = tf.matrix if isinstance(tf, SimilarityTransform) else np.asarray(tf, dtype=np.float64)
    if abs(np.linalg.det(m[:2, :2])) < DET_EPS:
        raise SingularTransform("transform is not invertible")
    minv = np.linalg.inv(m)
    x, y = warp_coordinates(minv, out_size or img.shape)
    vals, inside = sample_bilinear(img, x, y)
    return (vals, inside) if return_mask else vals
