"""Synthetic fetal-head-like scenes with known ground truth.

A scene is rendered from an ``Anatomy``: the skull ellipse, the CSP
point and the LV (TV plane) or TCD (TC plane) segment, plus a few texture
blobs fixed in the head frame.  Saliency grids are Gaussian mixtures at
the true landmark cells; feature grids hold one prototype per structure
plus a background prototype, all pairwise ``prototype_separation`` apart.

Randomness comes from counter-based Philox streams keyed on
``(seed, index, plane, stream)`` so every scene is reproducible on its own.
Image noise and shadow wedges are drawn per rendered image: a pair's
target gets its own artifact realization unless ``fresh_artifacts`` is off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from salient_align.errors import BadParams, OutOfFrame
from salient_align.grids import AnnotationSet, FeatureGrid, ImageMeta, SaliencyGrid, pixel_to_grid
from salient_align.registration import SimilarityTransform, apply

STRUCTURES = ("csp", "lv")
PLANE_CODE = {"TV": 0, "TC": 1}
_ANATOMY, _NOISE, _SHADOW, _FEATURES, _SALIENCY, _PAIR = range(6)


@dataclass(frozen=True)
class SynthParams:
    width: int = 288
    height: int = 224
    grid_width: int = 36
    grid_height: int = 28
    a_range: tuple[float, float] = (70.0, 85.0)
    ratio_range: tuple[float, float] = (0.75, 0.85)
    head_offset_x: tuple[float, float] = (10.0, 30.0)
    head_offset_y: float = 8.0
    head_angle_deg: float = 15.0
    saliency_sigma: float = 1.2
    peak_heights: tuple[float, float] = (1.0, 0.75)
    saliency_noise: float = 0.0
    n_features: int = 8
    prototype_separation: float = 10.0
    feature_noise: float = 0.5
    image_noise: float = 0.1
    shadows: bool = False
    n_texture_blobs: int = 6

    def validate(self):
        if self.width < 16 or self.height < 16:
            raise BadParams("image too small")
        if self.grid_width < 3 or self.grid_height < 3:
            raise BadParams("grid must be at least 3x3")
        if not self.saliency_sigma > 0:
            raise BadParams("saliency sigma must be positive")
        if not 0 < self.a_range[0] <= self.a_range[1]:
            raise BadParams("bad semi-major range")
        if not 0 < self.ratio_range[0] <= self.ratio_range[1] <= 1:
            raise BadParams("axis ratio must lie in (0, 1]")
        if min(self.peak_heights) < 0.5 or max(self.peak_heights) > 1.0:
            raise BadParams("peak heights must lie in [0.5, 1]")
        if min(self.image_noise, self.feature_noise, self.saliency_noise) < 0:
            raise BadParams("noise levels must be non-negative")
        if self.n_features < 3:
            raise BadParams("need at least 3 feature channels for 3 prototypes")
        if self.feature_noise > 0 and not self.prototype_separation > 6 * self.feature_noise:
            raise BadParams("prototypes must be more than 6 noise sigmas apart")
        return self


@dataclass(frozen=True)
class Anatomy:
    """Geometry of one head in pixel coordinates."""

    plane: str
    center: tuple[float, float]
    a: float
    b: float
    theta: float
    csp: tuple[float, float]
    segment: tuple[tuple[float, float], tuple[float, float]]
    scale: float = 1.0
    blobs: tuple[tuple[float, float, float, float], ...] = ()

    @property
    def lv(self) -> tuple[float, float]:
        (x1, y1), (x2, y2) = self.segment
        return (0.5 * (x1 + x2), 0.5 * (y1 + y2))

    def transformed(self, tf: SimilarityTransform) -> "Anatomy":
        m = tf.matrix
        axis = m[:2, :2] @ np.array([math.cos(self.theta), math.sin(self.theta)])
        pts = lambda p: tuple(float(v) for v in apply(tf, p))
        blobs = tuple(pts((bx, by)) + (br * tf.scale, bi) for bx, by, br, bi in self.blobs)
        return Anatomy(
            plane=self.plane,
            center=pts(self.center),
            a=self.a * tf.scale,
            b=self.b * tf.scale,
            theta=math.atan2(axis[1], axis[0]),
            csp=pts(self.csp),
            segment=(pts(self.segment[0]), pts(self.segment[1])),
            scale=self.scale * tf.scale,
            blobs=blobs,
        )

    def annotations(self, image_id: str) -> AnnotationSet:
        return AnnotationSet(image_id, self.csp, self.segment, self.center,
                             self.a, self.b, self.theta, self.plane)


@dataclass
class SynthScene:
    image_id: str
    image: np.ndarray
    meta: ImageMeta
    saliency: SaliencyGrid
    features: FeatureGrid
    annotations: AnnotationSet
    true_landmarks: list[tuple[str, tuple[float, float], int]]
    rng_seed: int
    anatomy: Anatomy
    params: SynthParams
    index: int = 0
    variant: int = 0

    @property
    def plane(self) -> str:
        return self.anatomy.plane


def _rng(seed: int, index: int, plane: str, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(index), PLANE_CODE[plane], stream])
    return np.random.Generator(np.random.Philox(ss))


def prototypes(params: SynthParams) -> np.ndarray:
    """Rows: CSP, LV/cerebellum, background; pairwise ``prototype_separation`` apart."""
    protos = np.zeros((3, params.n_features))
    for k in range(3):
        protos[k, k] = params.prototype_separation / math.sqrt(2.0)
    return protos


def _head_to_image(center, theta, u, v):
    c, s = math.cos(theta), math.sin(theta)
    return (center[0] + c * u - s * v, center[1] + s * u + c * v)


def random_anatomy(rng: np.random.Generator, params: SynthParams, plane: str) -> Anatomy:
    a = rng.uniform(*params.a_range)
    b = a * rng.uniform(*params.ratio_range)
    side = 1.0 if rng.random() < 0.5 else -1.0
    center = (params.width / 2.0 + side * rng.uniform(*params.head_offset_x),
              params.height / 2.0 + rng.uniform(-params.head_offset_y, params.head_offset_y))
    theta = math.radians(rng.uniform(-params.head_angle_deg, params.head_angle_deg))
    # +1: CSP on the left of the LV/cerebellum, -1: mirrored head
    facing = 1.0 if rng.random() < 0.5 else -1.0
    jitter = lambda: rng.uniform(-0.03, 0.03)
    if plane == "TV":
        csp_uv = (-(0.38 + jitter()) * a, jitter() * b)
        mid_uv = ((0.42 + jitter()) * a, (0.22 + jitter()) * b)
        half = (0.0, 0.14 * b)
    else:
        csp_uv = (-(0.42 + jitter()) * a, jitter() * b)
        mid_uv = ((0.36 + jitter()) * a, jitter() * b)
        half = (0.05 * a, 0.32 * b)
    to_img = lambda u, v: _head_to_image(center, theta, facing * u, v)
    seg = (to_img(mid_uv[0] - half[0], mid_uv[1] - half[1]),
           to_img(mid_uv[0] + half[0], mid_uv[1] + half[1]))
    blobs = []
    for _ in range(params.n_texture_blobs):
        r = math.sqrt(rng.random()) * 0.8
        phi = rng.uniform(0, 2 * math.pi)
        bx, by = to_img(r * a * math.cos(phi), r * b * math.sin(phi))
        blobs.append((bx, by, rng.uniform(4.0, 10.0), rng.uniform(-0.12, 0.15)))
    return Anatomy(plane, center, a, b, theta, to_img(*csp_uv), seg, 1.0, tuple(blobs))


def _segment_distance(px, py, p0, p1):
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    L2 = dx * dx + dy * dy
    t = np.clip(((px - p0[0]) * dx + (py - p0[1]) * dy) / L2, 0.0, 1.0)
    return np.hypot(px - (p0[0] + t * dx), py - (p0[1] + t * dy))


def render_clean(anat: Anatomy, params: SynthParams) -> np.ndarray:
    """Noise-free image of the anatomy, values in [0, 1]."""
    jj, ii = np.meshgrid(np.arange(params.width) + 0.5, np.arange(params.height) + 0.5)
    c, s = math.cos(anat.theta), math.sin(anat.theta)
    dx, dy = jj - anat.center[0], ii - anat.center[1]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    r = np.sqrt((u / anat.a) ** 2 + (v / anat.b) ** 2)
    img = np.full(r.shape, 0.08)
    inside = r < 1.0
    img[inside] = 0.28
    img += 0.1 * np.exp(-((r - 1.25) * anat.b / 12.0) ** 2)
    img += 0.62 * np.exp(-((r - 1.0) * anat.b / (3.0 * anat.scale)) ** 2)
    for bx, by, br, bi in anat.blobs:
        img += bi * np.exp(-((jj - bx) ** 2 + (ii - by) ** 2) / (2 * br ** 2)) * inside
    sc = anat.scale
    img += 0.5 * np.exp(-((jj - anat.csp[0]) ** 2 + (ii - anat.csp[1]) ** 2) / (2 * (5.0 * sc) ** 2))
    dseg = _segment_distance(jj, ii, *anat.segment)
    img += 0.45 * np.exp(-dseg ** 2 / (2 * (3.0 * sc) ** 2))
    return np.clip(img, 0.0, 1.0)


def shadow_mask(rng: np.random.Generator, params: SynthParams) -> np.ndarray:
    """Multiplicative wedges fanning down from apexes above the image top."""
    jj, ii = np.meshgrid(np.arange(params.width) + 0.5, np.arange(params.height) + 0.5)
    mask = np.ones((params.height, params.width))
    for _ in range(int(rng.integers(1, 4))):
        ax = rng.uniform(0.2, 0.8) * params.width
        ay = -0.15 * params.height
        heading = math.radians(rng.uniform(-25.0, 25.0))
        half = math.radians(rng.uniform(5.0, 10.0))
        depth = rng.uniform(0.25, 0.5)
        ang = np.arctan2(jj - ax, ii - ay) - heading
        edge = np.clip((half - np.abs(ang)) / math.radians(1.5), 0.0, 1.0)
        mask *= 1.0 - (1.0 - depth) * edge
    return mask


def render(anat: Anatomy, params: SynthParams, seed: int, index: int,
           variant: int = 0) -> np.ndarray:
    img = render_clean(anat, params)
    if params.shadows:
        img = img * shadow_mask(_rng(seed, index, anat.plane, _SHADOW + 8 * variant), params)
    if params.image_noise > 0:
        rng = _rng(seed, index, anat.plane, _NOISE + 8 * variant)
        noise = rng.standard_normal(img.shape)
        img = img + params.image_noise * noise
    return np.clip(img, 0.0, 1.0)


def _meta(image_id: str, params: SynthParams) -> ImageMeta:
    return ImageMeta.for_grid(image_id, params.width, params.height,
                              params.grid_width, params.grid_height)


def _landmark_cells(anat: Anatomy, meta: ImageMeta):
    return [pixel_to_grid(anat.csp, meta), pixel_to_grid(anat.lv, meta)]


def saliency_grid(anat: Anatomy, params: SynthParams, meta: ImageMeta, seed: int,
                  index: int, variant: int = 0) -> SaliencyGrid:
    gx, gy = np.meshgrid(np.arange(params.grid_width, dtype=np.float64),
                         np.arange(params.grid_height, dtype=np.float64))
    sal = np.zeros(gx.shape)
    two_s2 = 2.0 * params.saliency_sigma ** 2
    for (cx, cy), h in zip(_landmark_cells(anat, meta), params.peak_heights):
        sal += h * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / two_s2)
    if params.saliency_noise > 0:
        rng = _rng(seed, index, anat.plane, _SALIENCY + 8 * variant)
        sal = sal + params.saliency_noise * rng.standard_normal(sal.shape)
    return SaliencyGrid(np.clip(sal, 0.0, 1.0))


def _seed_cell(p) -> tuple[int, int]:
    return (int(math.floor(p[0] + 0.5)), int(math.floor(p[1] + 0.5)))


def feature_grid(anat: Anatomy, params: SynthParams, meta: ImageMeta, seed: int,
                 index: int, variant: int = 0) -> FeatureGrid:
    protos = prototypes(params)
    rng = _rng(seed, index, anat.plane, _FEATURES + 8 * variant)
    feats = np.broadcast_to(protos[2], (params.grid_height, params.grid_width,
                                        params.n_features)).copy()
    for k, cell in enumerate(_landmark_cells(anat, meta)):
        x, y = _seed_cell(cell)
        feats[y, x] = protos[k]
    feats += params.feature_noise * rng.standard_normal(feats.shape)
    return FeatureGrid(feats)


def _check_in_frame(anat: Anatomy, params: SynthParams, meta: ImageMeta):
    c, s = math.cos(anat.theta), math.sin(anat.theta)
    half_w = math.hypot(anat.a * c, anat.b * s)
    half_h = math.hypot(anat.a * s, anat.b * c)
    x0, y0 = anat.center
    if (x0 - half_w < 0 or x0 + half_w > params.width
            or y0 - half_h < 0 or y0 + half_h > params.height):
        raise OutOfFrame("head ellipse leaves the image")
    for gx, gy in _landmark_cells(anat, meta):
        if not (1.0 <= gx <= params.grid_width - 2 and 1.0 <= gy <= params.grid_height - 2):
            raise OutOfFrame("landmark too close to the grid border")


def scene_from_anatomy(anat: Anatomy, params: SynthParams, seed: int, index: int,
                       image_id: str, check: bool = True, variant: int = 0) -> SynthScene:
    meta = _meta(image_id, params)
    if check:
        _check_in_frame(anat, params, meta)
    true = [(name, point, k) for k, (name, point) in
            enumerate(zip(STRUCTURES, (anat.csp, anat.lv)))]
    return SynthScene(
        image_id=image_id,
        image=render(anat, params, seed, index, variant),
        meta=meta,
        saliency=saliency_grid(anat, params, meta, seed, index, variant),
        features=feature_grid(anat, params, meta, seed, index, variant),
        annotations=anat.annotations(image_id),
        true_landmarks=true,
        rng_seed=seed,
        anatomy=anat,
        params=params,
        index=index,
        variant=variant,
    )


def make_scene(seed: int, params: Optional[SynthParams] = None, plane: str = "TV",
               index: int = 0, image_id: Optional[str] = None) -> SynthScene:
    """Deterministic scene for ``(seed, index, plane)``."""
    params = (params or SynthParams()).validate()
    if plane not in PLANE_CODE:
        raise BadParams(f"unknown plane {plane!r}")
    rng = _rng(seed, index, plane, _ANATOMY)
    for _ in range(100):
        anat = random_anatomy(rng, params, plane)
        try:
            return scene_from_anatomy(anat, params, seed, index,
                                      image_id or f"{plane}{index:03d}")
        except OutOfFrame:
            continue
    raise BadParams("could not place a head inside the frame; check size parameters")


@dataclass(frozen=True)
class PairParams:
    flip: bool = False
    translation: tuple[float, float] = (0.0, 0.0)
    rotation_deg: float = 0.0
    scale: float = 1.0

    @classmethod
    def random(cls, rng: np.random.Generator, max_shift: float = 12.0,
               max_rot_deg: float = 20.0, scale_range=(0.9, 1.1)) -> "PairParams":
        return cls(bool(rng.random() < 0.5),
                   (float(rng.uniform(-max_shift, max_shift)),
                    float(rng.uniform(-max_shift, max_shift))),
                   float(rng.uniform(-max_rot_deg, max_rot_deg)),
                   float(rng.uniform(*scale_range)))


def pair_transform(pp: PairParams, params: SynthParams) -> SimilarityTransform:
    """Flip about the vertical midline, translate, then rotate/scale about the image center."""
    return SimilarityTransform(pp.flip, pp.translation, math.radians(pp.rotation_deg), pp.scale,
                               (params.width / 2.0, params.height / 2.0), float(params.width))


def make_pair(scene: SynthScene, pp: PairParams, target_id: Optional[str] = None,
              fresh_artifacts: bool = True):
    """Target scene showing ``scene``'s anatomy moved by the planted transform.

    With ``fresh_artifacts`` the target draws its own image noise, shadows
    and feature/saliency noise; otherwise it reuses the source's streams.
    Returns ``(source, target, true_transform)``.  Raises OutOfFrame when
    the moved head or a landmark leaves the frame.
    """
    tf = pair_transform(pp, scene.params)
    anat = scene.anatomy.transformed(tf)
    variant = scene.variant + 1 if fresh_artifacts else scene.variant
    target = scene_from_anatomy(anat, scene.params, scene.rng_seed, scene.index,
                                target_id or scene.image_id, variant=variant)
    return scene, target, tf


def make_cohort(n_pairs: int, seed: int, params: Optional[SynthParams] = None,
                planes=("TV", "TC")):
    """``n_pairs`` source/target pairs split evenly across planes.

    Returns a list of ``(source, target, true_transform)``.
    """
    params = (params or SynthParams()).validate()
    pairs = []
    for i in range(n_pairs):
        plane = planes[i % len(planes)]
        index = i // len(planes)
        src = make_scene(seed, params, plane, index, f"{plane}{index:03d}a")
        rng = _rng(seed, index, plane, _PAIR)
        for _ in range(100):
            try:
                pairs.append(make_pair(src, PairParams.random(rng), f"{plane}{index:03d}b"))
                break
            except OutOfFrame:
                continue
        else:
            raise BadParams("could not place a transformed head inside the frame")
    return pairs


def with_params(scene: SynthScene, **changes) -> SynthScene:
    """Re-render ``scene``'s anatomy under modified parameters."""
    params = replace(scene.params, **changes).validate()
    return scene_from_anatomy(scene.anatomy, params, scene.rng_seed, scene.index,
                              scene.image_id, check=False, variant=scene.variant)
