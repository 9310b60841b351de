"""Intensity-based similarity registration (the "LR + Intensity" baseline).

Maximizes the normalized cross-correlation between the target image and
the warped source over translation, rotation and log-scale, coarse to
fine on a block-averaged pyramid, with a Nelder-Mead simplex per level.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from salient_align.errors import FlatImage, ValidationError
from salient_align.registration import BOUNDS_EPS, SimilarityTransform

log = logging.getLogger(__name__)

PYRAMID = (4, 2, 1)
MAX_ITER_PER_LEVEL = 256
SIMPLEX_STEPS = (4.0, 4.0, math.radians(2.0), 0.05)
SIMPLEX_TOL = 1e-3
MIN_OVERLAP = 0.1


def ncc(a, b, mask=None) -> float:
    """Zero-mean normalized cross-correlation of ``a`` and ``b`` over ``mask``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        a = a[mask]
        b = b[mask]
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if not denom > 0:
        raise FlatImage("zero intensity variance; NCC undefined")
    return float(a @ b) / denom


def nelder_mead(fun: Callable[[np.ndarray], float], x0, steps, max_iter: int = MAX_ITER_PER_LEVEL,
                tol: float = SIMPLEX_TOL):
    """Minimize ``fun`` from an axis-aligned initial simplex.

    Stops once the largest vertex-to-vertex distance falls below ``tol``
    or after ``max_iter`` iterations.  Returns ``(x, f, iterations)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.size
    simplex = np.vstack([x0] + [x0 + np.eye(n)[i] * steps[i] for i in range(n)])
    values = np.array([fun(v) for v in simplex])
    it = 0
    while it < max_iter:
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        diffs = simplex[:, None, :] - simplex[None, :, :]
        if np.sqrt((diffs ** 2).sum(axis=2)).max() < tol:
            break
        it += 1
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        fr = fun(xr)
        if fr < values[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = fun(xe)
            if fe < fr:
                simplex[-1], values[-1] = xe, fe
            else:
                simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = fun(xc)
            if fc <= fr:
                simplex[-1], values[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = fun(xc)
            if fc < values[-1]:
                simplex[-1], values[-1] = xc, fc
                continue
        best = simplex[0]
        simplex[1:] = best + 0.5 * (simplex[1:] - best)
        values[1:] = [fun(v) for v in simplex[1:]]
    i = int(np.argmin(values))
    return simplex[i].copy(), float(values[i]), it


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape
    h2, w2 = h // factor, w // factor
    return img[:h2 * factor, :w2 * factor].reshape(h2, factor, w2, factor).mean(axis=(1, 3))


def recenter(tf: SimilarityTransform, center) -> SimilarityTransform:
    """Same mapping, re-expressed with rotation/scale about ``center``."""
    m = tf.matrix
    lin = m[:2, :2] @ np.diag([-1.0 if tf.flipped else 1.0, 1.0])
    rot = np.array([[lin[0, 0], lin[0, 1]], [lin[1, 0], lin[1, 1]]])
    c = np.asarray(center, dtype=np.float64)
    shifted = np.linalg.solve(rot, m[:2, 2] - (np.eye(2) - rot) @ c)
    off = tf.width if tf.flipped else 0.0
    return SimilarityTransform(tf.flipped, (float(shifted[0] - off), float(shifted[1])),
                               tf.rotation, tf.scale, (float(c[0]), float(c[1])), tf.width)


def _params(tf: SimilarityTransform) -> np.ndarray:
    return np.array([tf.translation[0], tf.translation[1], tf.rotation, math.log(tf.scale)])


def _transform(p, like: SimilarityTransform) -> SimilarityTransform:
    return SimilarityTransform(like.flipped, (float(p[0]), float(p[1])), float(p[2]),
                               float(math.exp(p[3])), like.center, like.width)


class _LevelObjective:
    def __init__(self, source: np.ndarray, target: np.ndarray, factor: int, like):
        self.source = downsample(source, factor)
        self.target = downsample(target, factor).ravel()
        h, w = self.source.shape
        self.limits = (w - 1 + BOUNDS_EPS, h - 1 + BOUNDS_EPS)
        self.factor = factor
        self.like = like
        self.min_count = MIN_OVERLAP * self.target.size
        jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        # full-resolution coordinates of the level's pixel centers
        self.qx = (factor * (jj + 0.5)).ravel()
        self.qy = (factor * (ii + 0.5)).ravel()

    def ncc_of(self, tf: SimilarityTransform) -> float:
        minv = np.linalg.inv(tf.matrix)
        f = self.factor
        x = (minv[0, 0] * self.qx + minv[0, 1] * self.qy + minv[0, 2]) / f - 0.5
        y = (minv[1, 0] * self.qx + minv[1, 1] * self.qy + minv[1, 2]) / f - 0.5
        inside = ((x >= -BOUNDS_EPS) & (x <= self.limits[0])
                  & (y >= -BOUNDS_EPS) & (y <= self.limits[1]))
        if inside.sum() < self.min_count:
            return -1.0
        vals = ndimage.map_coordinates(self.source, [y[inside], x[inside]], order=1,
                                       mode="nearest", prefilter=False)
        try:
            return ncc(self.target[inside], vals)
        except FlatImage:
            return -1.0

    def __call__(self, p) -> float:
        if not (abs(p[3]) < 2.0):
            return 1.0
        return -self.ncc_of(_transform(p, self.like))


@dataclass
class IntensityResult:
    transform: SimilarityTransform
    ncc: float
    initial_ncc: float
    iterations: list[int] = field(default_factory=list)


def register_intensity_detailed(source, target, init: SimilarityTransform,
                                levels: Sequence[int] = PYRAMID,
                                max_iter: int = MAX_ITER_PER_LEVEL) -> IntensityResult:
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape:
        raise ValidationError(f"image shapes differ: {source.shape} vs {target.shape}")
    if np.ptp(source) == 0 or np.ptp(target) == 0:
        raise FlatImage("uniform image; NCC undefined")
    h, w = target.shape
    start = recenter(init, (w / 2.0, h / 2.0))
    full = _LevelObjective(source, target, 1, start)
    init_ncc = full.ncc_of(start)
    p = _params(start)
    iterations = []
    for factor in levels:
        obj = full if factor == 1 else _LevelObjective(source, target, factor, start)
        p, _, n_it = nelder_mead(obj, p, SIMPLEX_STEPS, max_iter=max_iter)
        iterations.append(n_it)
        log.debug("level x%d: %d iterations, params %s", factor, n_it, p)
    best = _transform(p, start)
    best_ncc = full.ncc_of(best)
    if best_ncc < init_ncc:
        best, best_ncc = start, init_ncc
    return IntensityResult(best, best_ncc, init_ncc, iterations)


def register_intensity(source, target, init: SimilarityTransform, **kwargs) -> SimilarityTransform:
    """Similarity maximizing NCC(target, warp(source)), starting from ``init``."""
    return register_intensity_detailed(source, target, init, **kwargs).transform
