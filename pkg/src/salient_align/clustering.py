"""Landmark matching across images by clustering their feature vectors.

Feature vectors are sampled at each landmark's integer seed cell, pooled
over all images of a plane, clustered with k-means (k-means++ seeding,
several restarts) and the number of clusters is chosen by maximizing the
mean silhouette over samples.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from salient_align.errors import GridMismatch, SingleCluster, TooFewSamples, ValidationError
from salient_align.grids import FeatureGrid
from salient_align.peaks import LandmarkSet

log = logging.getLogger(__name__)

N_RESTARTS = 10
MAX_ITER = 300
TOL = 1e-8
K_CEILING = 10


@dataclass(frozen=True)
class FeatureCollection:
    keys: tuple[tuple[str, int], ...]
    vectors: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2:
            vec = vec.reshape(len(self.keys), -1)
        if len(self.keys) != vec.shape[0]:
            raise ValidationError("one key per feature vector required")
        if len(set(self.keys)) != len(self.keys):
            raise ValidationError("duplicate (image, landmark) entries")
        object.__setattr__(self, "vectors", vec)

    def __len__(self):
        return len(self.keys)

    @classmethod
    def from_array(cls, vectors) -> "FeatureCollection":
        vec = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        return cls(tuple(("", i) for i in range(vec.shape[0])), vec)


@dataclass
class ClusteringResult:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    silhouette: float
    wcss: float
    per_k_silhouette: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "silhouette": self.silhouette,
            "wcss": self.wcss,
            "per_k_silhouette": {str(k): v for k, v in sorted(self.per_k_silhouette.items())},
            "centroids": self.centroids.tolist(),
        }


def collect_features(landmarks: Sequence[LandmarkSet],
                     features: Union[Mapping[str, FeatureGrid], Sequence[FeatureGrid]]
                     ) -> FeatureCollection:
    """Pool the feature vectors found under every landmark seed cell."""
    if not isinstance(features, Mapping):
        features = {ls.image_id: f for ls, f in zip(landmarks, features)}
    keys, rows = [], []
    channels = None
    for ls in landmarks:
        if not ls.landmarks:
            continue
        grid = features.get(ls.image_id)
        if grid is None:
            raise GridMismatch(f"{ls.image_id}: no feature grid")
        if channels is None:
            channels = grid.channels
        elif grid.channels != channels:
            raise GridMismatch(
                f"{ls.image_id}: {grid.channels} feature channels, expected {channels}")
        for idx, lm in enumerate(ls.landmarks):
            x, y = lm.seed
            if not (0 <= x < grid.width and 0 <= y < grid.height):
                raise GridMismatch(f"{ls.image_id}: landmark {idx} outside the feature grid")
            keys.append((ls.image_id, idx))
            rows.append(grid.values[y, x])
    if not rows:
        return FeatureCollection((), np.zeros((0, channels or 0)))
    return FeatureCollection(tuple(keys), np.vstack(rows))


def _as_matrix(c) -> np.ndarray:
    if isinstance(c, FeatureCollection):
        return c.vectors
    return np.atleast_2d(np.asarray(c, dtype=np.float64))


def kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _fill_empty(X, labels, centroids, k):
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        # farthest point from its own centroid, taken from a cluster that can spare it
        dist = np.sum((X - centroids[labels]) ** 2, axis=1)
        dist[counts[labels] <= 1] = -1.0
        i = int(np.argmax(dist))
        counts[labels[i]] -= 1
        labels[i] = j
        counts[j] = 1
    return labels


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int = MAX_ITER, tol: float = TOL):
    """Lloyd iterations from given centroids.

    Returns ``(labels, centroids, history)`` where ``history`` holds the
    within-cluster sum of squares after every update step.
    """
    k = centroids.shape[0]
    centroids = centroids.astype(np.float64, copy=True)
    history = []
    labels = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        labels = np.argmin(cdist(X, centroids, "sqeuclidean"), axis=1)
        labels = _fill_empty(X, labels, centroids, k)
        new = np.array([X[labels == j].mean(axis=0) for j in range(k)])
        history.append(float(np.sum((X - new[labels]) ** 2)))
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < tol:
            break
    return labels, centroids, history


def kmeans(c, k: int, seed: int = 0, n_restarts: int = N_RESTARTS) -> ClusteringResult:
    """Best-of-``n_restarts`` k-means; deterministic for a fixed seed."""
    X = _as_matrix(c)
    n = X.shape[0]
    if k < 2 or k > n:
        raise TooFewSamples(f"k={k} needs 2 <= k <= {n} samples")
    best = None
    for restart in range(n_restarts):
        rng = np.random.default_rng([seed, k, restart])
        labels, centroids, history = lloyd(X, kmeans_plus_plus(X, k, rng))
        wcss = history[-1]
        if best is None or wcss < best[0]:
            best = (wcss, labels, centroids)
    wcss, labels, centroids = best
    try:
        score = silhouette_score(X, labels)
    except SingleCluster:
        score = 0.0
    return ClusteringResult(k, centroids, labels, score, wcss, {k: score})


def silhouette_score(c, labels) -> float:
    """Mean over samples of ``(b - a) / max(a, b)`` with Euclidean distances.

    Members of singleton clusters score 0, as does any sample with
    ``a == b == 0``.
    """
    X = _as_matrix(c)
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    D = cdist(X, X)
    sums = np.stack([D[:, inv == j].sum(axis=1) for j in range(len(uniq))], axis=1)
    sizes = np.bincount(inv).astype(np.float64)
    rows = np.arange(X.shape[0])
    own = sizes[inv]
    a = np.where(own > 1, sums[rows, inv] / np.maximum(own - 1, 1), 0.0)
    means = sums / sizes
    means[rows, inv] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def auto_cluster(c, k_min: int = 2, k_max: Optional[int] = None, seed: int = 0,
                 n_restarts: int = N_RESTARTS) -> ClusteringResult:
    """Run k-means over ``[k_min, k_max]`` and keep the best silhouette.

    Ties go to the smaller k.
    """
    X = _as_matrix(c)
    n = X.shape[0]
    if n < 3:
        raise TooFewSamples(f"automatic k selection needs >= 3 samples, got {n}")
    if k_max is None:
        k_max = min(K_CEILING, n - 1)
    if not 2 <= k_min <= k_max:
        raise ValidationError(f"invalid k range [{k_min}, {k_max}]")
    if k_max > n - 1:
        raise TooFewSamples(f"k_max={k_max} needs at least {k_max + 1} samples, got {n}")
    best = None
    scores = {}
    for k in range(k_min, k_max + 1):
        res = kmeans(X, k, seed, n_restarts)
        scores[k] = res.silhouette
        if best is None or res.silhouette > best.silhouette:
            best = res
    best.per_k_silhouette = scores
    return best


def _l2_normalize(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms > 0, norms, 1.0)


def cluster_landmark_sets(sets: Sequence[LandmarkSet], features: Mapping[str, FeatureGrid],
                          k_min: int = 2, k_max: Optional[int] = None, seed: int = 0,
                          normalize: bool = False):
    """Cluster landmarks per plane and attach labels.

    Cluster ids are renumbered by descending mean saliency of their
    members so that, for example, the most salient structure is always 0.
    Returns ``(labeled_sets, {plane: ClusteringResult or None})``.
    """
    by_plane = defaultdict(list)
    for ls in sets:
        by_plane[ls.plane].append(ls)
    labeled = {}
    results = {}
    for plane in sorted(by_plane):
        group = by_plane[plane]
        coll = collect_features(group, features)
        saliency = {(ls.image_id, i): lm.saliency
                    for ls in group for i, lm in enumerate(ls.landmarks)}
        n = len(coll)
        hi = None if k_max is None else min(k_max, n - 1)
        if n < 3 or (hi is not None and hi < k_min):
            log.warning("plane %s: %d landmarks, too few to cluster; all labeled 0", plane, n)
            labels = np.zeros(n, dtype=np.int64)
            results[plane] = None
        else:
            X = _l2_normalize(coll.vectors) if normalize else coll.vectors
            res = auto_cluster(X, k_min, hi, seed)
            sal = np.array([saliency[key] for key in coll.keys])
            mean_sal = np.array([sal[res.labels == j].mean() for j in range(res.k)])
            order = np.lexsort((np.arange(res.k), -mean_sal))
            remap = np.empty(res.k, dtype=np.int64)
            remap[order] = np.arange(res.k)
            res.labels = remap[res.labels]
            res.centroids = res.centroids[order]
            labels = res.labels
            results[plane] = res
        per_image = defaultdict(dict)
        for (image_id, idx), lab in zip(coll.keys, labels):
            per_image[image_id][idx] = int(lab)
        for ls in group:
            labs = per_image.get(ls.image_id, {})
            labeled[ls.image_id] = ls.with_clusters(labs[i] for i in range(len(ls.landmarks)))
    return [labeled[ls.image_id] for ls in sets], results
