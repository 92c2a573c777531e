"""Symmetry-class segmentation and class-constrained feature matching.

Class labels are 0-based: a split into G classes labels points 0..G-1.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from symreg._parallel import parallel_map
from symreg.errors import DegeneracyError, InputError
from symreg.features import FeatureSet, knn_indices
from symreg.geometry import PointCloud, as_cloud, sq_dist

KMEANS_MAX_ITER = 50
DEFAULT_SAMPLES = 20


@dataclass(frozen=True, eq=False)
class SymmetrySplit:
    assignment: np.ndarray
    g: int
    centroids: np.ndarray

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.int64, copy=True)
        if self.g < 1 or a.ndim != 1 or (len(a) and (a.min() < 0 or a.max() >= self.g)):
            raise InputError("split labels must lie in [0, g)", "bad_split")
        c = np.array(self.centroids, dtype=np.float64, copy=True).reshape(self.g, 3)
        a.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "centroids", c)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.g)

    @property
    def evenness(self) -> float:
        """Population standard deviation of the part sizes."""
        return float(np.std(self.sizes))

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == label)


@dataclass(frozen=True)
class ClassMapping:
    """Query class ``c`` is matched against model class ``permutation[c]``."""

    permutation: tuple

    def __post_init__(self):
        perm = tuple(int(x) for x in self.permutation)
        if sorted(perm) != list(range(len(perm))):
            raise InputError(f"{perm} is not a permutation", "bad_mapping")
        object.__setattr__(self, "permutation", perm)

    @property
    def label(self) -> str:
        return "mapping:" + "-".join(str(x) for x in self.permutation)

    def __getitem__(self, c: int) -> int:
        return self.permutation[c]

    def __len__(self) -> int:
        return len(self.permutation)


def kmeans(points: np.ndarray, g: int, rng: np.random.Generator, max_iter: int = KMEANS_MAX_ITER) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns ``(g, 3)`` centroids.

    An emptied cluster keeps its previous centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    centers = [pts[rng.integers(n)]]
    d2 = sq_dist(pts, centers[0])
    for _ in range(1, g):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers.append(pts[idx])
        d2 = np.minimum(d2, sq_dist(pts, pts[idx]))
    centers = np.array(centers)
    labels = None
    for _ in range(max_iter):
        new = nearest_centroid(pts, centers)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(g):
            members = pts[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return centers


def nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = np.stack([sq_dist(points, c) for c in centroids], axis=1)
    return d.argmin(axis=1)


def _candidate(pts, feats, sample, k, g, seed, t):
    nbr = knn_indices(feats[sample:sample + 1], feats, k)[0]
    local = pts[nbr]
    if len(np.unique(local, axis=0)) < g:
        return None
    centroids = kmeans(local, g, np.random.default_rng([seed, t]))
    labels = nearest_centroid(pts, centroids)
    sizes = np.bincount(labels, minlength=g)
    if (sizes == 0).any():
        return None
    return float(np.std(sizes)), labels, centroids


def symmetry_split(
    cloud: PointCloud,
    features: FeatureSet,
    g: int,
    n_samples: int = DEFAULT_SAMPLES,
    k_neighbors: int | None = None,
    seed: int = 0,
    threads: int = 1,
) -> SymmetrySplit:
    """Split a cloud into ``g`` symmetry classes from feature-space neighbourhoods.

    Each sampled point gathers its feature-nearest neighbours (itself
    included); their 3D positions are clustered into ``g`` groups and every
    point joins its nearest cluster centre. The most even candidate wins,
    earliest sample first on ties.
    """
    cloud = as_cloud(cloud)
    n = len(cloud)
    if g < 2:
        raise InputError("symmetry split needs g >= 2", "bad_params")
    if n_samples < 1:
        raise InputError("n_samples must be >= 1", "bad_params")
    if len(features) != n:
        raise InputError(f"{len(features)} feature rows for {n} points", "count_mismatch")
    if g > n:
        raise DegeneracyError(f"degenerate symmetry split: g={g} exceeds {n} points", "degenerate_split")
    k = min(n, k_neighbors if k_neighbors is not None else max(32, n // 20))
    rng = np.random.default_rng(seed)
    samples = rng.choice(n, size=min(n_samples, n), replace=False)
    pts = cloud.points
    feats = features.features
    cands = parallel_map(
        lambda ts: _candidate(pts, feats, int(ts[1]), k, g, seed, ts[0]), list(enumerate(samples)), threads
    )
    best = None
    for cand in cands:
        if cand is not None and (best is None or cand[0] < best[0]):
            best = cand
    if best is None:
        raise DegeneracyError("degenerate symmetry split", "degenerate_split")
    return SymmetrySplit(best[1], g, best[2])


def enumerate_mappings(g: int) -> list[ClassMapping]:
    """All ``g!`` label permutations, identity first."""
    if not 2 <= g <= 4:
        raise InputError(f"class mappings are enumerated for 2 <= g <= 4, got {g}", "bad_params")
    return [ClassMapping(p) for p in itertools.permutations(range(g))]


def constrained_match(
    query_features: FeatureSet,
    model_features: FeatureSet,
    query_split: SymmetrySplit,
    model_split: SymmetrySplit,
    mapping: ClassMapping,
    k: int = 5,
) -> np.ndarray:
    """Feature kNN restricted to the model class that ``mapping`` pairs with each query class."""
    if query_split.g != model_split.g or len(mapping) != query_split.g:
        raise InputError("splits and mapping disagree on the number of classes", "bad_split")
    if query_features.dim != model_features.dim:
        raise InputError("feature dimension mismatch", "dim_mismatch")
    if len(query_split.assignment) != len(query_features) or len(model_split.assignment) != len(model_features):
        raise InputError("split size differs from feature count", "count_mismatch")
    if k < 1:
        raise InputError("k must be >= 1", "bad_params")
    qf, mf = query_features.features, model_features.features
    blocks = []
    for c in range(query_split.g):
        qidx = query_split.members(c)
        midx = model_split.members(mapping[c])
        if len(qidx) == 0 or len(midx) == 0:
            continue
        kk = min(k, len(midx))
        nn = knn_indices(qf[qidx], mf[midx], kk)
        blocks.append(np.column_stack([np.repeat(qidx, kk), midx[nn].ravel()]))
    if not blocks:
        raise InputError("no class pair has points on both sides", "empty_classes")
    pairs = np.concatenate(blocks)
    return pairs[np.argsort(pairs[:, 0], kind="stable")]
