"""Per-point local descriptors and the correspondence sets built from them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from symreg.errors import FormatError, InputError
from symreg.geometry import PointCloud, as_cloud, correspondence_array, sq_dist
from symreg.io import read_crsf, write_crsf

FPFH_BINS = 11
FPFH_DIM = 3 * FPFH_BINS
DEFAULT_TAU = 0.05
DEFAULT_K = 5
NORM_TOL = 1e-6
SWAP_TOL = 1e-9
_ROW_CHUNK = 128


def _unit_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    if (norms == 0).any():
        raise InputError("feature row with zero norm cannot be normalized", "zero_feature")
    return (m / norms[:, None]).astype(np.float32)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """``N x C`` float32 descriptors with unit-length rows.

    ``source`` is ``"fpfh"`` or ``"external"``. Use :meth:`from_rows` to
    normalise arbitrary rows on the way in.
    """

    features: np.ndarray
    source: str = "external"

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float32, copy=True)
        if f.ndim != 2 or f.shape[0] == 0 or f.shape[1] == 0:
            raise InputError(f"features must be a non-empty 2-D matrix, got {f.shape}", "bad_shape")
        if not np.isfinite(f).all():
            raise InputError("non-finite feature", "non_finite")
        dev = np.abs(np.linalg.norm(f.astype(np.float64), axis=1) - 1.0).max()
        if dev > NORM_TOL:
            raise InputError(f"feature rows are not unit length (max deviation {dev:.2e})", "not_normalized")
        if self.source not in ("fpfh", "external"):
            raise InputError(f"unknown feature source {self.source!r}", "bad_source")
        f.setflags(write=False)
        object.__setattr__(self, "features", f)

    @classmethod
    def from_rows(cls, rows, source: str = "external") -> "FeatureSet":
        return cls(_unit_rows(rows), source)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, indices) -> "FeatureSet":
        return FeatureSet(self.features[np.asarray(indices)], self.source)


# --- FPFH ------------------------------------------------------------------

def _flatten_neighbors(lists) -> tuple[np.ndarray, np.ndarray]:
    counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
    centers = np.repeat(np.arange(len(lists)), counts)
    nbrs = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists]) if counts.sum() else np.zeros(0, np.int64)
    return centers, nbrs


def estimate_normals(cloud: PointCloud, radius: float) -> np.ndarray:
    """PCA normals over a radius neighbourhood, oriented away from the centroid.

    Points with fewer than 3 neighbours in the radius fall back to their
    6 nearest points.
    """
    cloud = as_cloud(cloud)
    pts = cloud.points
    n = len(pts)
    lists = cloud.kdtree.query_ball_point(pts, radius)
    sparse = [i for i, l in enumerate(lists) if len(l) < 3]
    if sparse:
        _, knn = cloud.kdtree.query(pts[sparse], k=min(n, 6))
        for i, row in zip(sparse, np.atleast_2d(knn)):
            lists[i] = list(row)
    c, j = _flatten_neighbors(lists)
    counts = np.bincount(c, minlength=n).astype(np.float64)
    mean = np.stack([np.bincount(c, pts[j, a], minlength=n) for a in range(3)], axis=1) / counts[:, None]
    dev = pts[j] - mean[c]
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            cov[:, a, b] = cov[:, b, a] = np.bincount(c, dev[:, a] * dev[:, b], minlength=n) / counts
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]

    outward = pts - pts.mean(axis=0)
    dots = np.einsum("ij,ij->i", normals, outward)
    reach = np.linalg.norm(outward, axis=1)
    ambiguous = np.abs(dots) <= 1e-9 * np.maximum(reach, 1e-300)
    sign = np.where(dots < 0, -1.0, 1.0)
    # no usable outward direction: make the dominant component positive
    dom = normals[np.arange(n), np.abs(normals).argmax(axis=1)]
    sign[ambiguous] = np.where(dom[ambiguous] < 0, -1.0, 1.0)
    return normals * sign[:, None]


def _pair_features(p1, n1, p2, n2):
    """Vectorised Rusu pair features (theta, alpha, phi) and a validity mask."""
    d = p2 - p1
    dist = np.sqrt(sq_dist(p2, p1))
    ok = dist > 0
    safe = np.where(ok, dist, 1.0)[:, None]
    a1 = np.einsum("ij,ij->i", n1, d) / safe[:, 0]
    a2 = np.einsum("ij,ij->i", n2, d) / safe[:, 0]
    # near-ties (e.g. coplanar pairs) must not swap on rounding noise
    swap = np.abs(a1) < np.abs(a2) - SWAP_TOL
    s1 = np.where(swap[:, None], n2, n1)
    s2 = np.where(swap[:, None], n1, n2)
    d = np.where(swap[:, None], -d, d)
    phi = np.where(swap, -a2, a1)
    v = np.cross(d, s1)
    vn = np.linalg.norm(v, axis=1)
    ok &= vn > 0
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(s1, v)
    alpha = np.einsum("ij,ij->i", v, s2)
    y = np.einsum("ij,ij->i", w, s2)
    # antiparallel normals put y at +-0, which atan2 maps to +-pi
    y = np.where(np.abs(y) < SWAP_TOL, 0.0, y)
    theta = np.arctan2(y, np.einsum("ij,ij->i", s1, s2))
    return theta, alpha, phi, ok


def _bin(values, lo, hi):
    idx = np.floor(FPFH_BINS * (values - lo) / (hi - lo)).astype(np.int64)
    return np.clip(idx, 0, FPFH_BINS - 1)


def extract_fpfh(cloud: PointCloud, normal_radius: float = 0.1, feature_radius: float = 0.2) -> FeatureSet:
    """33-bin Fast Point Feature Histograms, one unit-length row per point."""
    cloud = as_cloud(cloud)
    if normal_radius <= 0 or feature_radius <= 0:
        raise InputError("FPFH radii must be positive", "bad_params")
    n = len(cloud)
    if n < 5:
        raise InputError(f"FPFH needs at least 5 points, got {n}", "too_few_points")
    pts = cloud.points
    normals = estimate_normals(cloud, normal_radius)

    lists = cloud.kdtree.query_ball_point(pts, feature_radius)
    sizes = np.fromiter((len(x) for x in lists), dtype=np.int64, count=n)
    sparse = sizes < 3
    c, j = _flatten_neighbors(lists)
    keep = c != j
    c, j = c[keep], j[keep]

    theta, alpha, phi, ok = _pair_features(pts[c], normals[c], pts[j], normals[j])
    c_ok = c[ok]
    valid = np.bincount(c_ok, minlength=n).astype(np.float64)
    incr = np.divide(100.0, valid, out=np.zeros(n), where=valid > 0)[c_ok]
    spfh = np.zeros((n, FPFH_DIM))
    for block, (vals, lo, hi) in enumerate(((theta, -math.pi, math.pi), (alpha, -1.0, 1.0), (phi, -1.0, 1.0))):
        bins = block * FPFH_BINS + _bin(vals[ok], lo, hi)
        spfh += np.bincount(c_ok * FPFH_DIM + bins, incr, minlength=n * FPFH_DIM).reshape(n, FPFH_DIM)
    spfh[sparse] = 100.0 / FPFH_BINS

    dist = np.sqrt(sq_dist(pts[c], pts[j]))
    nz = dist > 0
    cw, jw, weight = c[nz], j[nz], 1.0 / dist[nz]
    acc = np.zeros((n, FPFH_DIM))
    for b in range(FPFH_DIM):
        acc[:, b] = np.bincount(cw, weight * spfh[jw, b], minlength=n)
    fpfh = spfh.copy()
    for block in range(3):
        sl = slice(block * FPFH_BINS, (block + 1) * FPFH_BINS)
        total = acc[:, sl].sum(axis=1)
        scale = np.divide(100.0, total, out=np.zeros(n), where=total > 0)
        fpfh[:, sl] += acc[:, sl] * scale[:, None]
    fpfh[sparse] = 1.0
    return FeatureSet.from_rows(fpfh, source="fpfh")


# --- feature files ---------------------------------------------------------

def write_features(path, features: FeatureSet) -> None:
    write_crsf(path, features.features)


def load_features(path, expected_points: int | None = None) -> FeatureSet:
    m = read_crsf(path)
    if expected_points is not None and m.shape[0] != expected_points:
        raise FormatError(
            f"{path}: feature/point count mismatch ({m.shape[0]} rows, {expected_points} points)", "count_mismatch"
        )
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise FormatError(f"{path}: empty feature matrix", "empty_features")
    if not np.isfinite(m).all():
        raise FormatError(f"{path}: non-finite feature", "non_finite")
    norms = np.linalg.norm(m.astype(np.float64), axis=1)
    if (norms == 0).any():
        raise FormatError(f"{path}: zero feature row", "zero_feature")
    # rows within float32 precision of unit length are kept bit-for-bit
    if np.abs(norms - 1.0).max() > NORM_TOL:
        m = _unit_rows(m)
    return FeatureSet(m, source="external")


# --- correspondences -------------------------------------------------------

def extract_pairs(a: PointCloud, b: PointCloud, tau: float = DEFAULT_TAU) -> np.ndarray:
    """All ``(i, j)`` with ``|a_i - b_j| < tau``, sorted lexicographically."""
    if not tau > 0:
        raise InputError("tau must be positive", "bad_params")
    a, b = as_cloud(a), as_cloud(b)
    lists = b.kdtree.query_ball_point(a.points, tau * (1 + 1e-9))
    i, j = _flatten_neighbors(lists)
    keep = np.sqrt(sq_dist(a.points[i], b.points[j])) < tau
    pairs = np.column_stack([i[keep], j[keep]])
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))] if len(pairs) else np.zeros((0, 2), np.int64)


def sample_negative_pairs(
    a: PointCloud, b: PointCloud, positives, count: int, seed: int = 0, tau: float = DEFAULT_TAU
) -> np.ndarray:
    """Uniformly drawn pairs at least ``tau`` apart and outside ``positives``.

    Returns ``min(count, pool size)`` distinct pairs sorted lexicographically.
    """
    if count < 1:
        raise InputError("count must be >= 1", "bad_params")
    if not tau > 0:
        raise InputError("tau must be positive", "bad_params")
    A, B = as_cloud(a).points, as_cloud(b).points
    m = len(B)
    pool = []
    for start in range(0, len(A), _ROW_CHUNK):
        blk = A[start:start + _ROW_CHUNK]
        far = np.sqrt(sq_dist(blk[:, None, :], B[None, :, :])) >= tau
        pool.append(np.flatnonzero(far.ravel()) + start * m)
    flat = np.concatenate(pool)
    pos = correspondence_array(positives)
    if len(pos):
        flat = np.setdiff1d(flat, pos[:, 0] * m + pos[:, 1], assume_unique=False)
    if len(flat) == 0:
        raise InputError("no negatives available", "no_negatives")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(flat, size=min(count, len(flat)), replace=False))
    return np.column_stack([pick // m, pick % m])


def knn_indices(query_rows: np.ndarray, model_rows: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest model rows per query row (ties: lower index first)."""
    A = np.asarray(query_rows, dtype=np.float64)
    B = np.asarray(model_rows, dtype=np.float64)
    out = np.empty((len(A), k), dtype=np.int64)
    for start in range(0, len(A), _ROW_CHUNK):
        d = ((A[start:start + _ROW_CHUNK, None, :] - B[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + _ROW_CHUNK] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def knn_match(query_features: FeatureSet, model_features: FeatureSet, k: int = DEFAULT_K) -> np.ndarray:
    """``k`` feature-space nearest model points for every query point.

    Rows come out grouped by query index, nearest first; ``N * k`` pairs.
    """
    if query_features.dim != model_features.dim:
        raise InputError(
            f"feature dimension mismatch: {query_features.dim} vs {model_features.dim}", "dim_mismatch"
        )
    if not 1 <= k <= len(model_features):
        raise InputError(f"k must be in [1, {len(model_features)}], got {k}", "bad_params")
    idx = knn_indices(query_features.features, model_features.features, k)
    return np.column_stack([np.repeat(np.arange(len(idx)), k), idx.ravel()])
