"""Point clouds, rigid poses and the Chamfer family of distances.

Correspondences are carried as ``(K, 2)`` integer arrays whose rows are
``(query_index, model_index)``; :class:`Correspondence` names a single row
for callers that want one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from symreg._parallel import parallel_map
from symreg.errors import InputError

ORTHO_TOL = 1e-9
NN_CANDIDATES = 4


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered, immutable set of 3D points.

    Row ``i`` of ``points`` is the same physical point for the whole
    lifetime of the object; correspondences index into it.
    """

    points: np.ndarray
    id: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InputError(f"cloud {self.id!r}: expected (N, 3) points, got shape {pts.shape}", "bad_shape")
        if pts.shape[0] == 0:
            raise InputError(f"cloud {self.id!r}: empty cloud", "empty_cloud")
        if not np.isfinite(pts).all():
            raise InputError(f"cloud {self.id!r}: non-finite coordinate", "non_finite")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    @cached_property
    def kdtree(self) -> cKDTree:
        return cKDTree(self.points)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.id)

    def subset(self, indices) -> "PointCloud":
        return PointCloud(self.points[np.asarray(indices)], self.id)


class Correspondence(NamedTuple):
    query_index: int
    model_index: int


@dataclass(frozen=True, eq=False)
class Pose:
    """``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64, copy=True).reshape(3, 3)
        p = np.array(self.translation, dtype=np.float64, copy=True).reshape(3)
        s = float(self.scale)
        if not (np.isfinite(R).all() and np.isfinite(p).all() and math.isfinite(s)):
            raise InputError("pose has non-finite entries", "non_finite")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
            raise InputError("rotation is not orthonormal", "bad_rotation")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InputError("rotation determinant is not +1", "bad_rotation")
        if s <= 0:
            raise InputError(f"pose scale must be positive, got {s}", "bad_scale")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(p))
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -(Rt @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
            self.scale * other.scale,
        )

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["rotation"], dtype=float).reshape(3, 3), d["translation"], d.get("scale", 1.0))


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a unit quaternion with Gaussian components."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InputError(f"expected (N, 3) points, got shape {pts.shape}", "bad_shape")
    return pts


def as_cloud(cloud, id: str = "") -> PointCloud:
    return cloud if isinstance(cloud, PointCloud) else PointCloud(cloud, id)


def apply_pose(cloud: PointCloud, pose: Pose) -> PointCloud:
    cloud = as_cloud(cloud)
    pts = cloud.points @ (pose.scale * pose.rotation).T + pose.translation
    return PointCloud(pts, cloud.id)


def to_ncc(cloud: PointCloud, annotated_pose: Pose) -> PointCloud:
    """Undo an annotated pose: ``s^-1 R^T (X - p)``."""
    cloud = as_cloud(cloud)
    pts = ((cloud.points - annotated_pose.translation) @ annotated_pose.rotation) / annotated_pose.scale
    return PointCloud(pts, cloud.id)


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, Pose]:
    """Center at the centroid and scale to unit bounding-sphere diameter.

    Returns the normalized cloud and the pose that maps it back, so
    ``to_ncc(cloud, pose)`` is the normalized cloud. Degenerate clouds
    (all points coincident) are only centered.
    """
    cloud = as_cloud(cloud)
    centroid = cloud.points.mean(axis=0)
    diameter = 2.0 * float(np.sqrt(sq_dist(cloud.points, centroid).max()))
    scale = diameter if diameter > 0 else 1.0
    pose = Pose(np.eye(3), centroid, scale)
    return to_ncc(cloud, pose), pose


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise squared Euclidean distance, summed in fixed x, y, z order."""
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def correspondence_array(pairs) -> np.ndarray:
    arr = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return arr.reshape(-1, 2)


def matched_point_distance(query: PointCloud, model: PointCloud, assoc) -> float:
    """Mean squared distance over matched query points, normalised by all N.

    Unmatched query points contribute zero but still count in N.
    """
    X, Y = as_points(query), as_points(model)
    corr = correspondence_array(assoc)
    if len(corr) == 0:
        return 0.0
    qi, mj = corr[:, 0], corr[:, 1]
    if qi.min() < 0 or qi.max() >= len(X) or mj.min() < 0 or mj.max() >= len(Y):
        raise InputError("association index out of bounds", "bad_index")
    if len(np.unique(qi)) != len(qi):
        raise InputError("association maps a query point more than once", "bad_index")
    return math.fsum(sq_dist(Y[mj], X[qi])) / len(X)


def _nonempty(cloud, role: str) -> PointCloud:
    if not isinstance(cloud, PointCloud):
        pts = np.asarray(cloud, dtype=np.float64)
        if pts.size == 0:
            raise InputError(f"{role}: empty cloud", "empty_cloud")
        cloud = PointCloud(pts)
    return cloud


def nearest_sq_dists(source, target) -> np.ndarray:
    """Squared distance from each source point to its nearest target point."""
    src = _nonempty(source, "source")
    tgt = _nonempty(target, "target")
    k = min(NN_CANDIDATES, len(tgt))
    dist, idx = tgt.kdtree.query(src.points, k=k)
    dist, idx = dist.reshape(len(src), k), idx.reshape(len(src), k)
    # the tree's own arithmetic can order near-ties differently from sq_dist,
    # so take the exact minimum over a few candidates
    best = sq_dist(src.points[:, None, :], tgt.points[idx]).min(axis=1)
    if k < len(tgt):
        unsure = np.flatnonzero(dist[:, -1] <= dist[:, 0] * (1 + 1e-9) + 1e-300)
        for i in unsure:
            best[i] = sq_dist(tgt.points, src.points[i]).min()
    return best


def scd(source: PointCloud, target: PointCloud) -> float:
    """Single-direction Chamfer distance (sum, not mean)."""
    return math.fsum(nearest_sq_dists(source, target))


def chamfer(a: PointCloud, b: PointCloud) -> float:
    return scd(a, b) + scd(b, a)


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    values: np.ndarray
    model_ids: tuple

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "model_ids", tuple(self.model_ids))

    def index(self, model_id: str) -> int:
        return self.model_ids.index(model_id)


def similarity_matrix(models: Sequence[PointCloud], threads: int = 1) -> SimilarityMatrix:
    """Pairwise Chamfer distances; only the upper triangle is computed."""
    if len(models) < 2:
        raise InputError("similarity matrix needs at least 2 models", "too_few_models")
    clouds = []
    for i, m in enumerate(models):
        name = getattr(m, "id", "") or f"#{i}"
        try:
            clouds.append(_nonempty(m, f"model {name}"))
        except InputError as exc:
            raise InputError(f"model {name}: empty cloud", exc.code) from None
    n = len(clouds)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    vals = parallel_map(lambda ij: chamfer(clouds[ij[0]], clouds[ij[1]]), pairs, threads)
    D = np.zeros((n, n))
    for (i, j), v in zip(pairs, vals):
        D[i, j] = D[j, i] = v
    ids = [c.id if c.id else f"#{i}" for i, c in enumerate(clouds)]
    return SimilarityMatrix(D, ids)


DEFAULT_SET_PARAMS = {"tau_plus": 0.1, "tau_minus": 0.5, "delta_plus": 0.15, "delta_minus": 0.20}


def _check_set_params(tau_plus, tau_minus, delta_plus, delta_minus):
    if not (0 < tau_plus <= tau_minus <= 1):
        raise InputError("need 0 < tau_plus <= tau_minus <= 1", "bad_params")
    if not delta_plus <= delta_minus:
        raise InputError("need delta_plus <= delta_minus", "bad_params")


def rank_by_distance(distances: Iterable[float], ids: Sequence[str], exclude: str | None = None) -> list[tuple[str, float]]:
    """Ascending (distance, id) order; ``exclude`` drops the anchor itself."""
    rows = [(float(d), i) for d, i in zip(distances, ids) if i != exclude]
    rows.sort(key=lambda r: (r[0], r[1]))
    return [(i, d) for d, i in rows]


def sets_from_distances(
    distances,
    ids: Sequence[str],
    anchor_id: str | None = None,
    tau_plus: float = 0.1,
    tau_minus: float = 0.5,
    delta_plus: float = 0.15,
    delta_minus: float = 0.20,
    database_size: int | None = None,
) -> tuple[list[str], list[str]]:
    """Positive / negative sets of one anchor given its Chamfer distances to every model."""
    _check_set_params(tau_plus, tau_minus, delta_plus, delta_minus)
    size = len(ids) if database_size is None else database_size
    ranked = rank_by_distance(distances, ids, exclude=anchor_id)
    positives, negatives = [], []
    for rank, (mid, d) in enumerate(ranked, start=1):
        if rank <= tau_plus * size and d <= delta_plus:
            positives.append(mid)
        if rank >= tau_minus * size and d >= delta_minus:
            negatives.append(mid)
    return positives, negatives


def positive_negative_sets(matrix: SimilarityMatrix, anchor: int, **params) -> tuple[list[str], list[str]]:
    """Rank-and-threshold positive/negative sets for ``anchor``.

    Ranks are 1-based over the models other than the anchor; equal
    distances are ordered by ascending model id.
    """
    n = len(matrix.model_ids)
    if not 0 <= anchor < n:
        raise InputError(f"anchor index {anchor} out of range", "bad_index")
    merged = {**DEFAULT_SET_PARAMS, **params}
    return sets_from_distances(
        matrix.values[anchor], matrix.model_ids, anchor_id=matrix.model_ids[anchor], **merged
    )
