"""Rigid pose estimation from putative correspondences.

Every pose here maps the *model* cloud onto the *query* cloud.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from symreg._parallel import parallel_map
from symreg.errors import DegeneracyError, InputError
from symreg.features import DEFAULT_K, FeatureSet, knn_match
from symreg.geometry import PointCloud, Pose, apply_pose, as_cloud, correspondence_array, scd
from symreg.symmetry import (
    DEFAULT_SAMPLES,
    SymmetrySplit,
    constrained_match,
    enumerate_mappings,
    symmetry_split,
)

DEGENERACY_RATIO = 1e-12
UNCONSTRAINED = "unconstrained"


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 10_000
    inlier_threshold: float = 0.05
    seed: int = 0
    early_exit_ratio: float = 0.9
    batch_size: int = 256


@dataclass(frozen=True)
class SymmetryParams:
    n_samples: int = DEFAULT_SAMPLES
    k_neighbors: int | None = None
    seed: int = 0


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    pose: Pose
    inlier_count: int
    hypothesis_label: str
    alignment_scd: float

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.pose.rotation.ravel()],
            "translation": [float(v) for v in self.pose.translation],
            "inlier_count": int(self.inlier_count),
            "hypothesis_label": self.hypothesis_label,
            "alignment_scd": float(self.alignment_scd),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationResult":
        pose = Pose(np.asarray(d["rotation"], dtype=float).reshape(3, 3), d["translation"])
        return cls(pose, int(d["inlier_count"]), d["hypothesis_label"], float(d["alignment_scd"]))


def _kabsch_batch(Q: np.ndarray, M: np.ndarray):
    """Least-squares rotations/translations taking ``M[b]`` onto ``Q[b]``.

    Returns ``(R, t, ok)`` where ``ok`` flags non-degenerate point sets.
    """
    qc = Q.mean(axis=1, keepdims=True)
    mc = M.mean(axis=1, keepdims=True)
    H = np.einsum("bni,bnj->bij", M - mc, Q - qc)
    U, S, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ np.swapaxes(U, 1, 2)
    t = qc[:, 0, :] - np.einsum("bij,bj->bi", R, mc[:, 0, :])
    # a collapsed point set leaves H as pure rounding noise with an arbitrary
    # singular value ratio, so also measure against the sets' own spread
    spread = np.sqrt(((M - mc) ** 2).sum(axis=(1, 2)) * ((Q - qc) ** 2).sum(axis=(1, 2)))
    ok = (S[:, 1] > DEGENERACY_RATIO * S[:, 0]) & (S[:, 1] > DEGENERACY_RATIO * spread)
    return R, t, ok


def kabsch(query_pts, model_pts) -> Pose:
    """Rigid transform (unit scale) minimising ``sum |R m + t - q|^2``."""
    Q = np.asarray(query_pts, dtype=np.float64)
    M = np.asarray(model_pts, dtype=np.float64)
    if Q.shape != M.shape or Q.ndim != 2 or Q.shape[1] != 3:
        raise InputError(f"kabsch needs matching (n, 3) arrays, got {Q.shape} and {M.shape}", "bad_shape")
    if len(Q) < 3:
        raise InputError("kabsch needs at least 3 point pairs", "too_few_points")
    R, t, ok = _kabsch_batch(Q[None], M[None])
    if not ok[0]:
        raise DegeneracyError("degenerate correspondence set", "degenerate_correspondences")
    return Pose(R[0], t[0])


@numba.njit(cache=True, nogil=True)
def _residual_sq(r, t, m, q):
    x = r[0, 0] * m[0] + r[0, 1] * m[1] + r[0, 2] * m[2] + t[0] - q[0]
    y = r[1, 0] * m[0] + r[1, 1] * m[1] + r[1, 2] * m[2] + t[1] - q[1]
    z = r[2, 0] * m[0] + r[2, 1] * m[1] + r[2, 2] * m[2] + t[2] - q[2]
    return x * x + y * y + z * z


@numba.njit(cache=True, nogil=True)
def _count_inliers(Q, M, R, t, thr2):
    out = np.zeros(R.shape[0], np.int64)
    for b in range(R.shape[0]):
        n = 0
        for c in range(Q.shape[0]):
            if _residual_sq(R[b], t[b], M[c], Q[c]) < thr2:
                n += 1
        out[b] = n
    return out


@numba.njit(cache=True, nogil=True)
def _inlier_mask(Q, M, R, t, thr2):
    out = np.zeros(Q.shape[0], np.bool_)
    for c in range(Q.shape[0]):
        out[c] = _residual_sq(R, t, M[c], Q[c]) < thr2
    return out


def ransac_register(
    query: PointCloud,
    model: PointCloud,
    correspondences,
    params: RansacParams | None = None,
    label: str = UNCONSTRAINED,
) -> RegistrationResult:
    """Seeded 3-point RANSAC followed by a Kabsch refit on the best inlier set.

    ``inlier_count`` is measured under the refitted pose.

    Sample ``i`` is row ``i`` of one upfront draw from ``seed``, so the
    outcome does not depend on batch size. The search stops at the first
    hypothesis whose inlier ratio exceeds ``early_exit_ratio``; ties on
    inlier count keep the earliest hypothesis.
    """
    p = params or RansacParams()
    query, model = as_cloud(query), as_cloud(model)
    corr = correspondence_array(correspondences)
    if len(corr) < 3:
        raise InputError(f"RANSAC needs at least 3 correspondences, got {len(corr)}", "too_few_correspondences")
    if corr.min() < 0 or corr[:, 0].max() >= len(query) or corr[:, 1].max() >= len(model):
        raise InputError("correspondence index out of bounds", "bad_index")
    Q = query.points[corr[:, 0]]
    M = model.points[corr[:, 1]]
    C = len(corr)
    thr2 = p.inlier_threshold * p.inlier_threshold
    samples = np.random.default_rng(p.seed).integers(0, C, size=(p.iterations, 3))

    best_count, best_R, best_t = -1, None, None
    for start in range(0, p.iterations, p.batch_size):
        s = samples[start:start + p.batch_size]
        distinct = (s[:, 0] != s[:, 1]) & (s[:, 0] != s[:, 2]) & (s[:, 1] != s[:, 2])
        R, t, ok = _kabsch_batch(Q[s], M[s])
        ok &= distinct
        counts = np.full(len(s), -1, dtype=np.int64)
        if ok.any():
            counts[ok] = _count_inliers(Q, M, R[ok], t[ok], thr2)
        exits = np.flatnonzero(counts > p.early_exit_ratio * C)
        stop = exits[0] + 1 if len(exits) else len(s)
        b = int(np.argmax(counts[:stop]))
        if counts[b] > best_count:
            best_count, best_R, best_t = int(counts[b]), R[b], t[b]
        if len(exits):
            break
    if best_count < 0:
        raise DegeneracyError("degenerate correspondence set: no valid minimal sample", "degenerate_correspondences")

    pose = Pose(best_R, best_t)
    count = best_count
    if best_count >= 3:
        inl = _inlier_mask(Q, M, best_R, best_t, thr2)
        R2, t2, ok2 = _kabsch_batch(Q[inl][None], M[inl][None])
        if ok2[0]:
            pose = Pose(R2[0], t2[0])
            count = int(_count_inliers(Q, M, R2, t2, thr2)[0])
    return RegistrationResult(pose, count, label, scd(query, apply_pose(model, pose)))


def plain_register(
    query: PointCloud,
    query_features: FeatureSet,
    model: PointCloud,
    model_features: FeatureSet,
    k: int = DEFAULT_K,
    ransac: RansacParams | None = None,
) -> RegistrationResult:
    """Unconstrained feature kNN followed by RANSAC."""
    k = min(k, len(model_features))
    return ransac_register(query, model, knn_match(query_features, model_features, k), ransac, UNCONSTRAINED)


def register_hypotheses(
    query: PointCloud,
    query_features: FeatureSet,
    model: PointCloud,
    model_features: FeatureSet,
    g: int,
    k: int = DEFAULT_K,
    ransac: RansacParams | None = None,
    symmetry: SymmetryParams | None = None,
    query_split: SymmetrySplit | None = None,
    model_split: SymmetrySplit | None = None,
    threads: int = 1,
) -> list[RegistrationResult]:
    """One RANSAC result per class mapping, then the unconstrained back-up (always last).

    Mappings whose matching or RANSAC fails are dropped; a failed symmetry
    split leaves only the back-up.
    """
    query, model = as_cloud(query), as_cloud(model)
    if len(query_features) != len(query) or len(model_features) != len(model):
        raise InputError("feature rows must match point counts", "count_mismatch")
    sp = symmetry or SymmetryParams()
    jobs = []
    if g >= 2:
        try:
            qs = query_split or symmetry_split(query, query_features, g, sp.n_samples, sp.k_neighbors, sp.seed, threads)
            ms = model_split or symmetry_split(model, model_features, g, sp.n_samples, sp.k_neighbors, sp.seed, threads)
            jobs = [(m, qs, ms) for m in enumerate_mappings(g)]
        except DegeneracyError:
            jobs = []

    def run(job):
        if job is None:
            return plain_register(query, query_features, model, model_features, k, ransac)
        mapping, qs, ms = job
        try:
            corr = constrained_match(query_features, model_features, qs, ms, mapping, k)
            return ransac_register(query, model, corr, ransac, mapping.label)
        except (InputError, DegeneracyError):
            return None

    results = parallel_map(run, jobs + [None], threads)
    return [r for r in results if r is not None]


def symmetry_aware_register(
    query: PointCloud,
    query_features: FeatureSet,
    model: PointCloud,
    model_features: FeatureSet,
    g: int,
    k: int = DEFAULT_K,
    ransac: RansacParams | None = None,
    symmetry: SymmetryParams | None = None,
    query_split: SymmetrySplit | None = None,
    model_split: SymmetrySplit | None = None,
    threads: int = 1,
) -> RegistrationResult:
    """The hypothesis with the smallest query-to-aligned-model SCD (earliest on ties)."""
    results = register_hypotheses(
        query, query_features, model, model_features, g, k, ransac, symmetry, query_split, model_split, threads
    )
    return select_best(results)


def select_best(results: list[RegistrationResult]) -> RegistrationResult:
    best = results[0]
    for r in results[1:]:
        if r.alignment_scd < best.alignment_scd:
            best = r
    return best


def _rotation(x) -> np.ndarray:
    return x.rotation if isinstance(x, Pose) else np.asarray(x, dtype=np.float64)


def _translation(x) -> np.ndarray:
    return x.translation if isinstance(x, Pose) else np.asarray(x, dtype=np.float64)


def rre(estimated, ground_truth) -> float:
    """Geodesic rotation error in radians, ``arccos((tr(R_est^T R_gt) - 1) / 2)``."""
    c = (np.trace(_rotation(estimated).T @ _rotation(ground_truth)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, float(c))))


def rte(estimated, ground_truth) -> float:
    return float(np.linalg.norm(_translation(estimated) - _translation(ground_truth)))
