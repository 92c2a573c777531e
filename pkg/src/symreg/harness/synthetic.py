"""Synthetic reflection-symmetric objects built from box primitives.

A shape is sampled only inside its fundamental domain (``x > 0``, plus
``y > 0`` when G = 4) and then mirrored, so class ``c`` point ``i`` is the
exact reflection of class ``0`` point ``i``. Labels: 0 = (+x, +y),
1 = (-x, +y), 2 = (+x, -y), 3 = (-x, -y).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from symreg.errors import InputError
from symreg.features import FeatureSet
from symreg.geometry import PointCloud, Pose, random_rotation
from symreg.symmetry import SymmetrySplit

FAMILIES = ("chair_like", "table_like", "box")
MIN_POINTS = 50

DEFAULT_SHAPE = {
    "chair_like": {
        "seat_width": 0.5, "seat_depth": 0.5, "seat_height": 0.45, "thickness": 0.05,
        "back_height": 0.5, "leg_width": 0.05,
    },
    "table_like": {
        "top_width": 1.0, "top_depth": 0.6, "height": 0.7, "thickness": 0.05, "leg_width": 0.06,
    },
    "box": {"size_x": 1.0, "size_y": 0.6, "size_z": 0.4},
}


@dataclass(frozen=True)
class SyntheticSpec:
    family: str = "chair_like"
    symmetry_classes: int = 2
    shape_params: dict = field(default_factory=dict)
    points: int = 1024
    noise_sigma: float = 0.0
    occlusion_fraction: float = 0.0
    seed: int = 0
    rotate: bool = True
    translation_scale: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown family {self.family!r}", "bad_params")
        if self.symmetry_classes not in (1, 2, 4):
            raise InputError("symmetry_classes must be 1, 2 or 4", "bad_params")
        if self.points < self.symmetry_classes:
            raise InputError("too few points for the requested classes", "bad_params")
        if self.noise_sigma < 0 or not 0 <= self.occlusion_fraction < 1:
            raise InputError("need noise_sigma >= 0 and 0 <= occlusion_fraction < 1", "bad_params")
        unknown = set(self.shape_params) - set(DEFAULT_SHAPE[self.family])
        if unknown:
            raise InputError(f"unknown shape parameters for {self.family}: {sorted(unknown)}", "bad_params")

    def params(self) -> dict:
        return {**DEFAULT_SHAPE[self.family], **self.shape_params}


class SyntheticObject(NamedTuple):
    cloud: PointCloud
    pose: Pose
    split: SymmetrySplit


def _boxes(family: str, p: dict) -> list[tuple[np.ndarray, np.ndarray]]:
    """(center, half extents) of each primitive, z up."""
    B = lambda c, h: (np.array(c, float), np.array(h, float))  # noqa: E731
    if family == "chair_like":
        w, d, h, t = p["seat_width"], p["seat_depth"], p["seat_height"], p["thickness"]
        lw, bh = p["leg_width"], p["back_height"]
        boxes = [
            B((0, 0, h), (w / 2, d / 2, t / 2)),
            B((0, -d / 2 + t / 2, h + t / 2 + bh / 2), (w / 2, t / 2, bh / 2)),
        ]
        for sx in (-1, 1):
            for sy in (-1, 1):
                boxes.append(B((sx * (w / 2 - lw / 2), sy * (d / 2 - lw / 2), h / 2), (lw / 2, lw / 2, h / 2)))
        return boxes
    if family == "table_like":
        w, d, h, t, lw = p["top_width"], p["top_depth"], p["height"], p["thickness"], p["leg_width"]
        boxes = [B((0, 0, h), (w / 2, d / 2, t / 2))]
        for sx in (-1, 1):
            for sy in (-1, 1):
                boxes.append(B((sx * (w / 2 - lw), sy * (d / 2 - lw), h / 2), (lw / 2, lw / 2, h / 2)))
        return boxes
    return [B((0, 0, 0), (p["size_x"] / 2, p["size_y"] / 2, p["size_z"] / 2))]


def _sample_surface(boxes, n: int, rng: np.random.Generator) -> np.ndarray:
    faces = []
    for c, h in boxes:
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            for side in (-1.0, 1.0):
                faces.append((c, h, axis, u, v, side, 4 * h[u] * h[v]))
    area = np.array([f[-1] for f in faces])
    which = rng.choice(len(faces), size=n, p=area / area.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    out = np.empty((n, 3))
    for k, (c, h, axis, u, v, side, _) in enumerate(faces):
        sel = which == k
        pts = np.tile(c, (sel.sum(), 1))
        pts[:, axis] += side * h[axis]
        pts[:, u] += uv[sel, 0] * h[u]
        pts[:, v] += uv[sel, 1] * h[v]
        out[sel] = pts
    return out


def _reflect(domain: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
    flips = [(1, 1), (-1, 1), (1, -1), (-1, -1)][:g] if g > 1 else [(1, 1)]
    parts, labels = [], []
    for c, (fx, fy) in enumerate(flips):
        p = domain.copy()
        p[:, 0] *= fx
        p[:, 1] *= fy
        parts.append(p)
        labels.append(np.full(len(domain), c))
    return np.concatenate(parts), np.concatenate(labels)


def canonical_shape(family: str, g: int, points: int, shape_params: dict | None = None, seed: int = 0):
    """Noise-free, unoccluded object in its canonical frame plus class labels.

    The result is centered (symmetry planes stay at x = 0 / y = 0) and
    scaled to unit bounding-sphere diameter.
    """
    params = {**DEFAULT_SHAPE[family], **(shape_params or {})}
    rng = np.random.default_rng(seed)
    boxes = _boxes(family, params)
    per_class = points // g
    if g == 1:
        domain = _sample_surface(boxes, per_class, rng)
    else:
        chunks, have = [], 0
        while have < per_class:
            cand = _sample_surface(boxes, 4 * per_class * g, rng)
            keep = cand[:, 0] > 0
            if g == 4:
                keep &= cand[:, 1] > 0
            chunks.append(cand[keep])
            have += int(keep.sum())
        domain = np.concatenate(chunks)[:per_class]
    full, labels = _reflect(domain, g)
    centroid = full.mean(axis=0)
    if g >= 2:
        centroid[0] = 0.0
    if g == 4:
        centroid[1] = 0.0
    domain = domain - centroid
    radius = np.sqrt((domain ** 2).sum(axis=1)).max()
    domain = domain / (2 * radius)
    full, labels = _reflect(domain, g)
    return full, labels


def generate_synthetic(spec: SyntheticSpec, id: str = "") -> SyntheticObject:
    """Cloud, the pose applied to its canonical frame, and its true class split."""
    g = spec.symmetry_classes
    pts, labels = canonical_shape(spec.family, g, spec.points, spec.params(), spec.seed)
    rng = np.random.default_rng([spec.seed, 1])
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
    if spec.occlusion_fraction > 0:
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        order = np.argsort(pts @ u, kind="stable")
        keep = np.sort(order[: len(pts) - int(round(spec.occlusion_fraction * len(pts)))])
        if len(keep) < MIN_POINTS:
            raise InputError(f"over-occluded: {len(keep)} points left", "over_occluded")
        pts, labels = pts[keep], labels[keep]
    R = random_rotation(rng) if spec.rotate else np.eye(3)
    t = rng.uniform(-1, 1, size=3) * spec.translation_scale
    pose = Pose(R, t)
    observed = pts @ R.T + t
    centroids = np.stack([observed[labels == c].mean(axis=0) if (labels == c).any() else np.zeros(3) for c in range(g)])
    return SyntheticObject(PointCloud(observed, id), pose, SymmetrySplit(labels, g, centroids))


def symmetric_coordinates(points: np.ndarray, g: int) -> np.ndarray:
    """Canonical coordinates folded onto the fundamental domain."""
    q = np.array(points, dtype=np.float64, copy=True)
    if g >= 2:
        q[:, 0] = np.abs(q[:, 0])
    if g == 4:
        q[:, 1] = np.abs(q[:, 1])
    return q


def surrogate_features(
    canonical_points: np.ndarray, g: int, dim: int = 32, bandwidth: float = 0.15, seed: int = 0
) -> FeatureSet:
    """Stand-in for learned local features: random Fourier features of folded coordinates.

    Mirror partners get identical rows; nearby points get similar rows.
    The same ``seed`` must be used for every cloud that is to be matched.
    """
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1.0 / bandwidth, size=(3, dim))
    b = rng.uniform(0.0, 2 * np.pi, size=dim)
    phi = symmetric_coordinates(canonical_points, g) @ W + b
    return FeatureSet.from_rows(np.cos(phi), source="external")


def mirror_partners(n_points: int, g: int) -> np.ndarray:
    """Index of each point's class-1 mirror partner for an unoccluded G >= 2 object."""
    per = n_points // g
    idx = np.arange(per * g)
    cls, i = idx // per, idx % per
    return (cls ^ 1) * per + i


def symmetric_jitter(n_points: int, g: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian offsets shared by mirror partners (each partner gets the reflected offset).

    Adding this to an unoccluded canonical cloud before computing features
    degrades the descriptors while keeping them exactly symmetric.
    """
    per = n_points // g
    base = rng.normal(0.0, sigma, size=(per, 3))
    return _reflect(base, g)[0]
