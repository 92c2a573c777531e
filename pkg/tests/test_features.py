import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import random_cloud
from symreg.errors import FormatError, InputError
from symreg.features import (
    FPFH_DIM,
    FeatureSet,
    estimate_normals,
    extract_fpfh,
    extract_pairs,
    knn_match,
    load_features,
    sample_negative_pairs,
    write_features,
)
from symreg.geometry import PointCloud, Pose, apply_pose, random_rotation
from symreg.harness.synthetic import canonical_shape
from symreg.io import write_crsf


def _unit(rng, n, c):
    return FeatureSet.from_rows(rng.normal(size=(n, c)))


@pytest.fixture(scope="module")
def chair():
    pts, _ = canonical_shape("chair_like", 1, 1500, seed=3)
    return PointCloud(pts, "chair")


class TestFeatureSet:
    def test_rows_unit(self, rng):
        f = _unit(rng, 10, 4)
        assert f.features.dtype == np.float32
        np.testing.assert_allclose(np.linalg.norm(f.features.astype(float), axis=1), 1, atol=1e-6)

    def test_rejects_unnormalized(self):
        with pytest.raises(InputError) as exc:
            FeatureSet(np.ones((2, 2)))
        assert exc.value.code == "not_normalized"

    def test_rejects_nan(self):
        with pytest.raises(InputError):
            FeatureSet(np.array([[np.nan, 1.0]]))

    def test_rejects_source(self):
        with pytest.raises(InputError):
            FeatureSet(np.eye(2), source="learned")

    def test_zero_row(self):
        with pytest.raises(InputError) as exc:
            FeatureSet.from_rows(np.zeros((1, 3)))
        assert exc.value.code == "zero_feature"


class TestNormals:
    def test_plane_normals(self, rng):
        xy = rng.uniform(-1, 1, size=(400, 2))
        pts = np.column_stack([xy, np.zeros(400)])
        n = estimate_normals(PointCloud(pts), 0.3)
        np.testing.assert_allclose(np.abs(n[:, 2]), 1.0, atol=1e-9)

    def test_sphere_points_outward(self, rng):
        v = rng.normal(size=(500, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        n = estimate_normals(PointCloud(v), 0.3)
        assert (np.einsum("ij,ij->i", n, v) > 0.9).all()


class TestFpfh:
    def test_shape_and_norm(self, chair):
        f = extract_fpfh(chair)
        assert f.features.shape == (len(chair), FPFH_DIM)
        assert f.source == "fpfh"
        np.testing.assert_allclose(np.linalg.norm(f.features.astype(float), axis=1), 1, atol=1e-6)

    def test_rigid_invariance(self, chair):
        base = extract_fpfh(chair).features
        for seed in range(5):
            r = np.random.default_rng(seed)
            moved = apply_pose(chair, Pose(random_rotation(r), r.normal(size=3)))
            assert np.abs(extract_fpfh(moved).features - base).max() < 1e-3

    def test_planar_patch_interior_identical(self):
        g = np.linspace(-1, 1, 41)
        xx, yy = np.meshgrid(g, g)
        pts = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])
        f = extract_fpfh(PointCloud(pts), 0.15, 0.3).features
        interior = (np.abs(pts[:, 0]) < 0.6) & (np.abs(pts[:, 1]) < 0.6)
        rows = f[interior].astype(float)
        d = np.linalg.norm(rows[:, None] - rows[None], axis=-1)
        assert d.max() < 0.05

    def test_isolated_point_uniform(self):
        pts = np.vstack([np.random.default_rng(0).uniform(-0.05, 0.05, size=(20, 3)), [[5.0, 5.0, 5.0]]])
        f = extract_fpfh(PointCloud(pts), 0.1, 0.2).features
        np.testing.assert_allclose(f[-1], np.full(FPFH_DIM, 1 / np.sqrt(FPFH_DIM)), atol=1e-7)

    def test_bad_radius(self, chair):
        with pytest.raises(InputError):
            extract_fpfh(chair, 0.0, 0.2)
        with pytest.raises(InputError):
            extract_fpfh(chair, 0.1, -1.0)

    def test_too_few_points(self):
        with pytest.raises(InputError):
            extract_fpfh(PointCloud(np.eye(3)))

    def test_deterministic(self, chair):
        assert np.array_equal(extract_fpfh(chair).features, extract_fpfh(chair).features)


class TestFeatureFiles:
    def test_roundtrip(self, tmp_path, rng):
        f = _unit(rng, 30, 16)
        write_features(tmp_path / "f.crsf", f)
        g = load_features(tmp_path / "f.crsf", 30)
        assert np.array_equal(g.features, f.features)
        assert g.source == "external"

    def test_count_mismatch(self, tmp_path, rng):
        write_features(tmp_path / "f.crsf", _unit(rng, 4, 3))
        with pytest.raises(FormatError, match="feature/point count mismatch") as exc:
            load_features(tmp_path / "f.crsf", 5)
        assert exc.value.code == "count_mismatch"

    def test_nan(self, tmp_path):
        write_crsf(tmp_path / "f.crsf", np.array([[1.0, np.nan]]))
        with pytest.raises(FormatError, match="non-finite feature") as exc:
            load_features(tmp_path / "f.crsf")
        assert exc.value.code == "non_finite"

    def test_zero_row(self, tmp_path):
        write_crsf(tmp_path / "f.crsf", np.array([[0.0, 0.0]]))
        with pytest.raises(FormatError) as exc:
            load_features(tmp_path / "f.crsf")
        assert exc.value.code == "zero_feature"

    def test_renormalizes(self, tmp_path):
        write_crsf(tmp_path / "f.crsf", np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(load_features(tmp_path / "f.crsf").features, [[0.6, 0.8]], atol=1e-7)

    def test_bad_magic_code(self, tmp_path):
        (tmp_path / "f.crsf").write_bytes(b"XXXX" + b"\0" * 12)
        with pytest.raises(FormatError) as exc:
            load_features(tmp_path / "f.crsf")
        assert exc.value.code == "bad_magic"


class TestExtractPairs:
    def test_identical_diagonal(self, rng):
        c = random_cloud(rng, 25)
        pairs = {tuple(p) for p in extract_pairs(c, c, 1e-6).tolist()}
        assert {(i, i) for i in range(25)} <= pairs

    def test_far_apart(self, rng):
        a = random_cloud(rng, 10)
        b = PointCloud(a.points + [10.0, 0, 0])
        assert len(extract_pairs(a, b, 1.0)) == 0

    def test_brute_force(self):
        for seed in range(10):
            r = np.random.default_rng(seed)
            a, b = random_cloud(r, 30, 0.3), random_cloud(r, 30, 0.3)
            want = oracles.pairs_within(a.points.tolist(), b.points.tolist(), 0.1)
            assert [tuple(p) for p in extract_pairs(a, b, 0.1).tolist()] == want

    def test_transpose(self, rng):
        a, b = random_cloud(rng, 40, 0.5), random_cloud(rng, 35, 0.5)
        ab = {tuple(p) for p in extract_pairs(a, b, 0.2).tolist()}
        ba = {(j, i) for i, j in extract_pairs(b, a, 0.2).tolist()}
        assert ab == ba

    def test_strict_inequality(self):
        a = PointCloud([[0.0, 0, 0]])
        b = PointCloud([[0.5, 0, 0], [0.25, 0, 0]])
        assert extract_pairs(a, b, 0.5).tolist() == [[0, 1]]

    def test_bad_tau(self, rng):
        with pytest.raises(InputError):
            extract_pairs(random_cloud(rng, 3), random_cloud(rng, 3), 0.0)


class TestNegativePairs:
    def test_distance_and_disjoint(self, rng):
        a, b = random_cloud(rng, 40, 0.5), random_cloud(rng, 40, 0.5)
        pos = extract_pairs(a, b, 0.2)
        neg = sample_negative_pairs(a, b, pos, 100, seed=3, tau=0.2)
        assert len(neg) == 100
        d = np.linalg.norm(a.points[neg[:, 0]] - b.points[neg[:, 1]], axis=1)
        assert (d >= 0.2).all()
        assert not {tuple(p) for p in neg.tolist()} & {tuple(p) for p in pos.tolist()}
        assert len({tuple(p) for p in neg.tolist()}) == 100

    def test_seeded(self, rng):
        a, b = random_cloud(rng, 30), random_cloud(rng, 30)
        one = sample_negative_pairs(a, b, [], 20, seed=9)
        two = sample_negative_pairs(a, b, [], 20, seed=9)
        assert np.array_equal(one, two)

    def test_no_negatives(self, rng):
        c = random_cloud(rng, 10, 0.1)
        with pytest.raises(InputError, match="no negatives available"):
            sample_negative_pairs(c, c, [], 5, tau=10.0)

    def test_bad_count(self, rng):
        c = random_cloud(rng, 4)
        with pytest.raises(InputError):
            sample_negative_pairs(c, c, [], 0)


class TestKnnMatch:
    def test_self_diagonal(self, rng):
        f = _unit(rng, 15, 8)
        assert knn_match(f, f, 1).tolist() == [[i, i] for i in range(15)]

    def test_k_equals_m_full_bipartite(self, rng):
        q, m = _unit(rng, 6, 4), _unit(rng, 5, 4)
        pairs = {tuple(p) for p in knn_match(q, m, 5).tolist()}
        assert pairs == {(i, j) for i in range(6) for j in range(5)}

    def test_brute_force(self):
        for seed in range(10):
            r = np.random.default_rng(seed)
            q, m = _unit(r, 20, 8), _unit(r, 20, 8)
            assert knn_match(q, m, 3).tolist() == [list(p) for p in oracles.feature_knn(q.features, m.features, 3)]

    def test_output_size(self, rng):
        assert knn_match(_unit(rng, 11, 3), _unit(rng, 9, 3), 4).shape == (44, 2)

    def test_ties_lower_index(self):
        f = FeatureSet(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        q = FeatureSet(np.array([[1.0, 0.0]]))
        assert knn_match(q, f, 2).tolist() == [[0, 0], [0, 1]]

    def test_dim_mismatch(self, rng):
        with pytest.raises(InputError) as exc:
            knn_match(_unit(rng, 3, 3), _unit(rng, 3, 4), 1)
        assert exc.value.code == "dim_mismatch"

    def test_bad_k(self, rng):
        with pytest.raises(InputError):
            knn_match(_unit(rng, 3, 3), _unit(rng, 3, 3), 4)

    def test_permutation_equivariant(self, rng):
        q, m = _unit(rng, 12, 5), _unit(rng, 10, 5)
        perm = rng.permutation(12)
        base = knn_match(q, m, 3).reshape(12, 3, 2)[:, :, 1]
        moved = knn_match(q.subset(perm), m, 3).reshape(12, 3, 2)[:, :, 1]
        assert np.array_equal(moved, base[perm])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 6))
    def test_cosine_ranking_agrees(self, seed, k):
        r = np.random.default_rng(seed)
        q, m = _unit(r, 5, 7), _unit(r, 12, 7)
        cos = q.features.astype(float) @ m.features.astype(float).T
        want = np.argsort(-cos, axis=1, kind="stable")[:, :k]
        got = knn_match(q, m, k)[:, 1].reshape(5, k)
        assert np.array_equal(got, want)
