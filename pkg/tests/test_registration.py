import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_cloud, rz
from symreg.errors import DegeneracyError, InputError
from symreg.features import FeatureSet
from symreg.geometry import PointCloud, Pose, apply_pose, random_rotation, scd
from symreg.harness.synthetic import canonical_shape, surrogate_features
from symreg.registration import (
    UNCONSTRAINED,
    RansacParams,
    RegistrationResult,
    kabsch,
    plain_register,
    ransac_register,
    register_hypotheses,
    rre,
    rte,
    symmetry_aware_register,
)

FAST = RansacParams(iterations=2000)


def _instance(rng, n=200, outlier_frac=0.0, noise=0.0):
    model = random_cloud(rng, n, 0.5)
    gt = Pose(random_rotation(rng), rng.uniform(-1, 1, 3))
    query = apply_pose(model, gt)
    if noise:
        query = PointCloud(query.points + rng.normal(0, noise, query.points.shape))
    corr = np.column_stack([np.arange(n), np.arange(n)])
    bad = rng.random(n) < outlier_frac
    corr[bad, 1] = rng.integers(0, n, bad.sum())
    return query, model, corr, gt


def _symmetric_pair(seed, n=400):
    pts, _ = canonical_shape("chair_like", 2, n, seed=seed)
    feats = surrogate_features(pts, 2, seed=seed)
    return PointCloud(pts), feats


class TestKabsch:
    def test_identity(self, rng):
        p = rng.normal(size=(10, 3))
        pose = kabsch(p, p)
        np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(pose.translation, 0, atol=1e-12)

    def test_exact_transform(self, rng):
        m = rng.normal(size=(20, 3))
        q = m @ rz(90).T + [1, 2, 3]
        pose = kabsch(q, m)
        np.testing.assert_allclose(pose.rotation, rz(90), atol=1e-9)
        np.testing.assert_allclose(pose.translation, [1, 2, 3], atol=1e-9)

    def test_noisy(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            m = r.uniform(-0.5, 0.5, (100, 3))
            R, t = random_rotation(r), r.uniform(-1, 1, 3)
            q = m @ R.T + t + r.normal(0, 0.01, m.shape)
            pose = kabsch(q, m)
            assert math.degrees(rre(pose, R)) < 1
            assert rte(pose, t) < 0.02

    def test_reflection_corrected(self, rng):
        m = rng.normal(size=(10, 3))
        pose = kabsch(m * [-1, 1, 1], m)
        assert np.linalg.det(pose.rotation) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_orthonormal(self, seed):
        r = np.random.default_rng(seed)
        R = kabsch(r.normal(size=(8, 3)), r.normal(size=(8, 3))).rotation
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1) < 1e-12

    def test_collinear(self):
        line = np.outer(np.arange(5.0), [1, 2, 3])
        with pytest.raises(DegeneracyError, match="degenerate correspondence set"):
            kabsch(line, line)

    def test_bad_shapes(self, rng):
        with pytest.raises(InputError):
            kabsch(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
        with pytest.raises(InputError):
            kabsch(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))


class TestRansac:
    def test_outlier_free(self, rng):
        q, m, corr, gt = _instance(rng)
        res = ransac_register(q, m, corr, FAST)
        assert rre(res.pose, gt) < 1e-7
        assert rte(res.pose, gt) < 1e-9
        assert res.inlier_count == len(corr)
        assert res.hypothesis_label == UNCONSTRAINED

    def test_outliers(self):
        ok = 0
        for seed in range(20):
            r = np.random.default_rng(seed)
            q, m, corr, gt = _instance(r, 500, 0.4)
            res = ransac_register(q, m, corr, RansacParams(seed=seed))
            ok += math.degrees(rre(res.pose, gt)) <= 1 and rte(res.pose, gt) <= 0.01
        assert ok >= 19

    def test_deterministic(self, rng):
        q, m, corr, _ = _instance(rng, 300, 0.7, 0.01)
        a = ransac_register(q, m, corr, FAST)
        b = ransac_register(q, m, corr, FAST)
        assert a.to_dict() == b.to_dict()

    def test_batch_size_irrelevant(self, rng):
        q, m, corr, _ = _instance(rng, 300, 0.8, 0.01)
        a = ransac_register(q, m, corr, RansacParams(iterations=1000, batch_size=7))
        b = ransac_register(q, m, corr, RansacParams(iterations=1000, batch_size=1000))
        assert a.to_dict() == b.to_dict()

    def test_scd_field(self, rng):
        q, m, corr, _ = _instance(rng, 100, 0.5, 0.02)
        res = ransac_register(q, m, corr, FAST)
        assert res.alignment_scd == pytest.approx(scd(q, apply_pose(m, res.pose)), abs=1e-9)

    def test_zero_inliers(self, rng):
        q, m = random_cloud(rng, 30), random_cloud(rng, 30)
        corr = np.column_stack([np.arange(30), rng.permutation(30)])
        res = ransac_register(q, m, corr, RansacParams(iterations=50, inlier_threshold=1e-9))
        assert res.inlier_count == 0
        assert np.isfinite(res.pose.rotation).all()

    def test_too_few(self, rng):
        c = random_cloud(rng, 5)
        with pytest.raises(InputError):
            ransac_register(c, c, [[0, 0], [1, 1]])

    def test_bad_index(self, rng):
        c = random_cloud(rng, 5)
        with pytest.raises(InputError):
            ransac_register(c, c, [[0, 0], [1, 1], [2, 7]])

    def test_all_samples_degenerate(self):
        c = PointCloud(np.outer(np.arange(6.0), [1, 0, 0]))
        corr = np.column_stack([np.arange(6), np.arange(6)])
        with pytest.raises(DegeneracyError):
            ransac_register(c, c, corr, RansacParams(iterations=20))

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), extra=st.integers(1, 40))
    def test_monotone_in_information(self, seed, extra):
        r = np.random.default_rng(seed)
        q, m, corr, _ = _instance(r, 120, 0.6, 0.005)
        more = np.vstack([corr, np.repeat(np.arange(extra)[:, None], 2, axis=1)])
        p = RansacParams(iterations=1000, seed=seed)
        assert ransac_register(q, m, more, p).inlier_count >= ransac_register(q, m, corr, p).inlier_count

    def test_result_roundtrip(self, rng):
        q, m, corr, _ = _instance(rng, 50)
        res = ransac_register(q, m, corr, FAST)
        back = RegistrationResult.from_dict(res.to_dict())
        assert back.to_dict() == res.to_dict()


class TestSymmetryAware:
    def test_self_registration(self):
        cloud, feats = _symmetric_pair(0)
        # k=1: wider neighbourhoods add near-miss inliers that bias the refit
        hyps = register_hypotheses(cloud, feats, cloud, feats, 2, k=1, ransac=FAST)
        best = symmetry_aware_register(cloud, feats, cloud, feats, 2, k=1, ransac=FAST)
        assert best.alignment_scd < 1e-20
        assert all(best.alignment_scd <= h.alignment_scd for h in hyps)

    def test_hypothesis_order(self):
        cloud, feats = _symmetric_pair(1)
        hyps = register_hypotheses(cloud, feats, cloud, feats, 2, ransac=FAST)
        assert [h.hypothesis_label for h in hyps] == ["mapping:0-1", "mapping:1-0", UNCONSTRAINED]

    def test_argmin_and_backup(self):
        for seed in range(4):
            r = np.random.default_rng(seed)
            q, qf = _symmetric_pair(seed, 300)
            q = apply_pose(q, Pose(random_rotation(r), r.normal(size=3) * 0.1))
            m, mf = _symmetric_pair(seed + 10, 300)
            p = RansacParams(iterations=500, seed=seed)
            hyps = register_hypotheses(q, qf, m, mf, 2, ransac=p)
            best = symmetry_aware_register(q, qf, m, mf, 2, ransac=p)
            plain = plain_register(q, qf, m, mf, ransac=p)
            assert best.alignment_scd == min(h.alignment_scd for h in hyps)
            assert hyps[-1].to_dict() == plain.to_dict()
            assert best.alignment_scd <= plain.alignment_scd

    def test_asymmetric_cloud_backup(self, rng):
        q, m = random_cloud(rng, 200, 0.5), random_cloud(rng, 200, 0.5)
        qf, mf = FeatureSet.from_rows(rng.normal(size=(200, 8))), FeatureSet.from_rows(rng.normal(size=(200, 8)))
        best = symmetry_aware_register(q, qf, m, mf, 2, ransac=FAST)
        assert best.alignment_scd <= plain_register(q, qf, m, mf, ransac=FAST).alignment_scd

    def test_g1_is_plain(self):
        cloud, feats = _symmetric_pair(2, 200)
        hyps = register_hypotheses(cloud, feats, cloud, feats, 1, ransac=FAST)
        assert [h.hypothesis_label for h in hyps] == [UNCONSTRAINED]

    def test_degenerate_split_falls_back(self):
        cloud = PointCloud(np.vstack([np.zeros((20, 3)), np.ones((20, 3)), np.eye(3)]))
        feats = FeatureSet.from_rows(np.random.default_rng(0).normal(size=(43, 4)))
        hyps = register_hypotheses(cloud, feats, cloud, feats, 4, ransac=FAST)
        assert hyps[-1].hypothesis_label == UNCONSTRAINED

    def test_threads_identical(self):
        cloud, feats = _symmetric_pair(3, 300)
        moved = apply_pose(cloud, Pose(rz(40), [0.1, 0, 0]))
        a = register_hypotheses(moved, feats, cloud, feats, 2, ransac=FAST)
        b = register_hypotheses(moved, feats, cloud, feats, 2, ransac=FAST, threads=3)
        assert [h.to_dict() for h in a] == [h.to_dict() for h in b]

    def test_equivariance(self):
        for seed in range(3):
            r = np.random.default_rng(seed)
            q, qf = _symmetric_pair(seed, 300)
            m, mf = _symmetric_pair(seed + 5, 300)
            T = Pose(random_rotation(r), r.normal(size=3))
            a = symmetry_aware_register(q, qf, m, mf, 2, ransac=FAST)
            b = symmetry_aware_register(apply_pose(q, T), qf, m, mf, 2, ransac=FAST)
            assert b.alignment_scd == pytest.approx(a.alignment_scd, abs=1e-6)
            np.testing.assert_allclose(T.compose(a.pose).rotation, b.pose.rotation, atol=1e-6)

    def test_count_mismatch(self, rng):
        c = random_cloud(rng, 10)
        with pytest.raises(InputError):
            register_hypotheses(c, FeatureSet.from_rows(rng.normal(size=(9, 3))), c,
                                FeatureSet.from_rows(rng.normal(size=(10, 3))), 2)


class TestMetrics:
    def test_rre_cases(self):
        assert rre(np.eye(3), np.eye(3)) == 0.0
        assert abs(rre(rz(90), np.eye(3)) - math.pi / 2) < 1e-12
        assert abs(rre(rz(180), np.eye(3)) - math.pi) < 1e-12

    def test_rte_cases(self):
        assert rte(Pose(translation=[1, 2, 3]), Pose(translation=[1, 2, 3])) == 0.0
        assert rte([1, 0, 0], [0, 0, 0]) == 1.0
        assert abs(rte([1, 2, 2], [0, 0, 0]) - 3) < 1e-12

    def test_clamped(self):
        # a rotation a rounding error away from identity must not produce NaN
        R = rz(1e-9)
        assert 0 <= rre(R, R.T @ R @ R) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_symmetric_and_left_invariant(self, seed):
        r = np.random.default_rng(seed)
        a, b, c = (random_rotation(r) for _ in range(3))
        assert abs(rre(a, b) - rre(b, a)) < 1e-9
        assert abs(rre(c @ a, c @ b) - rre(a, b)) < 1e-7
        assert 0 <= rre(a, b) <= math.pi
