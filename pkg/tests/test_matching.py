import dataclasses

import numpy as np
import pytest

import stainalign as sa
from stainalign.features import FeatureSet, Keypoint
from stainalign.geometry import AffineModel, affine_apply_many
from stainalign.matching import (
    Correspondence,
    FscParams,
    estimate_affine_lsq,
    fsc_filter,
    match_descriptors,
    ransac_filter,
    residuals,
)

from oracles import brute_force_ratio_matches, exhaustive_affine_consensus

ROT15_SCALE11 = AffineModel(
    1.1 * np.cos(np.radians(15)),
    -1.1 * np.sin(np.radians(15)),
    1.1 * np.sin(np.radians(15)),
    1.1 * np.cos(np.radians(15)),
    30.0,
    -12.0,
)


def feature_set(points, descriptors):
    kps = tuple(Keypoint(x=float(x), y=float(y), scale=2.0, orientation=0.0, response=1.0) for x, y in points)
    return FeatureSet(keypoints=kps, descriptors=np.asarray(descriptors, dtype=float))


def random_unit_descriptors(rng, n):
    d = np.abs(rng.standard_normal((n, 128)))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def make_matches(src, tgt, ratios):
    return [Correspondence(tuple(s), tuple(t), float(r)) for s, t, r in zip(src, tgt, ratios)]


def sixty_forty_fixture(seed=2024):
    """60 noisy inliers of a known affine plus 40 uniform outliers.

    Inlier ratios sit in the seed tier, outliers above it; mirrors how the
    distance-ratio test separates confident matches in practice.
    """
    rng = np.random.default_rng(seed)
    src_in = rng.uniform(0, 1000, size=(60, 2))
    tgt_in = affine_apply_many(ROT15_SCALE11, src_in) + rng.normal(0, 1.0, size=(60, 2))
    src_out = rng.uniform(0, 1000, size=(40, 2))
    tgt_out = rng.uniform(0, 1000, size=(40, 2))
    matches = make_matches(
        np.vstack([src_in, src_out]),
        np.vstack([tgt_in, tgt_out]),
        np.concatenate([rng.uniform(0.2, 0.6, 60), rng.uniform(0.62, 0.85, 40)]),
    )
    return matches, np.arange(100) < 60


class TestMatchDescriptors:
    def test_set_against_itself(self, features512):
        sub = features512.subset(np.arange(50))
        matches = match_descriptors(sub, sub, ratio_threshold=0.8)
        assert len(matches) == 50
        for m in matches:
            assert m.source == m.target
            assert m.ratio < 0.05

    def test_empty_inputs(self, features512):
        empty = FeatureSet(keypoints=(), descriptors=np.zeros((0, 128)))
        assert match_descriptors(empty, features512) == []
        assert match_descriptors(features512, empty) == []

    def test_planted_identical_pairs_recovered_exactly(self):
        rng = np.random.default_rng(17)
        desc_a = random_unit_descriptors(rng, 100)
        desc_b = random_unit_descriptors(rng, 100)
        planted = rng.choice(100, size=10, replace=False)
        desc_b[planted] = desc_a[planted]
        pts = rng.uniform(0, 500, size=(100, 2))
        fa = feature_set(pts, desc_a)
        fb = feature_set(pts, desc_b)
        matches = match_descriptors(fa, fb, ratio_threshold=0.8)
        got = {(m.source, m.target) for m in matches}
        expected = {(tuple(pts[i]), tuple(pts[i])) for i in planted}
        assert got == expected

    def test_agrees_with_brute_force_oracle(self):
        rng = np.random.default_rng(23)
        desc_a = random_unit_descriptors(rng, 60)
        desc_b = random_unit_descriptors(rng, 60)
        desc_b[:20] = desc_a[:20] + rng.normal(0, 0.02, (20, 128))
        desc_b /= np.linalg.norm(desc_b, axis=1, keepdims=True)
        pts_a = rng.uniform(0, 100, (60, 2))
        pts_b = rng.uniform(0, 100, (60, 2))
        got = match_descriptors(feature_set(pts_a, desc_a), feature_set(pts_b, desc_b), 0.85)
        oracle = brute_force_ratio_matches(desc_a, desc_b, 0.85)
        assert len(got) == len(oracle)
        for m in got:
            qi = int(np.nonzero((pts_a == m.source).all(axis=1))[0][0])
            ti, ratio = oracle[qi]
            assert tuple(pts_b[ti]) == m.target
            assert m.ratio == pytest.approx(ratio, abs=1e-12)

    def test_one_to_one(self):
        rng = np.random.default_rng(4)
        base = random_unit_descriptors(rng, 1)[0]
        # two queries near one target descriptor; only the closer survives
        desc_a = np.stack([base, base + 1e-3, random_unit_descriptors(rng, 1)[0]])
        desc_a /= np.linalg.norm(desc_a, axis=1, keepdims=True)
        desc_b = np.stack([base, random_unit_descriptors(rng, 1)[0]])
        desc_b /= np.linalg.norm(desc_b, axis=1, keepdims=True)
        fa = feature_set([(0, 0), (1, 1), (2, 2)], desc_a)
        fb = feature_set([(5, 5), (6, 6)], desc_b)
        matches = match_descriptors(fa, fb, 0.9)
        targets = [m.target for m in matches]
        assert len(targets) == len(set(targets))
        assert (0.0, 0.0) in [m.source for m in matches if m.target == (5.0, 5.0)]


class TestEstimateAffine:
    def test_identity_from_three_pairs(self):
        pts = [(0, 0), (10, 0), (0, 10)]
        m = estimate_affine_lsq(make_matches(pts, pts, [0.5] * 3))
        res = residuals(m, make_matches(pts, pts, [0.5] * 3))
        assert res.max() < 1e-9

    def test_pure_translation(self):
        src = [(0, 0), (10, 0), (0, 10), (7, 3)]
        tgt = [(x + 5, y - 3) for x, y in src]
        m = estimate_affine_lsq(make_matches(src, tgt, [0.5] * 4))
        assert m.tx == pytest.approx(5.0, abs=1e-9)
        assert m.ty == pytest.approx(-3.0, abs=1e-9)
        assert np.allclose(m.linear, np.eye(2), atol=1e-9)

    def test_three_pair_interpolation_exact(self):
        rng = np.random.default_rng(11)
        src = rng.uniform(0, 100, (3, 2))
        tgt = rng.uniform(0, 100, (3, 2))
        matches = make_matches(src, tgt, [0.5] * 3)
        assert residuals(estimate_affine_lsq(matches), matches).max() < 1e-9

    def test_too_few_pairs(self):
        with pytest.raises(sa.InsufficientCorrespondencesError):
            estimate_affine_lsq(make_matches([(0, 0), (1, 1)], [(0, 0), (1, 1)], [0.5, 0.5]))

    def test_collinear_sources(self):
        src = [(0, 0), (5, 5), (10, 10), (15, 15)]
        tgt = [(1, 0), (6, 5), (11, 10), (16, 15)]
        with pytest.raises(sa.DegenerateConfigurationError):
            estimate_affine_lsq(make_matches(src, tgt, [0.5] * 4))

    def test_noisy_recovery_within_three_standard_errors(self):
        names = ["a11", "a12", "a21", "a22", "tx", "ty"]
        estimates = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            src = rng.uniform(0, 1000, size=(20, 2))
            tgt = affine_apply_many(ROT15_SCALE11, src) + rng.normal(0, 0.5, size=(20, 2))
            m = estimate_affine_lsq(make_matches(src, tgt, [0.5] * 20))
            estimates.append([getattr(m, n) for n in names])
        estimates = np.array(estimates)
        truth = np.array([getattr(ROT15_SCALE11, n) for n in names])
        sem = estimates.std(axis=0, ddof=1) / np.sqrt(len(estimates))
        assert np.all(np.abs(estimates.mean(axis=0) - truth) <= 3 * sem)

    def test_result_is_local_minimum(self):
        rng = np.random.default_rng(7)
        src = rng.uniform(0, 500, size=(15, 2))
        tgt = affine_apply_many(ROT15_SCALE11, src) + rng.normal(0, 1.0, size=(15, 2))
        matches = make_matches(src, tgt, [0.5] * 15)
        model = estimate_affine_lsq(matches)
        base = (residuals(model, matches) ** 2).sum()
        for name in ["a11", "a12", "a21", "a22", "tx", "ty"]:
            for delta in (1e-3, -1e-3):
                bumped = dataclasses.replace(model, **{name: getattr(model, name) + delta})
                assert (residuals(bumped, matches) ** 2).sum() >= base


class TestFscFilter:
    def test_exact_all_inlier_set_is_fixed_point(self):
        rng = np.random.default_rng(3)
        src = rng.uniform(0, 400, size=(12, 2))
        tgt = affine_apply_many(ROT15_SCALE11, src)
        matches = make_matches(src, tgt, rng.uniform(0.2, 0.5, 12))
        inliers, model = fsc_filter(matches, FscParams(inlier_tolerance=3.0))
        assert inliers == matches
        assert np.allclose(model.to_list(), ROT15_SCALE11.to_list(), atol=1e-6)

    def test_sixty_forty_fixture(self):
        matches, truth = sixty_forty_fixture()
        inliers, model = fsc_filter(matches, FscParams(inlier_tolerance=3.0))
        got = np.array([m in inliers for m in matches])
        assert (got & truth).sum() >= 57
        assert (got & ~truth).sum() <= 2

    def test_agrees_with_exhaustive_oracle(self):
        matches, _ = sixty_forty_fixture()
        inliers, _ = fsc_filter(matches, FscParams(inlier_tolerance=3.0))
        got = np.array([m in inliers for m in matches])
        src = np.array([m.source for m in matches])
        tgt = np.array([m.target for m in matches])
        oracle = exhaustive_affine_consensus(src, tgt, 3.0)
        assert (got == oracle).mean() >= 0.95

    def test_monotone_consistency(self):
        matches, _ = sixty_forty_fixture(seed=77)
        p = FscParams(inlier_tolerance=3.0)
        inliers, model = fsc_filter(matches, p)
        res = residuals(model, matches)
        chosen = np.array([m in inliers for m in matches])
        assert np.all(res[chosen] <= p.inlier_tolerance)
        assert np.all(res[~chosen] > p.inlier_tolerance)

    def test_deterministic(self):
        matches, _ = sixty_forty_fixture(seed=5)
        a = fsc_filter(matches, FscParams(inlier_tolerance=3.0))
        b = fsc_filter(matches, FscParams(inlier_tolerance=3.0))
        assert a[0] == b[0]
        assert a[1] == b[1]

    def test_random_correspondences_fail(self):
        rng = np.random.default_rng(0)
        matches = make_matches(
            rng.uniform(0, 500, (10, 2)), rng.uniform(0, 500, (10, 2)), rng.uniform(0.3, 0.8, 10)
        )
        # oracle check: no affine explains 6 of these within 3 px
        oracle = exhaustive_affine_consensus(
            np.array([m.source for m in matches]), np.array([m.target for m in matches]), 3.0
        )
        assert oracle.sum() < 6
        with pytest.raises(sa.ConsensusFailureError):
            fsc_filter(matches, FscParams(inlier_tolerance=3.0, min_inliers=6))

    def test_seed_model_rescues_sparse_ratio_signal(self):
        rng = np.random.default_rng(8)
        src = rng.uniform(0, 400, size=(12, 2))
        matches = make_matches(src, src + rng.normal(0, 0.5, src.shape), np.full(12, 0.84))
        inliers, model = fsc_filter(
            matches, FscParams(inlier_tolerance=5.0), seed_model=AffineModel.identity()
        )
        assert len(inliers) == 12


class TestRansacFilter:
    def test_all_inlier_exact_set(self):
        rng = np.random.default_rng(6)
        src = rng.uniform(0, 400, size=(10, 2))
        tgt = affine_apply_many(ROT15_SCALE11, src)
        matches = make_matches(src, tgt, [0.5] * 10)
        inliers, _ = ransac_filter(matches, tolerance=3.0, iterations=200, seed=0)
        assert inliers == matches

    def test_deterministic_given_seed(self):
        matches, _ = sixty_forty_fixture()
        a = ransac_filter(matches, tolerance=3.0, iterations=300, seed=42)
        b = ransac_filter(matches, tolerance=3.0, iterations=300, seed=42)
        assert a[0] == b[0] and a[1] == b[1]

    def test_agrees_with_fsc_on_fixture(self):
        matches, _ = sixty_forty_fixture()
        fsc_in, _ = fsc_filter(matches, FscParams(inlier_tolerance=3.0))
        ran_in, _ = ransac_filter(matches, tolerance=3.0, iterations=500, seed=1)
        got_f = np.array([m in fsc_in for m in matches])
        got_r = np.array([m in ran_in for m in matches])
        assert (got_f == got_r).mean() >= 0.95

    def test_failure_on_junk(self):
        rng = np.random.default_rng(9)
        matches = make_matches(
            rng.uniform(0, 500, (8, 2)), rng.uniform(0, 500, (8, 2)), [0.5] * 8
        )
        with pytest.raises(sa.ConsensusFailureError):
            ransac_filter(matches, tolerance=1.0, iterations=100, seed=0)


class TestParams:
    def test_ratio_order(self):
        with pytest.raises(sa.ConfigError):
            FscParams(loose_ratio=0.5, strict_ratio=0.8)

    def test_correspondence_ratio_bounds(self):
        with pytest.raises(sa.ConfigError):
            Correspondence((0, 0), (1, 1), 1.5)
