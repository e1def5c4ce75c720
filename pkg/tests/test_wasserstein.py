import itertools
import math

import numpy as np
import pytest

from fastab.models import GaussianMeasure
from fastab.particles import ParticleCloud
from fastab.wasserstein import (MomentBoundReport, moment_bound_check,
                                second_moment, w2_empirical, w2_gaussian,
                                w2_gaussian_series)


def gauss(mean, cov):
    return GaussianMeasure(np.atleast_1d(mean), np.atleast_2d(cov))


def random_gaussian(rng, d):
    mean = rng.uniform(-10.0, 10.0, size=d)
    spectrum = rng.uniform(0.1, 10.0, size=d)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    cov = (q * spectrum) @ q.T
    return GaussianMeasure(mean, 0.5 * (cov + cov.T))


def uniform_cloud(x):
    x = np.atleast_2d(np.asarray(x, dtype=float).T).T
    return ParticleCloud(x, np.full(x.shape[0], 1.0 / x.shape[0]))


# ---------------------------------------------------------------- closed form

class TestW2Gaussian:
    def test_identity_of_indiscernibles(self):
        g = gauss([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]])
        assert w2_gaussian(g, g) == pytest.approx(0.0, abs=1e-7)

    def test_pure_mean_shift(self):
        assert w2_gaussian(gauss(0.0, 1.0), gauss(3.0, 1.0)) == pytest.approx(3.0)

    def test_pure_scale_change(self):
        # 1-D quantile coupling gives |sqrt(1) - sqrt(4)| = 1
        assert w2_gaussian(gauss(0.0, 1.0), gauss(0.0, 4.0)) == pytest.approx(1.0)
        # cross-check against the empirical sorted coupling on large samples
        rng = np.random.default_rng(0)
        a = uniform_cloud(rng.normal(0.0, 1.0, size=100_000))
        b = uniform_cloud(rng.normal(0.0, 2.0, size=100_000))
        assert w2_empirical(a, b) == pytest.approx(1.0, abs=0.03)

    def test_metric_axioms_on_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            d = rng.integers(1, 6)
            a, b, c = (random_gaussian(rng, d) for _ in range(3))
            dab, dba = w2_gaussian(a, b), w2_gaussian(b, a)
            assert abs(dab - dba) <= 1e-12 * max(1.0, dab)
            assert w2_gaussian(a, a) == pytest.approx(0.0, abs=1e-6)
            assert dab + w2_gaussian(b, c) >= w2_gaussian(a, c) - 1e-9

    def test_translation_invariance_exact_for_dyadic_shifts(self):
        a = gauss([0.25, -0.5], [[1.0, 0.25], [0.25, 2.0]])
        b = gauss([1.5, 0.75], [[0.5, 0.0], [0.0, 1.25]])
        v = np.array([3.0, -2.0])
        a2 = gauss(a.mean + v, a.cov)
        b2 = gauss(b.mean + v, b.cov)
        assert w2_gaussian(a2, b2) == w2_gaussian(a, b)

    def test_single_mean_shift_identity_equal_covs(self):
        # equal covariances: W2^2 changes by |v|^2 + 2 v . (m_a - m_b)
        rng = np.random.default_rng(2)
        cov = np.array([[1.5, 0.4], [0.4, 0.9]])
        ma, mb = rng.normal(size=2), rng.normal(size=2)
        v = rng.normal(size=2)
        base = w2_gaussian(gauss(ma, cov), gauss(mb, cov)) ** 2
        shifted = w2_gaussian(gauss(ma + v, cov), gauss(mb, cov)) ** 2
        assert shifted - base == pytest.approx(v @ v + 2.0 * v @ (ma - mb), abs=1e-9)

    def test_diagonal_reduction(self):
        # commuting (diagonal) covariances: sqrt(|dm|^2 + sum (sqrt(sa)-sqrt(sb))^2)
        rng = np.random.default_rng(3)
        for _ in range(50):
            d = rng.integers(1, 5)
            sa, sb = rng.uniform(0.1, 5.0, size=(2, d))
            ma, mb = rng.normal(size=(2, d))
            expected = math.sqrt(np.sum((ma - mb) ** 2)
                                 + np.sum((np.sqrt(sa) - np.sqrt(sb)) ** 2))
            got = w2_gaussian(gauss(ma, np.diag(sa)), gauss(mb, np.diag(sb)))
            assert got == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_longdouble_means_preserved(self):
        # mean gaps below float64 resolution at the mean magnitude survive;
        # the shift is dyadic so big + tiny is exactly representable
        big = np.longdouble(2.0) ** 43            # ~8.8e12
        tiny = np.longdouble(2.0) ** -18          # ~3.8e-6, far below ulp64(big)
        a = GaussianMeasure(np.array([big], dtype=np.longdouble), [[1.0]])
        b = GaussianMeasure(np.array([big + tiny], dtype=np.longdouble), [[1.0]])
        assert w2_gaussian(a, b) == float(tiny)
        # the same pair cast to float64 would lose the gap entirely
        assert float(big) == float(big + tiny)

    def test_series_matches_scalar(self):
        rng = np.random.default_rng(4)
        pairs = [(random_gaussian(rng, 3), random_gaussian(rng, 3)) for _ in range(40)]
        means_a = np.array([p[0].mean for p in pairs])
        covs_a = np.array([p[0].cov for p in pairs])
        means_b = np.array([p[1].mean for p in pairs])
        covs_b = np.array([p[1].cov for p in pairs])
        series = w2_gaussian_series(means_a, covs_a, means_b, covs_b)
        scalar = np.array([w2_gaussian(a, b) for a, b in pairs])
        np.testing.assert_allclose(series, scalar, rtol=1e-10, atol=1e-10)

    def test_non_psd_rejected(self):
        a = gauss([0.0], [[1.0]])
        bad = object.__new__(GaussianMeasure)
        object.__setattr__(bad, "mean", np.zeros(1))
        object.__setattr__(bad, "cov", np.array([[-1.0]]))
        with pytest.raises(ValueError, match="PSD"):
            w2_gaussian(a, bad)


# ---------------------------------------------------------------- empirical

class TestW2Empirical:
    def test_identical_clouds(self):
        c = uniform_cloud(np.random.default_rng(0).normal(size=(32, 2)))
        assert w2_empirical(c, c) == 0.0

    def test_two_point_hand_example(self):
        # clouds {0,1} vs {1,2}: pairings give 1 and sqrt(2); optimum is 1
        a = uniform_cloud([0.0, 1.0])
        b = uniform_cloud([1.0, 2.0])
        costs = []
        for perm in itertools.permutations(range(2)):
            diffs = np.array([0.0, 1.0]) - np.array([1.0, 2.0])[list(perm)]
            costs.append(math.sqrt(np.mean(diffs ** 2)))
        assert min(costs) == 1.0
        assert w2_empirical(a, b) == 1.0

    def test_sorted_equals_assignment_on_1d(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(2, 65))
            a = uniform_cloud(rng.normal(size=n))
            b = uniform_cloud(rng.normal(size=n))
            assert (w2_empirical(a, b, method="sort")
                    == w2_empirical(a, b, method="assignment"))

    def test_gaussian_samples_near_closed_form(self):
        rng = np.random.default_rng(6)
        a = uniform_cloud(rng.normal(0.0, 1.0, size=512))
        b = uniform_cloud(rng.normal(3.0, 1.0, size=512))
        assert 2.7 <= w2_empirical(a, b) <= 3.3

    def test_convergence_to_closed_form(self):
        # growing samples approach the Gaussian value; relative error < 10%
        # at N = 1024 for d <= 3 (median over seeds, monotone trend)
        rng = np.random.default_rng(7)
        for d in (1, 2, 3):
            a = gauss(np.zeros(d), np.eye(d))
            b = gauss(np.full(d, 1.0), 2.0 * np.eye(d))
            target = w2_gaussian(a, b)
            med = {}
            for n in (64, 256, 1024):
                errs = []
                for _ in range(15):
                    xa = rng.multivariate_normal(a.mean.astype(float), a.cov, size=n)
                    xb = rng.multivariate_normal(b.mean.astype(float), b.cov, size=n)
                    emp = w2_empirical(uniform_cloud(xa), uniform_cloud(xb))
                    errs.append(abs(emp - target) / target)
                med[n] = float(np.median(errs))
            assert med[1024] < 0.10
            assert med[1024] <= med[64]

    def test_non_uniform_weights_resampled(self):
        rng = np.random.default_rng(8)
        pos = rng.normal(size=(64, 1))
        weighted = ParticleCloud(pos, rng.random(64))
        out = w2_empirical(weighted, uniform_cloud(pos), seed=3)
        assert np.isfinite(out) and out >= 0.0

    def test_size_and_dimension_guards(self):
        a = uniform_cloud(np.zeros((4, 2)))
        b = uniform_cloud(np.zeros((5, 2)))
        with pytest.raises(ValueError, match="unequal"):
            w2_empirical(a, b)
        big = uniform_cloud(np.zeros((1025, 2)))
        with pytest.raises(ValueError, match="too large"):
            w2_empirical(big, big)


# ---------------------------------------------------------------- moments

class TestSecondMoment:
    def test_standard_normal(self):
        for d in (1, 3, 5):
            assert second_moment(gauss(np.zeros(d), np.eye(d))) == pytest.approx(d)

    def test_scalar_with_mean(self):
        assert second_moment(gauss(3.0, 4.0)) == pytest.approx(13.0)

    def test_point_mass(self):
        assert second_moment(gauss([3.0, 4.0], np.zeros((2, 2)))) == pytest.approx(25.0)


class TestMomentBounds:
    def test_equal_standard_normals_margin(self):
        # bound (i) reads 0 <= 4, margin 4
        report = moment_bound_check(gauss(0.0, 1.0), gauss(0.0, 1.0))
        assert isinstance(report, MomentBoundReport)
        assert report.constant == 2.0
        assert report.bound_sq_lhs == pytest.approx(0.0, abs=1e-12)
        assert report.bound_sq_rhs == pytest.approx(4.0)
        assert report.bound_sq_margin == pytest.approx(4.0, abs=1e-9)
        assert report.holds

    def test_mean_shift_example(self):
        # W2^2 = 9 <= 2 (1 + 10) = 22
        report = moment_bound_check(gauss(0.0, 1.0), gauss(3.0, 1.0))
        assert report.bound_sq_lhs == pytest.approx(9.0)
        assert report.bound_sq_rhs == pytest.approx(22.0)
        assert report.holds

    def test_random_pair_sweep(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            d = rng.integers(1, 6)
            report = moment_bound_check(random_gaussian(rng, d), random_gaussian(rng, d))
            assert report.holds
