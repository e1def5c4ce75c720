import json
import math

import numpy as np
import pytest

from fastab.experiments import (appendix_d_model, fit_log_slope, occupation_time,
                                run_appendix_d, run_nonlinear_boundedness,
                                run_prior_divergence, run_twin_filter)
from fastab.models import BoundedNonlinearity, GaussianMeasure, ModelSpec

SQRT2 = math.sqrt(2.0)


def priors_2d(gap=True):
    true = GaussianMeasure([0.0, 0.0], np.eye(2))
    wrong = (GaussianMeasure([5.0, 5.0], 4.0 * np.eye(2)) if gap
             else GaussianMeasure([0.0, 0.0], np.eye(2)))
    return true, wrong


class TestFitLogSlope:
    def test_clean_exponential(self):
        t = np.linspace(0.0, 10.0, 101)
        assert fit_log_slope(t, 5.0 * np.exp(-1.3 * t)) == pytest.approx(-1.3, abs=1e-9)

    def test_uses_final_half(self):
        t = np.linspace(0.0, 10.0, 101)
        series = np.where(t < 5.0, np.exp(-5.0 * t) + 1.0, np.exp(5.0 - t))
        assert fit_log_slope(t, series) == pytest.approx(-1.0, abs=1e-6)

    def test_zero_tail_uses_positive_support(self):
        # bit-converged twins end in exact zeros; fit covers the positive part
        t = np.linspace(0.0, 10.0, 101)
        series = np.exp(-2.0 * t)
        series[t > 6.0] = 0.0
        assert fit_log_slope(t, series) == pytest.approx(-2.0, abs=1e-9)

    def test_all_zero_gives_minus_inf(self):
        assert fit_log_slope(np.arange(5.0), np.zeros(5)) == float("-inf")


class TestTwinKalman:
    def test_equal_priors_zero_gap(self):
        true, wrong = priors_2d(gap=False)
        report = run_twin_filter(appendix_d_model(-1.0, 1.0, 1.0, "unstable_only"),
                                 true, wrong, T=2.0, dt=1e-3, seed=0)
        assert np.all(report.posterior_gap < 1e-10)
        assert report.stabilized

    def test_unstable_observation_stabilizes(self):
        true, wrong = priors_2d()
        model = appendix_d_model(-1.0, 1.0, 1.0, "unstable_only")
        report = run_twin_filter(model, true, wrong, T=30.0, dt=1e-3, seed=0)
        assert report.posterior_gap[-1] < 1e-3
        assert report.stabilized
        assert report.fitted_posterior_rate <= -0.8
        assert report.prior_gap[-1] > 1e3
        assert abs(report.fitted_prior_rate - 1.0) < 0.01
        # gap series invariants
        assert np.all(report.posterior_gap >= 0.0)
        radii = sorted(report.occupation)
        fracs = [report.occupation[r] for r in radii]
        assert all(0.0 <= f <= 1.0 for f in fracs)
        assert all(a >= b for a, b in zip(fracs, fracs[1:]))
        # hypothesis stats: deterministic covariances stay bounded, psi decays
        assert report.hypothesis_stats["sup_P8_true"] < np.inf
        assert report.hypothesis_stats["psi_decay"] == pytest.approx(2.0, abs=1e-3)

    def test_covariance_forgetting(self):
        # different prior covariances merge: terminal cov part of the gap ~ 0
        true = GaussianMeasure([0.0, 0.0], np.eye(2))
        wrong = GaussianMeasure([0.0, 0.0], 9.0 * np.eye(2))
        model = appendix_d_model(-1.0, 1.0, 1.0, "unstable_only")
        report = run_twin_filter(model, true, wrong, T=20.0, dt=1e-3, seed=1)
        assert report.posterior_gap[-1] < 1e-6

    def test_report_serialization(self, tmp_path):
        true, wrong = priors_2d()
        model = appendix_d_model(-1.0, 1.0, 1.0, "unstable_only")
        report = run_twin_filter(model, true, wrong, T=3.0, dt=1e-2, seed=2)
        report.to_csv(tmp_path / "report.csv")
        report.to_json(tmp_path / "report.json")
        from fastab.tables import read_csv

        header, data = read_csv(tmp_path / "report.csv")
        assert header == ["t", "posterior_gap", "prior_gap"]
        assert data.shape[0] == len(report.times)
        sidecar = json.loads((tmp_path / "report.json").read_text())
        assert set(sidecar) == {"fitted_posterior_rate", "fitted_prior_rate",
                                "stabilized", "threshold", "occupation",
                                "hypothesis_stats"}

    def test_unknown_filter_kind(self):
        true, wrong = priors_2d()
        with pytest.raises(ValueError, match="filter"):
            run_twin_filter(appendix_d_model(-1.0, 1.0, 1.0, "unstable_only"),
                            true, wrong, T=1.0, dt=1e-2, seed=0,
                            filter_kind="ensemble")


class TestTwinParticle:
    def test_linear_model_gap_shrinks(self):
        true, wrong = priors_2d()
        model = appendix_d_model(-1.0, 1.0, 1.0, "unstable_only")
        report = run_twin_filter(model, true, wrong, T=10.0, dt=0.01, seed=3,
                                 filter_kind="particle", n_particles=512)
        assert report.times[-1] == pytest.approx(10.0)
        assert report.posterior_gap[0] > 10 * report.posterior_gap[-1]
        assert report.prior_gap is not None
        assert report.prior_gap[-1] > report.prior_gap[0]

    def test_nonlinear_prior_gap_uses_ensembles(self):
        model = ModelSpec(F=np.diag([-1.0, 1.0]), H=[[0.0, 1.0]], sigma=np.eye(2),
                          nonlinear_drift=BoundedNonlinearity.tanh(0.5))
        true, wrong = priors_2d()
        report = run_twin_filter(model, true, wrong, T=4.0, dt=0.01, seed=4,
                                 filter_kind="particle", n_particles=256)
        assert report.prior_gap is not None
        assert np.all(report.prior_gap >= 0.0)
        assert len(report.prior_gap) == len(report.times)


class TestAppendixD:
    def test_observing_unstable_component(self):
        result = run_appendix_d(obs_mode="unstable_only", seed=0)
        assert result.detectability.passed
        np.testing.assert_allclose(result.are.P_inf, np.diag([0.5, 1.0 + SQRT2]),
                                   atol=1e-8)
        assert result.stabilized

    def test_observing_stable_component_fails(self):
        result = run_appendix_d(obs_mode="stable_only", seed=0, T=10.0)
        assert not result.detectability.passed
        assert result.detectability.witness == pytest.approx(1.0)
        assert result.are is None
        assert not result.stabilized
        assert result.report.posterior_gap[-1] > 1.0

    def test_observing_sum_stabilizes(self):
        result = run_appendix_d(obs_mode="sum", seed=0)
        assert result.detectability.passed
        assert result.stabilized

    def test_monotone_in_information(self):
        # whenever stable_only fails, both unstable_only and sum stabilize
        for lam1, lam2, h in ((-1.0, 1.0, 1.0), (-0.5, 0.5, 2.0), (-2.0, 0.3, 1.0)):
            outcome = {mode: run_appendix_d(lam1, lam2, h, mode, T=20.0, dt=1e-3,
                                            seed=1).stabilized
                       for mode in ("unstable_only", "stable_only", "sum")}
            assert not outcome["stable_only"]
            assert outcome["unstable_only"]
            assert outcome["sum"]

    def test_invalid_spectrum_rejected(self):
        with pytest.raises(ValueError, match="lambda"):
            appendix_d_model(1.0, 2.0, 1.0, "unstable_only")


class TestPriorDivergence:
    def test_equal_priors_identically_zero(self):
        model = appendix_d_model(-1.0, 1.0, 1.0, "unstable_only")
        mu = GaussianMeasure([1.0, 2.0], np.eye(2))
        result = run_prior_divergence(model, mu, mu, T=5.0, dt=1e-2)
        assert np.all(result.gap < 1e-7)

    def test_unstable_direction_grows_like_exp(self):
        # delta priors, sigma = 0: gap is exactly e^{t} (covariances cancel)
        model = ModelSpec(F=np.diag([-1.0, 1.0]), H=[[0.0, 1.0]],
                          sigma=np.zeros((2, 2)))
        mu_a = GaussianMeasure([0.0, 0.0], np.zeros((2, 2)))
        mu_b = GaussianMeasure([0.0, 1.0], np.zeros((2, 2)))
        result = run_prior_divergence(model, mu_a, mu_b, T=30.0, dt=1e-3)
        np.testing.assert_allclose(result.gap, np.exp(result.times), rtol=1e-9)
        assert result.fitted_rate == pytest.approx(1.0, abs=1e-6)

    def test_stable_direction_decays(self):
        model = ModelSpec(F=np.diag([-1.0, 1.0]), H=[[0.0, 1.0]],
                          sigma=np.zeros((2, 2)))
        mu_a = GaussianMeasure([0.0, 0.0], np.zeros((2, 2)))
        mu_b = GaussianMeasure([1.0, 0.0], np.zeros((2, 2)))
        result = run_prior_divergence(model, mu_a, mu_b, T=30.0, dt=1e-3)
        np.testing.assert_allclose(result.gap, np.exp(-result.times), rtol=1e-9)
        assert result.fitted_rate == pytest.approx(-1.0, abs=1e-6)

    def test_noisy_variant_matches_analytic_rate(self):
        model = ModelSpec(F=np.diag([-1.0, 1.0]), H=[[0.0, 1.0]], sigma=np.eye(2))
        mu_a = GaussianMeasure([0.0, 0.0], np.eye(2))
        mu_b = GaussianMeasure([0.0, 1.0], np.eye(2))
        result = run_prior_divergence(model, mu_a, mu_b, T=8.0, dt=1e-3)
        assert result.fitted_rate == pytest.approx(1.0, abs=0.02)


class TestOccupation:
    def test_radius_zero_with_positive_gaps(self):
        model = appendix_d_model(-1.0, 1.0, 1.0, "unstable_only")
        true, wrong = priors_2d()
        report = run_twin_filter(model, true, wrong, T=5.0, dt=1e-2, seed=5)
        assert np.all(report.posterior_gap > 0.0)
        assert occupation_time(report, 0.0) == 1.0
        assert occupation_time(report, report.posterior_gap.max() + 1.0) == 0.0

    def test_matches_fitted_exponential_crossing(self):
        # fraction above R ~ t0 / T where the fitted exponential crosses R
        model = appendix_d_model(-1.0, 1.0, 1.0, "unstable_only")
        true, wrong = priors_2d()
        T = 20.0
        report = run_twin_filter(model, true, wrong, T=T, dt=1e-2, seed=6)
        R = 0.1
        direct = occupation_time(report, R)
        gap0 = report.posterior_gap[0]
        rate = fit_log_slope(report.times, report.posterior_gap)
        t0 = math.log(R / gap0) / rate
        assert direct == pytest.approx(t0 / T, abs=0.05)


class TestNonlinearBoundedness:
    def test_linear_limit_decays_to_noise_floor(self):
        # eps = 0 degenerates to the linear regime: the ensemble gap collapses
        # toward the equal-prior Monte-Carlo floor
        model = appendix_d_model(-1.0, 1.0, 1.0, "unstable_only")
        true, wrong = priors_2d()
        report = run_nonlinear_boundedness(model, true, wrong, T=10.0, dt=0.01,
                                           n_replicas=6, base_seed=100,
                                           n_particles=256)
        floor = run_nonlinear_boundedness(model, true, true, T=10.0, dt=0.01,
                                          n_replicas=6, base_seed=100,
                                          n_particles=256)
        assert report.n_dropped == 0
        # the terminal gap is pinned to the Monte-Carlo floor (~0.53 at
        # N=256), which also caps the achievable decay from gap(0) ~ 7.2
        assert report.mean_gap[0] > 10 * report.mean_gap[-1]
        assert report.mean_gap[-1] < 1.5 * floor.mean_gap[-1]

    def test_bounded_perturbation_plateaus(self):
        model = ModelSpec(F=np.diag([-1.0, 1.0]), H=[[0.0, 1.0]], sigma=np.eye(2),
                          nonlinear_drift=BoundedNonlinearity.tanh(0.5))
        true, wrong = priors_2d()
        report = run_nonlinear_boundedness(model, true, wrong, T=12.0, dt=0.01,
                                           n_replicas=8, base_seed=7,
                                           n_particles=512)
        assert report.n_replicas == 8
        assert report.plateau_stat < 1.5
        assert report.hypothesis_stats["sup_mean_P8_true"] < np.inf
        assert "psi_decay_mean" in report.hypothesis_stats
        assert report.per_replica_gap.shape == (8, len(report.times))

    def test_undetectable_linear_part_rejected(self):
        model = appendix_d_model(-1.0, 1.0, 1.0, "stable_only")
        true, wrong = priors_2d()
        with pytest.raises(ValueError, match="detectable"):
            run_nonlinear_boundedness(model, true, wrong, T=2.0, dt=0.01,
                                      n_replicas=2, base_seed=0, n_particles=64)

    def test_serialization(self, tmp_path):
        model = appendix_d_model(-1.0, 1.0, 1.0, "unstable_only")
        true, wrong = priors_2d()
        report = run_nonlinear_boundedness(model, true, wrong, T=4.0, dt=0.02,
                                           n_replicas=3, base_seed=1,
                                           n_particles=128)
        report.to_csv(tmp_path / "ens.csv")
        report.to_json(tmp_path / "ens.json")
        payload = json.loads((tmp_path / "ens.json").read_text())
        assert payload["n_replicas"] == 3
        assert payload["n_dropped"] == 0


class TestCouplingDiscipline:
    def test_observation_arrays_read_only(self):
        # the shared observation array cannot be mutated by a filter
        from fastab.models import simulate_observation, simulate_signal

        model = appendix_d_model(-1.0, 1.0, 1.0, "unstable_only")
        sig = simulate_signal(model, [0.0, 0.0], 0.01, 1.0, seed=0)
        obs = simulate_observation(sig, model, seed=0)
        with pytest.raises(ValueError):
            obs.observations[3, 0] = 99.0
