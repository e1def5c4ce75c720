"""Twin-filter experiments: prior divergence vs posterior stabilization.

Every twin run couples the two filters through one observation realization
(the same-omega comparison); a checksum over the shared observation array
asserts the coupling is never broken. The stabilization threshold (1e-2 on
the terminal posterior gap at T=30, dt=1e-3) and the plateau band for the
bounded-nonlinearity runs are artifact-level operationalizations: the
underlying statements are convergence without a rate and existence of a
bound, respectively.

Signal simulations here use a raised blow-up limit (1e16): the verification
horizon T=30 on the canonical unstable model drives |X| to ~1e13, past the
simulator's loud-failure default of 1e12, while float64 stays accurate far
beyond either.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import WeightCollapseError
from .kalman import (AreSolution, HautusResult, check_detectability,
                     psi_stability_stats, run_kalman_bucy, solve_are)
from .models import (BoundedNonlinearity, GaussianMeasure, ModelSpec, PathRecord,
                     push_forward_path, simulate_observation, simulate_signal)
from .particles import (ParticleCloud, propagate_prior_ensemble,
                        run_particle_filter, systematic_resample)
from .streams import sub_seed, substream
from .tables import write_csv, write_json
from .wasserstein import MAX_EXACT_ASSIGNMENT, w2_empirical, w2_gaussian_series

TWIN_BLOW_UP_LIMIT = 1e16
DEFAULT_STABILIZED_THRESHOLD = 1e-2
DEFAULT_RADII = (1e-2, 1e-1, 1.0, 10.0)
CHECKPOINT_CLOUD_SIZE = 512


def fit_log_slope(times: np.ndarray, series: np.ndarray) -> float:
    """LSQ slope of log(series) over the final half of its positive support.

    Twin filters that bit-converge produce exact zeros late in the series
    (log undefined); the fit window is the second half of the strictly
    positive portion, which reduces to the plain final half whenever the
    series stays positive. Returns -inf when fewer than two points remain.
    """
    series = np.asarray(series, dtype=float)
    mask = np.isfinite(series) & (series > 0.0)
    if mask.sum() < 2:
        return float("-inf")
    t, g = np.asarray(times, dtype=float)[mask], series[mask]
    cutoff = t[0] + 0.5 * (t[-1] - t[0])
    sel = t >= cutoff
    if sel.sum() < 2:
        sel = np.ones_like(t, dtype=bool)
    return float(np.polyfit(t[sel], np.log(g[sel]), 1)[0])


def _occupation_map(gap: np.ndarray, radii) -> dict:
    return {float(R): float(np.mean(gap > R)) for R in radii}


@dataclass(frozen=True, eq=False)
class StabilizationReport:
    """Gap time series plus fitted rates, occupation and hypothesis statistics."""

    times: np.ndarray
    posterior_gap: np.ndarray
    prior_gap: np.ndarray | None
    fitted_posterior_rate: float
    fitted_prior_rate: float
    occupation: dict                     # radius -> fraction of time gap > radius
    hypothesis_stats: dict
    stabilized: bool
    threshold: float

    def to_csv(self, path) -> None:
        """`t,posterior_gap,prior_gap` (prior column NaN when not computed)."""
        prior = self.prior_gap if self.prior_gap is not None else np.full_like(self.posterior_gap, np.nan)
        write_csv(path, ["t", "posterior_gap", "prior_gap"],
                  np.column_stack([self.times, self.posterior_gap, prior]))

    def sidecar(self) -> dict:
        def safe(x):
            return x if (x is None or isinstance(x, bool) or math.isfinite(x)) else None

        return {
            "fitted_posterior_rate": safe(self.fitted_posterior_rate),
            "fitted_prior_rate": safe(self.fitted_prior_rate),
            "stabilized": self.stabilized,
            "threshold": self.threshold,
            "occupation": {format(R, "g"): frac for R, frac in self.occupation.items()},
            "hypothesis_stats": {k: safe(v) for k, v in self.hypothesis_stats.items()},
        }

    def to_json(self, path) -> None:
        write_json(path, self.sidecar())


def _obs_checksum(obs: PathRecord) -> str:
    return hashlib.sha256(np.ascontiguousarray(obs.observations).tobytes()).hexdigest()


def _simulate_twin_observation(model: ModelSpec, prior_true: GaussianMeasure,
                               T: float, dt: float, seed: int,
                               blow_up_limit: float) -> PathRecord:
    x0 = substream(seed, "init").multivariate_normal(
        prior_true.mean.astype(float), prior_true.cov)
    signal = simulate_signal(model, x0, dt, T, seed, blow_up_limit=blow_up_limit)
    return simulate_observation(signal, model, seed)


def _sup_p8(covs: np.ndarray) -> float:
    norms = np.linalg.norm(covs, axis=(1, 2))   # Frobenius
    return float((norms ** 8).max())


def _psi_stats_or_none(q_path: np.ndarray, dt: float, horizon: float):
    if horizon < 2.5:        # need a full unit window after the 20% burn-in
        return None
    try:
        return psi_stability_stats(q_path, dt, delta=1.0, burn_in=0.2)
    except ValueError:
        return None


def _checkpoint_gap(cloud_a: ParticleCloud, cloud_b: ParticleCloud,
                    seed: int, index: int) -> float:
    """Empirical W2 at a checkpoint, reducing oversized clouds first.

    Exact assignment is capped at N=1024; larger clouds are brought to 512
    uniform-weight points by seeded systematic resampling (the same
    mechanism w2_empirical itself uses for non-uniform weights).
    """
    if len(cloud_a) > MAX_EXACT_ASSIGNMENT and cloud_a.d >= 2:
        cloud_a = systematic_resample(cloud_a, substream(seed, "checkpoint", 2 * index),
                                      size=CHECKPOINT_CLOUD_SIZE)
        cloud_b = systematic_resample(cloud_b, substream(seed, "checkpoint", 2 * index + 1),
                                      size=CHECKPOINT_CLOUD_SIZE)
    return w2_empirical(cloud_a, cloud_b, seed=sub_seed(seed, "checkpoint", index))


def _twin_particle(model: ModelSpec, obs: PathRecord, prior_true: GaussianMeasure,
                   prior_wrong: GaussianMeasure, seed: int, n_particles: int,
                   ess_threshold: float, checkpoint_times: np.ndarray,
                   record_q: bool):
    checksum = _obs_checksum(obs)
    run_a = run_particle_filter(obs, prior_true, model, n_particles, ess_threshold,
                                seed=sub_seed(seed, "particles", 0),
                                checkpoint_times=checkpoint_times, record_q_path=record_q)
    if _obs_checksum(obs) != checksum:
        raise AssertionError("coupling broken: observation array changed between filters")
    run_b = run_particle_filter(obs, prior_wrong, model, n_particles, ess_threshold,
                                seed=sub_seed(seed, "particles", 1),
                                checkpoint_times=checkpoint_times, record_q_path=record_q)
    gaps = np.array([
        _checkpoint_gap(run_a.checkpoints[t], run_b.checkpoints[t], seed, i)
        for i, t in enumerate(checkpoint_times)
    ])
    return gaps, run_a, run_b


def run_twin_filter(model: ModelSpec, prior_true: GaussianMeasure,
                    prior_wrong: GaussianMeasure, T: float, dt: float, seed: int,
                    filter_kind: str = "kalman", n_particles: int = 2048,
                    ess_threshold: float = 0.5, checkpoint_every: float = 1.0,
                    threshold: float = DEFAULT_STABILIZED_THRESHOLD,
                    radii=DEFAULT_RADII, compute_prior_gap: bool = True,
                    compute_hypothesis: bool = True,
                    blow_up_limit: float = TWIN_BLOW_UP_LIMIT) -> StabilizationReport:
    """One coupled twin-filter experiment.

    Simulates a single signal from prior_true and one observation path, runs
    the filter from both priors on that same path, and reports the
    Wasserstein gap series. filter_kind="kalman" computes the exact
    posterior (linear-Gaussian models, dense gap series); "particle" uses
    bootstrap filters with empirical W2 at the checkpoint grid.
    """
    if prior_true.d != model.d or prior_wrong.d != model.d:
        raise ValueError("prior dimensions must match the model")
    obs = _simulate_twin_observation(model, prior_true, T, dt, seed, blow_up_limit)
    checksum = _obs_checksum(obs)
    hypothesis: dict = {}

    if filter_kind == "kalman":
        traj_a = run_kalman_bucy(obs, prior_true, model)
        if _obs_checksum(obs) != checksum:
            raise AssertionError("coupling broken: observation array changed between filters")
        traj_b = run_kalman_bucy(obs, prior_wrong, model)
        times = obs.times
        posterior_gap = w2_gaussian_series(traj_a.means, traj_a.covs,
                                           traj_b.means, traj_b.covs)
        if compute_hypothesis:
            hypothesis["sup_P8_true"] = _sup_p8(traj_a.covs)
            hypothesis["sup_P8_wrong"] = _sup_p8(traj_b.covs)
            HTH = model.H.T @ model.H
            q_path = model.F[None, :, :] - traj_a.covs @ HTH
            stats = _psi_stats_or_none(q_path, dt, T)
            if stats is not None:
                hypothesis["psi_decay"] = stats.decay
                hypothesis["psi_inv_fourth"] = stats.inv_fourth
        if compute_prior_gap:
            _, means_pa, covs_pa = push_forward_path(model, prior_true, T, dt)
            _, means_pb, covs_pb = push_forward_path(model, prior_wrong, T, dt)
            prior_gap = w2_gaussian_series(means_pa, covs_pa, means_pb, covs_pb)
        else:
            prior_gap = None
    elif filter_kind == "particle":
        n_checks = int(math.floor(T / checkpoint_every + 1e-9))
        times = np.arange(n_checks + 1) * checkpoint_every
        posterior_gap, run_a, run_b = _twin_particle(
            model, obs, prior_true, prior_wrong, seed, n_particles,
            ess_threshold, times, record_q=compute_hypothesis)
        if compute_hypothesis:
            hypothesis["sup_P8_true"] = _sup_p8(run_a.covs)
            hypothesis["sup_P8_wrong"] = _sup_p8(run_b.covs)
            stats = _psi_stats_or_none(run_a.q_path, dt, T)
            if stats is not None:
                hypothesis["psi_decay"] = stats.decay
                hypothesis["psi_inv_fourth"] = stats.inv_fourth
        if compute_prior_gap:
            if model.is_gaussian_preserving:
                _, means_pa, covs_pa = push_forward_path(model, prior_true, T, dt)
                _, means_pb, covs_pb = push_forward_path(model, prior_wrong, T, dt)
                idx = np.rint(times / dt).astype(int)
                prior_gap = w2_gaussian_series(means_pa[idx], covs_pa[idx],
                                               means_pb[idx], covs_pb[idx])
            else:
                ens_a = propagate_prior_ensemble(model, prior_true, T, dt, n_particles,
                                                 sub_seed(seed, "prior", 0), times)
                ens_b = propagate_prior_ensemble(model, prior_wrong, T, dt, n_particles,
                                                 sub_seed(seed, "prior", 1), times)
                prior_gap = np.array([
                    _checkpoint_gap(ens_a[t], ens_b[t], sub_seed(seed, "prior", 2), i)
                    for i, t in enumerate(times)])
        else:
            prior_gap = None
    else:
        raise ValueError(f"unknown filter kind {filter_kind!r} (use 'kalman' or 'particle')")

    return StabilizationReport(
        times=times,
        posterior_gap=posterior_gap,
        prior_gap=prior_gap,
        fitted_posterior_rate=fit_log_slope(times, posterior_gap),
        fitted_prior_rate=(fit_log_slope(times, prior_gap)
                           if prior_gap is not None else float("nan")),
        occupation=_occupation_map(posterior_gap, radii),
        hypothesis_stats=hypothesis,
        stabilized=bool(posterior_gap[-1] < threshold),
        threshold=threshold,
    )


def occupation_time(report: StabilizationReport, R: float) -> float:
    """Fraction of grid points with posterior gap above radius R."""
    return float(np.mean(report.posterior_gap > R))


OBS_MODES = ("unstable_only", "stable_only", "sum")


def appendix_d_model(lambda1: float, lambda2: float, h_gain: float,
                     obs_mode: str) -> ModelSpec:
    """The 2-D study model: F = diag(l1, l2), sigma = I, one scalar observation."""
    if not (lambda1 < 0 < lambda2):
        raise ValueError("requires lambda1 < 0 < lambda2")
    if obs_mode == "unstable_only":
        H = [[0.0, h_gain]]
    elif obs_mode == "stable_only":
        H = [[h_gain, 0.0]]
    elif obs_mode == "sum":
        H = [[h_gain, h_gain]]
    else:
        raise ValueError(f"unknown obs_mode {obs_mode!r}; supported: {OBS_MODES}")
    return ModelSpec(F=np.diag([lambda1, lambda2]), H=H, sigma=np.eye(2))


@dataclass(frozen=True, eq=False)
class AppendixDResult:
    model: ModelSpec
    detectability: HautusResult
    are: AreSolution | None
    report: StabilizationReport

    @property
    def stabilized(self) -> bool:
        return self.report.stabilized


def run_appendix_d(lambda1: float = -1.0, lambda2: float = 1.0, h_gain: float = 1.0,
                   obs_mode: str = "unstable_only", T: float = 30.0, dt: float = 1e-3,
                   seed: int = 0, prior_true: GaussianMeasure | None = None,
                   prior_wrong: GaussianMeasure | None = None,
                   threshold: float = DEFAULT_STABILIZED_THRESHOLD) -> AppendixDResult:
    """Observation-scheme study on the 2-D unstable model.

    Runs the detectability check, the ARE (when detectable), and the twin
    Kalman-Bucy experiment; stabilization means a terminal posterior gap
    below the threshold.
    """
    model = appendix_d_model(lambda1, lambda2, h_gain, obs_mode)
    if prior_true is None:
        prior_true = GaussianMeasure(np.zeros(2), np.eye(2))
    if prior_wrong is None:
        prior_wrong = GaussianMeasure(np.array([5.0, 5.0]), 4.0 * np.eye(2))
    det = check_detectability(model.F, model.H)
    are = solve_are(model) if det else None
    report = run_twin_filter(model, prior_true, prior_wrong, T, dt, seed,
                             filter_kind="kalman", threshold=threshold)
    return AppendixDResult(model=model, detectability=det, are=are, report=report)


@dataclass(frozen=True, eq=False)
class PriorDivergenceResult:
    times: np.ndarray
    gap: np.ndarray
    fitted_rate: float

    def to_csv(self, path) -> None:
        write_csv(path, ["t", "prior_gap"], np.column_stack([self.times, self.gap]))


def run_prior_divergence(model: ModelSpec, mu_a: GaussianMeasure,
                         mu_b: GaussianMeasure, T: float, dt: float) -> PriorDivergenceResult:
    """W2 between the moment push-forwards of two priors, with a fitted tail rate."""
    _, means_a, covs_a = push_forward_path(model, mu_a, T, dt)
    times, means_b, covs_b = push_forward_path(model, mu_b, T, dt)
    gap = w2_gaussian_series(means_a, covs_a, means_b, covs_b)
    return PriorDivergenceResult(times=times, gap=gap,
                                 fitted_rate=fit_log_slope(times, gap))


@dataclass(frozen=True, eq=False)
class NonlinearEnsembleReport:
    """Replica-averaged posterior gap for bounded-nonlinearity twin runs."""

    times: np.ndarray
    mean_gap: np.ndarray
    stderr_gap: np.ndarray
    per_replica_gap: np.ndarray      # (replicas_kept, checkpoints)
    plateau_stat: float              # sup mean over [T/2, T] / sup over [T/4, T/2]
    n_replicas: int
    n_dropped: int
    hypothesis_stats: dict

    def to_csv(self, path) -> None:
        write_csv(path, ["t", "mean_posterior_gap", "stderr_posterior_gap"],
                  np.column_stack([self.times, self.mean_gap, self.stderr_gap]))

    def to_json(self, path) -> None:
        def safe(x):
            return x if (x is None or math.isfinite(x)) else None

        write_json(path, {
            "plateau_stat": safe(self.plateau_stat),
            "n_replicas": self.n_replicas,
            "n_dropped": self.n_dropped,
            "hypothesis_stats": {k: safe(v) for k, v in self.hypothesis_stats.items()},
        })


def run_nonlinear_boundedness(model: ModelSpec, prior_true: GaussianMeasure,
                              prior_wrong: GaussianMeasure, T: float, dt: float,
                              n_replicas: int, base_seed: int, n_particles: int,
                              ess_threshold: float = 0.5, checkpoint_every: float = 1.0,
                              compute_hypothesis: bool = True,
                              blow_up_limit: float = TWIN_BLOW_UP_LIMIT) -> NonlinearEnsembleReport:
    """Replica ensemble of twin particle filters on a bounded-nonlinearity model.

    Each replica draws a fresh signal/observation realization from a derived
    sub-seed and runs the coupled pair; the report aggregates the checkpoint
    gap across replicas. Replicas whose weights collapse are dropped and
    counted. The plateau statistic operationalizes "the gap stops growing".
    """
    det = check_detectability(model.F, model.H)
    if not det:
        raise ValueError(f"linear part not detectable (eigenvalue {det.witness}); "
                         "the bounded-nonlinearity experiment assumes the theorem's regime")
    n_checks = int(math.floor(T / checkpoint_every + 1e-9))
    times = np.arange(n_checks + 1) * checkpoint_every
    gaps, p8_true, p8_wrong, psi_decays, psi_inv = [], [], [], [], []
    dropped = 0
    for r in range(n_replicas):
        seed_r = sub_seed(base_seed, "replica", r)
        try:
            obs = _simulate_twin_observation(model, prior_true, T, dt, seed_r, blow_up_limit)
            gap_r, run_a, run_b = _twin_particle(
                model, obs, prior_true, prior_wrong, seed_r, n_particles,
                ess_threshold, times, record_q=compute_hypothesis)
        except WeightCollapseError:
            dropped += 1
            continue
        gaps.append(gap_r)
        if compute_hypothesis:
            norms_a = np.linalg.norm(run_a.covs, axis=(1, 2)) ** 8
            norms_b = np.linalg.norm(run_b.covs, axis=(1, 2)) ** 8
            p8_true.append(norms_a)
            p8_wrong.append(norms_b)
            stats = _psi_stats_or_none(run_a.q_path, dt, T)
            if stats is not None:
                psi_decays.append(stats.decay)
                psi_inv.append(stats.inv_fourth)
    if not gaps:
        raise WeightCollapseError()

    per_replica = np.asarray(gaps)
    mean_gap = per_replica.mean(axis=0)
    stderr = (per_replica.std(axis=0, ddof=1) / np.sqrt(len(gaps))
              if len(gaps) > 1 else np.zeros_like(mean_gap))
    late = mean_gap[times >= T / 2].max()
    middle = mean_gap[(times >= T / 4) & (times <= T / 2)].max()
    plateau = float(late / middle) if middle > 0 else float("inf")

    hypothesis: dict = {}
    if compute_hypothesis and p8_true:
        # sup over t of the replica-mean of |P_t|^8
        hypothesis["sup_mean_P8_true"] = float(np.mean(p8_true, axis=0).max())
        hypothesis["sup_mean_P8_wrong"] = float(np.mean(p8_wrong, axis=0).max())
        if psi_decays:
            hypothesis["psi_decay_mean"] = float(np.mean(psi_decays))
            hypothesis["psi_inv_fourth_max"] = float(np.max(psi_inv))

    return NonlinearEnsembleReport(
        times=times, mean_gap=mean_gap, stderr_gap=stderr,
        per_replica_gap=per_replica, plateau_stat=plateau,
        n_replicas=len(gaps), n_dropped=dropped, hypothesis_stats=hypothesis)
