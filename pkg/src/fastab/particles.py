"""Bootstrap particle approximation of the conditional law.

Particles propagate with Euler-Maruyama steps of the signal SDE; weights
multiply by the discretized likelihood exponent

    h(X_k)^T dY - 0.5 |h(X_k)|^2 dt

evaluated at the pre-propagation state. The exponent is accumulated in the
innovation-centered form (h - hbar)^T (dY - hbar dt) - 0.5 |h - hbar|^2 dt,
which differs by a particle-independent shift (so normalized weights are
unchanged) but survives unstable signals where |h(x)| ~ 1e10 makes the
literal exponent ~1e18 and particle-to-particle differences fall below its
float64 resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import WeightCollapseError
from .models import GaussianMeasure, ModelSpec, PathRecord, _frozen_array
from .streams import substream


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """Weighted point set; weights are normalized on construction."""

    positions: np.ndarray   # (N, d)
    weights: np.ndarray     # (N,)

    def __post_init__(self):
        pos = np.atleast_2d(np.array(self.positions, dtype=float))
        w = np.atleast_1d(np.array(self.weights, dtype=float))
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ValueError("positions must be a nonempty (N, d) array")
        if w.shape != (pos.shape[0],):
            raise ValueError("weights must be an (N,) vector")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        if np.any(w < 0.0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0.0:
            raise WeightCollapseError()
        if abs(total - 1.0) > 1e-12:    # keep already-normalized weights bit-exact
            w = w / total
        pos.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def to_csv(self, path) -> None:
        """Checkpoint dump: `x1..xd,w` rows."""
        from .tables import write_csv

        header = [f"x{i+1}" for i in range(self.d)] + ["w"]
        write_csv(path, header, np.hstack([self.positions, self.weights[:, None]]))


def ess(cloud: ParticleCloud) -> float:
    """Effective sample size 1 / sum(w^2), in [1, N]."""
    return float(1.0 / np.sum(cloud.weights ** 2))


def cloud_moments(cloud: ParticleCloud) -> GaussianMeasure:
    """Weighted mean and covariance (no small-sample correction)."""
    w = cloud.weights
    mean = w @ cloud.positions
    dev = cloud.positions - mean
    cov = (dev * w[:, None]).T @ dev
    cov = 0.5 * (cov + cov.T)
    return GaussianMeasure(mean=mean, cov=cov)


def systematic_resample(cloud: ParticleCloud, rng: np.random.Generator,
                        size: int | None = None) -> ParticleCloud:
    """Single-uniform stratified selection; output weights uniform.

    Offspring i picks the first particle whose cumulative weight strictly
    exceeds (i + u)/size, so expected offspring counts are exactly
    size * w and equal input weights reproduce the cloud unchanged.
    """
    N = len(cloud)
    M = N if size is None else int(size)
    u = rng.random()
    cum = np.cumsum(cloud.weights)
    cum[-1] = 1.0
    idx = np.searchsorted(cum, (u + np.arange(M)) / M, side="right")
    idx = np.clip(idx, 0, N - 1)
    return ParticleCloud(positions=cloud.positions[idx], weights=np.full(M, 1.0 / M))


def pf_step(cloud: ParticleCloud, dY, dt: float, model: ModelSpec,
            rng: np.random.Generator) -> ParticleCloud:
    """One propagate-and-weight step of the bootstrap filter.

    Weight exponents use the pre-propagation states (Ito-consistent left
    endpoint); see the module docstring for the centered accumulation. The
    exponent is max-shifted before exponentiation and applied
    multiplicatively, which preserves already-normalized weights exactly
    when the observation map is constant across particles.
    Raises WeightCollapseError when every weight underflows.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    dY = np.atleast_1d(np.asarray(dY, dtype=float))
    if dY.shape != (model.n,):
        raise ValueError(f"dY must have shape ({model.n},)")
    pos = cloud.positions
    N = len(cloud)

    h = model.observe(pos)                       # (N, n)
    hbar = cloud.weights @ h
    centered = h - hbar
    exponent = centered @ (dY - hbar * dt) - 0.5 * np.einsum("ij,ij->i", centered, centered) * dt

    shift = exponent.max()
    if not np.isfinite(shift):
        raise WeightCollapseError()
    w = cloud.weights * np.exp(exponent - shift)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise WeightCollapseError()

    noise = rng.standard_normal((N, model.p)) * math.sqrt(dt)
    new_pos = pos + model.drift(pos) * dt + noise @ model.sigma.T
    return ParticleCloud(positions=new_pos, weights=w)


@dataclass(frozen=True, eq=False)
class ParticleFilterRun:
    """Per-step cloud summaries plus optional checkpoint clouds."""

    times: np.ndarray        # (K+1,)
    means: np.ndarray        # (K+1, d)
    covs: np.ndarray         # (K+1, d, d)
    ess: np.ndarray          # (K+1,)
    resampled: np.ndarray    # (K+1,) bool; True where a resample followed the step
    checkpoints: dict = field(default_factory=dict)   # time -> ParticleCloud
    q_path: np.ndarray | None = None                  # (K+1, d, d) when recorded

    def to_csv(self, path) -> None:
        """`t,mean1..meand,p11..pdd,ess,resampled(0|1)`."""
        from .tables import write_csv

        d = self.means.shape[1]
        header = (["t"] + [f"mean{i+1}" for i in range(d)]
                  + [f"p{i+1}{j+1}" for i in range(d) for j in range(d)]
                  + ["ess", "resampled"])
        rows = np.hstack([self.times[:, None], self.means,
                          self.covs.reshape(len(self.times), d * d),
                          self.ess[:, None], self.resampled[:, None].astype(float)])
        write_csv(path, header, rows)


def _cloud_q_matrix(cloud: ParticleCloud, cov: np.ndarray, model: ModelSpec) -> np.ndarray:
    """Closed-loop matrix Q = F - P H^T H - lambda H for the hypothesis checks.

    lambda is the cloud estimate of pi((I - pihat) h~^T); zero for affine
    observation parts.
    """
    Q = model.F - cov @ (model.H.T @ model.H)
    if not model.nonlinear_obs.is_gaussian_preserving:
        mean = cloud.weights @ cloud.positions
        h_nl = model.nonlinear_obs(cloud.positions, model.n)
        lam = ((cloud.positions - mean) * cloud.weights[:, None]).T @ h_nl   # (d, n)
        Q = Q - lam @ model.H
    return Q


def run_particle_filter(obs: PathRecord, prior: GaussianMeasure, model: ModelSpec,
                        n_particles: int, ess_threshold: float = 0.5,
                        seed: int = 0, checkpoint_times=(),
                        record_q_path: bool = False) -> ParticleFilterRun:
    """Bootstrap filter along one observation path.

    Initializes from the prior, alternates pf_step with conditional
    systematic resampling (ESS < ess_threshold * N), and records moments and
    ESS on the full grid. Full clouds are kept only at `checkpoint_times`
    (snapped to the grid) to bound output size. `record_q_path` additionally
    stores the closed-loop Q matrix per step for psi-stability diagnostics.
    """
    if n_particles < 2:
        raise ValueError("n_particles must be at least 2")
    if prior.d != model.d:
        raise ValueError("prior dimension does not match model")
    K = obs.times.shape[0] - 1
    dt = obs.dt
    rng = substream(seed, "particles")
    cloud = ParticleCloud(
        positions=rng.multivariate_normal(prior.mean.astype(float), prior.cov, size=n_particles),
        weights=np.full(n_particles, 1.0 / n_particles))

    ck_steps = {}
    for t in checkpoint_times:
        k = int(round(t / dt))
        if 0 <= k <= K:
            ck_steps[k] = float(t)

    means = np.empty((K + 1, model.d))
    covs = np.empty((K + 1, model.d, model.d))
    ess_series = np.empty(K + 1)
    resampled = np.zeros(K + 1, dtype=bool)
    q_path = np.empty((K + 1, model.d, model.d)) if record_q_path else None
    checkpoints = {}

    def record(k, cloud):
        g = cloud_moments(cloud)
        means[k] = g.mean
        covs[k] = g.cov
        ess_series[k] = ess(cloud)
        if record_q_path:
            q_path[k] = _cloud_q_matrix(cloud, g.cov, model)
        if k in ck_steps:
            checkpoints[ck_steps[k]] = cloud

    record(0, cloud)
    for k in range(K):
        dY = obs.observations[k + 1] - obs.observations[k]
        try:
            cloud = pf_step(cloud, dY, dt, model, rng)
        except WeightCollapseError:
            raise WeightCollapseError(step=k + 1) from None
        if ess(cloud) < ess_threshold * n_particles:
            cloud = systematic_resample(cloud, rng)
            resampled[k + 1] = True
        record(k + 1, cloud)

    return ParticleFilterRun(times=obs.times, means=means, covs=covs,
                             ess=ess_series, resampled=resampled,
                             checkpoints=checkpoints, q_path=q_path)


def propagate_prior_ensemble(model: ModelSpec, prior: GaussianMeasure, T: float, dt: float,
                             n_particles: int, seed: int, checkpoint_times=()) -> dict:
    """Unconditioned ensemble push-forward (observation-free particle flow).

    Returns {time: ParticleCloud} at the requested checkpoints; used for
    prior-divergence curves when the model is not Gaussian-preserving.
    """
    K = int(round(T / dt))
    rng = substream(seed, "prior")
    pos = rng.multivariate_normal(prior.mean.astype(float), prior.cov, size=n_particles)
    ck_steps = {int(round(t / dt)): float(t) for t in checkpoint_times}
    out = {}
    if 0 in ck_steps:
        out[ck_steps[0]] = ParticleCloud(pos, np.full(n_particles, 1.0 / n_particles))
    sqdt = math.sqrt(dt)
    for k in range(K):
        noise = rng.standard_normal((n_particles, model.p)) * sqdt
        pos = pos + model.drift(pos) * dt + noise @ model.sigma.T
        if (k + 1) in ck_steps:
            out[ck_steps[k + 1]] = ParticleCloud(pos, np.full(n_particles, 1.0 / n_particles))
    return out
