"""Exact conditional law for linear-Gaussian models.

The posterior is N(xhat_t, P_t), with the mean driven by

    dxhat = (F xhat + f~) dt + P H^T (dY - (H xhat + h~) dt)

and the covariance by the deterministic matrix Riccati equation

    dP/dt = sigma sigma^T + F P + P F^T - P H^T H P,

whose stationary PSD solution P_inf solves the algebraic Riccati equation
and yields the closed-loop matrix Q_inf = F - P_inf H^T H.

Numerical notes. The covariance is an ODE and is stepped with the classic
4th-order scheme; the mean uses the exact RK4 propagator for its linear
drift plus an Euler innovation increment. The whole recursion runs in
extended precision (np.longdouble) and the trajectory keeps longdouble
means: on unstable models the state reaches ~1e13 by T=30, where float64
resolution (~2e-3 absolute) is coarser than the mean differences the
twin-filter experiments must resolve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .errors import (AreConvergenceError, RiccatiStepError,
                     UndetectablePairError, UnstabilizablePairError)
from .models import GaussianMeasure, ModelSpec, PathRecord, _frozen_array, rk4_linear_propagators


@dataclass(frozen=True, eq=False)
class KalmanTrajectory:
    """Posterior moments on the observation grid.

    means are stored as np.longdouble (see module docstring); covariances
    are float64, symmetric PSD at every step.
    """

    times: np.ndarray   # (K+1,)
    means: np.ndarray   # (K+1, d), longdouble
    covs: np.ndarray    # (K+1, d, d)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def gaussian_at(self, k: int) -> GaussianMeasure:
        return GaussianMeasure(mean=self.means[k], cov=self.covs[k])

    def to_csv(self, path) -> None:
        """`t,mean1..meand,p11,p12,...,pdd` with row-major covariance."""
        from .tables import write_csv

        d = self.d
        header = (["t"] + [f"mean{i+1}" for i in range(d)]
                  + [f"p{i+1}{j+1}" for i in range(d) for j in range(d)])
        rows = np.hstack([self.times[:, None],
                          self.means.astype(float),
                          self.covs.reshape(len(self.times), d * d)])
        write_csv(path, header, rows)


@dataclass(frozen=True, eq=False)
class HautusResult:
    """Outcome of a Hautus rank test; witness is the first failing eigenvalue."""

    passed: bool
    witness: complex | None = None

    def __bool__(self) -> bool:
        return self.passed


def check_detectability(F, H) -> HautusResult:
    """Hautus test: rank([F - lambda I; H]) = d for every eigenvalue with Re >= 0."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    d = F.shape[0]
    eigs = np.linalg.eigvals(F)
    margin = 1e-12 * max(1.0, np.abs(eigs).max())
    for lam in eigs:
        if lam.real >= -margin:
            stacked = np.vstack([F - lam * np.eye(d), H])
            if np.linalg.matrix_rank(stacked) < d:
                return HautusResult(False, witness=complex(lam))
    return HautusResult(True)


def check_stabilizability(F, sigma) -> HautusResult:
    """Dual Hautus test: rank([F - lambda I, sigma]) = d for every eigenvalue with Re >= 0."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = F.shape[0]
    eigs = np.linalg.eigvals(F)
    margin = 1e-12 * max(1.0, np.abs(eigs).max())
    for lam in eigs:
        if lam.real >= -margin:
            stacked = np.hstack([F - lam * np.eye(d), sigma])
            if np.linalg.matrix_rank(stacked) < d:
                return HautusResult(False, witness=complex(lam))
    return HautusResult(True)


def _clamp_psd(P: np.ndarray, step: int, rel_tol: float = 1e-10):
    """Symmetrize and clamp tiny negative eigenvalues; fail loudly beyond tolerance.

    Returns the (possibly repaired) matrix in the input dtype.
    """
    Pf = np.asarray(P, dtype=float)
    w = np.linalg.eigvalsh(Pf)
    wmax = max(w.max(), 0.0)
    if w.min() >= 0.0:
        return P
    if w.min() < -rel_tol * max(wmax, 1e-300):
        raise RiccatiStepError(step=step, min_eig=float(w.min()))
    w2, v = np.linalg.eigh(Pf)
    repaired = (v * np.clip(w2, 0.0, None)) @ v.T
    repaired = 0.5 * (repaired + repaired.T)
    return repaired.astype(P.dtype)


def run_kalman_bucy(obs: PathRecord, prior: GaussianMeasure, model: ModelSpec) -> KalmanTrajectory:
    """Run the Kalman-Bucy filter along one observation path.

    Requires both nonlinear parts to be affine offsets (the f~, h~ constants
    of the linear theory). The trajectory starts at the prior moments.
    """
    if not model.is_linear_gaussian:
        raise ValueError("run_kalman_bucy requires zero/constant nonlinear parts")
    if prior.d != model.d:
        raise ValueError("prior dimension does not match model")
    if obs.observations.shape[1] != model.n:
        raise ValueError("observation dimension does not match model")
    if not np.all(np.isfinite(obs.observations)):
        raise ValueError("NaN/inf in observations")

    ld = np.longdouble
    K = obs.times.shape[0] - 1
    d, n = model.d, model.n
    dt = ld(obs.dt)
    F = model.F.astype(ld)
    H = model.H.astype(ld)
    HT = H.T.copy()
    HTH = H.T @ H
    SST = (model.sigma @ model.sigma.T).astype(ld)
    f_c = model.nonlinear_drift.constant_vector(d).astype(ld)
    h_c = model.nonlinear_obs.constant_vector(n).astype(ld)
    E, D = rk4_linear_propagators(model.F, obs.dt, dtype=ld)
    Dc = D @ f_c
    Y = obs.observations.astype(ld)

    means = np.empty((K + 1, d), dtype=ld)
    covs = np.empty((K + 1, d, d))
    m = prior.mean.astype(ld)
    P = prior.cov.astype(ld)
    means[0], covs[0] = m, P

    half = ld(0.5) * dt
    sixth = dt / ld(6.0)
    two = ld(2.0)
    for k in range(K):
        dY = Y[k + 1] - Y[k]
        gain = P @ HT
        m = E @ m + Dc + gain @ (dY - (H @ m + h_c) * dt)
        k1 = SST + F @ P + P @ F.T - P @ HTH @ P
        P2 = P + half * k1
        k2 = SST + F @ P2 + P2 @ F.T - P2 @ HTH @ P2
        P2 = P + half * k2
        k3 = SST + F @ P2 + P2 @ F.T - P2 @ HTH @ P2
        P2 = P + dt * k3
        k4 = SST + F @ P2 + P2 @ F.T - P2 @ HTH @ P2
        P = P + sixth * (k1 + two * k2 + two * k3 + k4)
        P = ld(0.5) * (P + P.T)
        P = _clamp_psd(P, step=k + 1)
        means[k + 1] = m
        covs[k + 1] = P

    means.flags.writeable = False
    covs.flags.writeable = False
    return KalmanTrajectory(times=obs.times, means=means, covs=covs)


def riccati_rhs(P: np.ndarray, F: np.ndarray, HTH: np.ndarray, SST: np.ndarray) -> np.ndarray:
    return SST + F @ P + P @ F.T - P @ HTH @ P


def riccati_flow(model: ModelSpec, P0, T: float, dt: float, keep_path: bool = False):
    """Integrate the Riccati ODE from P0 with fixed-step RK4 (float64).

    Returns the endpoint, or (times, path) when keep_path is set. This is
    the brute-force oracle the ARE solver and its tests are checked against.
    """
    K = int(round(T / dt))
    if K < 1 or abs(K * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"dt={dt} does not divide T={T}")
    F = model.F
    HTH = model.H.T @ model.H
    SST = model.sigma @ model.sigma.T
    P = np.array(P0, dtype=float)
    if keep_path:
        path = np.empty((K + 1,) + P.shape)
        path[0] = P
    half, sixth = 0.5 * dt, dt / 6.0
    for k in range(K):
        k1 = SST + F @ P + P @ F.T - P @ HTH @ P
        P2 = P + half * k1
        k2 = SST + F @ P2 + P2 @ F.T - P2 @ HTH @ P2
        P2 = P + half * k2
        k3 = SST + F @ P2 + P2 @ F.T - P2 @ HTH @ P2
        P2 = P + dt * k3
        k4 = SST + F @ P2 + P2 @ F.T - P2 @ HTH @ P2
        P = P + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        P = 0.5 * (P + P.T)
        if keep_path:
            path[k + 1] = P
    if keep_path:
        return np.arange(K + 1) * dt, path
    return P


@dataclass(frozen=True, eq=False)
class AreSolution:
    """Stabilizing solution of sigma sigma^T + F P + P F^T - P H^T H P = 0."""

    P_inf: np.ndarray
    Q_inf: np.ndarray         # F - P_inf H^T H
    slowest_decay: float      # -max Re eig(Q_inf)
    residual: float           # Frobenius norm of the ARE left side

    def to_json(self, path) -> None:
        from .tables import write_json

        write_json(path, {
            "p_inf": self.P_inf.tolist(),
            "q_inf": self.Q_inf.tolist(),
            "decay": self.slowest_decay,
            "residual": self.residual,
        })


def solve_are(model: ModelSpec, tol: float = 1e-10, max_T: float = 200.0,
              flow_dt: float = 1e-2) -> AreSolution:
    """Riccati flow from P0=0 to near-stationarity, then Newton-Kleinman.

    The flow limit selects the unique PSD stabilizing solution; each Newton
    step solves the Lyapunov equation Q_i P + P Q_i^T = -(sigma sigma^T +
    P_i H^T H P_i) for the next iterate. Preconditions: (F, H) detectable
    and (F, sigma) stabilizable (Hautus), checked up front.
    """
    det = check_detectability(model.F, model.H)
    if not det:
        raise UndetectablePairError(det.witness)
    stab = check_stabilizability(model.F, model.sigma)
    if not stab:
        raise UnstabilizablePairError(stab.witness)

    F = model.F
    HTH = model.H.T @ model.H
    SST = model.sigma @ model.sigma.T
    d = model.d

    # flow phase
    P = np.zeros((d, d))
    K = int(round(max_T / flow_dt))
    half, sixth = 0.5 * flow_dt, flow_dt / 6.0
    converged_flow = False
    for _ in range(K):
        k1 = SST + F @ P + P @ F.T - P @ HTH @ P
        if np.linalg.norm(k1) <= tol * (1.0 + np.linalg.norm(P)):
            converged_flow = True
            break
        P2 = P + half * k1
        k2 = SST + F @ P2 + P2 @ F.T - P2 @ HTH @ P2
        P2 = P + half * k2
        k3 = SST + F @ P2 + P2 @ F.T - P2 @ HTH @ P2
        P2 = P + flow_dt * k3
        k4 = SST + F @ P2 + P2 @ F.T - P2 @ HTH @ P2
        P = P + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        P = 0.5 * (P + P.T)

    # Newton-Kleinman refinement
    def residual_norm(P):
        return float(np.linalg.norm(SST + F @ P + P @ F.T - P @ HTH @ P))

    target = 1e-9
    for _ in range(20):
        if residual_norm(P) <= target * (1.0 + np.linalg.norm(P)):
            break
        Q = F - P @ HTH
        P_next = solve_continuous_lyapunov(Q, -(SST + P @ HTH @ P))
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            break
        P = P_next

    res = residual_norm(P)
    if res > target * (1.0 + np.linalg.norm(P)):
        raise AreConvergenceError(
            f"ARE not converged by max_T={max_T}: residual {res:.3e} "
            f"(flow converged: {converged_flow})")

    Q_inf = F - P @ HTH
    eig_real = np.linalg.eigvals(Q_inf).real
    if eig_real.max() >= 0:
        raise AreConvergenceError(
            f"closed loop not Hurwitz: max Re eig(Q_inf) = {eig_real.max():.3e}")
    return AreSolution(P_inf=_frozen_array(P), Q_inf=_frozen_array(Q_inf),
                       slowest_decay=float(-eig_real.max()), residual=res)


def innovation_path(obs: PathRecord, traj: KalmanTrajectory, model: ModelSpec) -> np.ndarray:
    """Innovation I_t = Y_t - integral of the predicted observation.

    I_{k+1} = I_k + dY_k - (H xhat_k + h~) dt; a standard Brownian motion
    when the filter model matches the data-generating one.
    """
    if traj.times.shape != obs.times.shape or np.any(traj.times != obs.times):
        raise ValueError("trajectory grid does not match observation grid")
    dt = obs.dt
    h_c = model.nonlinear_obs.constant_vector(model.n)
    predicted = traj.means[:-1].astype(float) @ model.H.T + h_c   # (K, n)
    dI = np.diff(obs.observations, axis=0) - predicted * dt
    return np.vstack([np.zeros((1, model.n)), np.cumsum(dI, axis=0)])


@dataclass(frozen=True)
class PsiStats:
    """Window statistics of d psi/dt = Q_t psi, psi_{s:s} = I."""

    decay: float              # c with E|psi_{s:t}|^2 <= e^{-c(t-s)}
    inv_fourth: float         # max over windows of int |psi^{-1}|^4 ds
    n_windows: int


def psi_stability_stats(q_path: np.ndarray, dt: float, delta: float = 1.0,
                        burn_in: float = 0.2) -> PsiStats:
    """Integrate the propagator over windows of length delta and estimate decay.

    The decay rate is c = -(2/delta) * mean log ||psi_window||_2 over
    windows after the burn-in fraction, matching E[|psi|^2] <= e^{-c(t-s)}.
    Also accumulates the empirical counterpart of the inverse-moment bound:
    the windowed integral of ||psi^{-1}||_2^4 (no a-priori criterion for it
    exists; this is a reported surrogate).
    """
    q_path = np.asarray(q_path, dtype=float)
    if q_path.ndim != 3 or q_path.shape[1] != q_path.shape[2]:
        raise ValueError("q_path must be a (K+1, d, d) series")
    K = q_path.shape[0] - 1
    d = q_path.shape[1]
    w = int(round(delta / dt))
    if w < 1 or w > K:
        raise ValueError(f"window delta={delta} does not fit the path (K={K}, dt={dt})")
    start = int(np.ceil(burn_in * K))
    starts = range(start, K - w + 1, w)
    I = np.eye(d)
    log_norms = []
    inv_fourth = []
    for s0 in starts:
        psi = I.copy()
        phi = I.copy()     # phi = psi^{-1}, d phi/dt = -phi Q_t
        acc = 0.0
        prev_inv4 = 1.0    # ||I||^4
        for j in range(s0, s0 + w):
            Qa, Qb = q_path[j], q_path[j + 1]
            Qm = 0.5 * (Qa + Qb)
            k1 = Qa @ psi
            k2 = Qm @ (psi + 0.5 * dt * k1)
            k3 = Qm @ (psi + 0.5 * dt * k2)
            k4 = Qb @ (psi + dt * k3)
            psi = psi + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            l1 = -phi @ Qa
            l2 = -(phi + 0.5 * dt * l1) @ Qm
            l3 = -(phi + 0.5 * dt * l2) @ Qm
            l4 = -(phi + dt * l3) @ Qb
            phi = phi + (dt / 6.0) * (l1 + 2 * l2 + 2 * l3 + l4)
            inv4 = np.linalg.norm(phi, 2) ** 4
            acc += 0.5 * (prev_inv4 + inv4) * dt    # trapezoid
            prev_inv4 = inv4
        log_norms.append(np.log(np.linalg.norm(psi, 2)))
        inv_fourth.append(acc)
    if not log_norms:
        raise ValueError("no full window after burn-in")
    c = float(-(2.0 / delta) * np.mean(log_norms))
    return PsiStats(decay=c, inv_fourth=float(np.max(inv_fourth)), n_windows=len(log_norms))


def estimate_psi_decay(q_path: np.ndarray, dt: float, delta: float = 1.0,
                       burn_in: float = 0.2) -> float:
    """Exponential-stability rate of the closed-loop propagator (see PsiStats)."""
    return psi_stability_stats(q_path, dt, delta=delta, burn_in=burn_in).decay
