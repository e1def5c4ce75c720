"""Signal/observation models and sample-path simulation.

The signal is a d-dimensional diffusion

    dX_t = f(X_t) dt + sigma dV_t,        f(x) = F x + f~(x),

observed through an n-dimensional cumulative process

    dY_t = h(X_t) dt + dW_t,              h(x) = H x + h~(x),

with V, W independent Brownian motions and f~, h~ drawn from a closed
catalogue of bounded families so that sup-norms are analytic and configs
stay serializable. sigma is a constant d x p matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BlowUpError, NonGaussianPushForwardError
from .streams import substream

DEFAULT_BLOW_UP_LIMIT = 1e12

_FAMILIES = ("zero", "constant", "tanh", "sine")


@dataclass(frozen=True)
class BoundedNonlinearity:
    """One member of the bounded-function catalogue.

    kind="zero"      -> x |-> 0
    kind="constant"  -> x |-> offset                     (fixed vector)
    kind="tanh"      -> x |-> amplitude * tanh(x_i)      componentwise
    kind="sine"      -> x |-> amplitude * sin(x_i)       componentwise

    Componentwise families map the first min(out_dim, d) coordinates; an
    output dimension larger than d is rejected at model validation.
    """

    kind: str = "zero"
    amplitude: float = 0.0
    offset: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in _FAMILIES:
            raise ValueError(f"unknown bounded family {self.kind!r}; supported: {_FAMILIES}")
        if self.kind == "constant" and len(self.offset) == 0:
            raise ValueError("constant family requires a nonempty offset vector")
        if self.kind in ("tanh", "sine") and not math.isfinite(self.amplitude):
            raise ValueError("tanh/sine amplitude must be finite")

    @classmethod
    def zero(cls) -> "BoundedNonlinearity":
        return cls("zero")

    @classmethod
    def constant(cls, c) -> "BoundedNonlinearity":
        return cls("constant", offset=tuple(float(v) for v in np.atleast_1d(c)))

    @classmethod
    def tanh(cls, eps: float) -> "BoundedNonlinearity":
        return cls("tanh", amplitude=float(eps))

    @classmethod
    def sine(cls, eps: float) -> "BoundedNonlinearity":
        return cls("sine", amplitude=float(eps))

    @property
    def is_gaussian_preserving(self) -> bool:
        """True when the term is an affine offset (zero or constant)."""
        return self.kind in ("zero", "constant")

    def sup_norm(self, out_dim: int) -> float:
        """Analytic bound on |value| over all inputs."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return float(np.linalg.norm(self.offset))
        # tanh and sine are bounded by 1 componentwise
        return abs(self.amplitude) * math.sqrt(out_dim)

    def __call__(self, x: np.ndarray, out_dim: int) -> np.ndarray:
        """Evaluate at x (shape (..., d)) producing shape (..., out_dim)."""
        x = np.asarray(x)
        shape = x.shape[:-1] + (out_dim,)
        if self.kind == "zero":
            return np.zeros(shape)
        if self.kind == "constant":
            return np.broadcast_to(np.asarray(self.offset, dtype=float), shape).copy()
        head = x[..., :out_dim]
        if self.kind == "tanh":
            return self.amplitude * np.tanh(head)
        return self.amplitude * np.sin(head)

    def constant_vector(self, out_dim: int) -> np.ndarray:
        """The affine offset for Gaussian-preserving terms."""
        if self.kind == "zero":
            return np.zeros(out_dim)
        if self.kind == "constant":
            return np.asarray(self.offset, dtype=float)
        raise NonGaussianPushForwardError(
            f"non-Gaussian push-forward: {self.kind!r} family is not an affine offset"
        )


def _frozen_array(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Drift/observation/diffusion coefficients in linear-plus-bounded form."""

    F: np.ndarray
    H: np.ndarray
    sigma: np.ndarray
    nonlinear_drift: BoundedNonlinearity = field(default_factory=BoundedNonlinearity.zero)
    nonlinear_obs: BoundedNonlinearity = field(default_factory=BoundedNonlinearity.zero)

    def __post_init__(self):
        F = _frozen_array(self.F)
        H = _frozen_array(self.H)
        sigma = _frozen_array(self.sigma)
        if F.ndim != 2 or F.shape[0] != F.shape[1]:
            raise ValueError(f"F must be square, got shape {F.shape}")
        d = F.shape[0]
        if H.ndim != 2 or H.shape[1] != d:
            raise ValueError(f"H must be n x {d}, got shape {H.shape}")
        if sigma.ndim != 2 or sigma.shape[0] != d:
            raise ValueError(f"sigma must be {d} x p, got shape {sigma.shape}")
        n = H.shape[0]
        for name, term, dim in (("nonlinear_drift", self.nonlinear_drift, d),
                                ("nonlinear_obs", self.nonlinear_obs, n)):
            if term.kind == "constant" and len(term.offset) != dim:
                raise ValueError(f"{name}: constant offset has length {len(term.offset)}, expected {dim}")
            if term.kind in ("tanh", "sine") and dim > d:
                raise ValueError(f"{name}: componentwise family needs output dim <= d ({dim} > {d})")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "sigma", sigma)

    @property
    def d(self) -> int:
        return self.F.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def p(self) -> int:
        return self.sigma.shape[1]

    @property
    def is_gaussian_preserving(self) -> bool:
        return self.nonlinear_drift.is_gaussian_preserving

    @property
    def is_linear_gaussian(self) -> bool:
        """True when both nonlinear parts are affine offsets (Kalman-Bucy regime)."""
        return (self.nonlinear_drift.is_gaussian_preserving
                and self.nonlinear_obs.is_gaussian_preserving)

    def drift(self, x: np.ndarray) -> np.ndarray:
        """f(x) = F x + f~(x), vectorized over leading axes."""
        x = np.asarray(x)
        return x @ self.F.T + self.nonlinear_drift(x, self.d)

    def observe(self, x: np.ndarray) -> np.ndarray:
        """h(x) = H x + h~(x), vectorized over leading axes."""
        x = np.asarray(x)
        return x @ self.H.T + self.nonlinear_obs(x, self.n)


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    """Mean vector plus symmetric PSD covariance.

    The covariance must be symmetric to relative 1e-12; eigenvalues below
    -1e-10 * lambda_max are rejected, and tiny negatives are clamped to 0 on
    construction. Mean dtype is preserved (the Kalman module supplies
    extended-precision means).
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.array(self.mean))
        if mean.dtype != np.longdouble:
            mean = mean.astype(float)
        cov = np.atleast_2d(np.array(self.cov, dtype=float))
        d = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (d, d):
            raise ValueError(f"mean/cov shapes inconsistent: {mean.shape} vs {cov.shape}")
        if not (np.all(np.isfinite(mean.astype(float))) and np.all(np.isfinite(cov))):
            raise ValueError("mean/cov must be finite")
        scale = np.abs(cov).max()
        if scale > 0 and np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ValueError("covariance not symmetric within relative 1e-12")
        cov = 0.5 * (cov + cov.T)
        w, v = np.linalg.eigh(cov)
        wmax = max(w.max(), 0.0)
        if w.min() < -1e-10 * max(wmax, 1e-300):
            raise ValueError(f"covariance not PSD: eigenvalue {w.min():.3e}")
        if w.min() < 0.0:
            cov = (v * np.clip(w, 0.0, None)) @ v.T
            cov = 0.5 * (cov + cov.T)
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def d(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True, eq=False)
class PathRecord:
    """One realization on a uniform grid: times, signal states, cumulative observations."""

    times: np.ndarray         # (K+1,), t_0 = 0, uniform step
    states: np.ndarray        # (K+1, d)
    observations: np.ndarray  # (K+1, n), Y_0 = 0
    seed: int

    def __post_init__(self):
        times = _frozen_array(self.times)
        states = _frozen_array(self.states)
        obs = _frozen_array(self.observations)
        if times.ndim != 1 or times.shape[0] < 2:
            raise ValueError("times must hold at least two grid points")
        if times[0] != 0.0:
            raise ValueError("grid must start at t=0")
        steps = np.diff(times)
        if np.any(steps <= 0) or np.abs(steps - steps[0]).max() > 1e-9 * steps[0]:
            raise ValueError("grid must be strictly increasing with uniform step")
        if states.shape[0] != times.shape[0] or obs.shape[0] != times.shape[0]:
            raise ValueError("states and observations must share the grid length")
        if np.any(obs[0] != 0.0):
            raise ValueError("observations must start at Y_0 = 0")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def n(self) -> int:
        return self.observations.shape[1]

    def to_csv(self, path) -> None:
        """Write `t,x1..xd,y1..yn` rows at 17 significant digits, LF endings."""
        from .tables import write_csv

        header = (["t"]
                  + [f"x{i+1}" for i in range(self.d)]
                  + [f"y{i+1}" for i in range(self.n)])
        rows = np.hstack([self.times[:, None], self.states, self.observations])
        write_csv(path, header, rows)


def _grid(dt: float, T: float) -> int:
    """Number of steps K with K*dt = T within rounding."""
    if dt <= 0 or T <= 0:
        raise ValueError("dt and T must be positive")
    K = int(round(T / dt))
    if K < 1 or abs(K * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"dt={dt} does not divide T={T} within rounding")
    return K


def simulate_signal(model: ModelSpec, x0, dt: float, T: float, seed: int,
                    blow_up_limit: float = DEFAULT_BLOW_UP_LIMIT) -> PathRecord:
    """Euler-Maruyama path of the signal SDE; observations left zeroed.

    X_{k+1} = X_k + f(X_k) dt + sigma dV_k, with dV_k ~ N(0, dt I_p) drawn
    from the "signal" sub-stream of `seed`. Identical inputs give a
    bit-identical path. Raises BlowUpError as soon as any |X| component
    exceeds `blow_up_limit`.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.d,):
        raise ValueError(f"x0 must have shape ({model.d},), got {x0.shape}")
    K = _grid(dt, T)
    rng = substream(seed, "signal")
    increments = rng.standard_normal((K, model.p)) * math.sqrt(dt)
    directions = increments @ model.sigma.T

    states = np.empty((K + 1, model.d))
    states[0] = x0
    x = x0
    F, nl, d = model.F, model.nonlinear_drift, model.d
    for k in range(K):
        x = x + (F @ x + nl(x, d)) * dt + directions[k]
        if np.abs(x).max() > blow_up_limit:
            raise BlowUpError(time=(k + 1) * dt, limit=blow_up_limit)
        states[k + 1] = x

    times = np.arange(K + 1) * dt
    return PathRecord(times=times, states=states,
                      observations=np.zeros((K + 1, model.n)), seed=seed)


def simulate_observation(signal: PathRecord, model: ModelSpec, seed: int,
                         noise: bool = True) -> PathRecord:
    """Fill the cumulative observation path for a simulated signal.

    Y_{k+1} = Y_k + h(X_k) dt + dW_k, with dW_k ~ N(0, dt I_n) from the
    "observation" sub-stream (independent of the signal stream by
    construction). `noise=False` is a test hook that zeroes the stream,
    reducing Y_T to the Riemann sum of h along the path.
    """
    if signal.states.shape[1] != model.d:
        raise ValueError(f"signal dimension {signal.states.shape[1]} does not match model d={model.d}")
    K = signal.times.shape[0] - 1
    dt = signal.dt
    h_vals = model.observe(signal.states[:-1])            # (K, n), left endpoints
    if noise:
        rng = substream(seed, "observation")
        dW = rng.standard_normal((K, model.n)) * math.sqrt(dt)
    else:
        dW = np.zeros((K, model.n))
    Y = np.vstack([np.zeros((1, model.n)), np.cumsum(h_vals * dt + dW, axis=0)])
    return PathRecord(times=signal.times, states=signal.states,
                      observations=Y, seed=seed)


def rk4_linear_propagators(F: np.ndarray, dt, dtype=float):
    """Exact one-step RK4 propagator pair (E, D) for dm/dt = F m + c.

    Classic RK4 applied to a linear ODE collapses to m' = E m + D c with
    E = sum_{j<=4} (dt F)^j / j! and D = dt * sum_{j<=3} (dt F)^j / (j+1)!.
    Precomputing them makes the step three matvecs and keeps the Kalman
    mean update arithmetically identical to the moment push-forward.
    """
    d = F.shape[0]
    A = np.asarray(F, dtype=dtype) * dtype(dt)
    I = np.eye(d, dtype=dtype)
    E = I.copy()
    D = I.copy()
    term = I
    # E collects A^j/j!, D collects A^j/(j+1)!
    for j in range(1, 5):
        term = term @ A / dtype(j)
        E = E + term
        if j < 4:
            D = D + term * (dtype(1) / dtype(j + 1))
    return E, D * dtype(dt)


def push_forward_path(model: ModelSpec, mu0: GaussianMeasure, T: float, dt: float):
    """Prior moment flow on the full grid: (times, means, covs).

    dm/dt = F m + f~ (affine offset required), dP/dt = F P + P F^T + sigma
    sigma^T, both integrated with the 4th-order fixed-step scheme.
    """
    if not model.is_gaussian_preserving:
        raise NonGaussianPushForwardError(
            f"non-Gaussian push-forward: drift family {model.nonlinear_drift.kind!r}")
    if mu0.d != model.d:
        raise ValueError("prior dimension does not match model")
    K = _grid(dt, T)
    F = model.F
    c = model.nonlinear_drift.constant_vector(model.d)
    SST = model.sigma @ model.sigma.T
    E, D = rk4_linear_propagators(F, dt)
    Dc = D @ c

    means = np.empty((K + 1, model.d))
    covs = np.empty((K + 1, model.d, model.d))
    m = mu0.mean.astype(float)
    P = mu0.cov.copy()
    means[0], covs[0] = m, P

    def lyap_rhs(P):
        return SST + F @ P + P @ F.T

    for k in range(K):
        m = E @ m + Dc
        k1 = lyap_rhs(P)
        k2 = lyap_rhs(P + 0.5 * dt * k1)
        k3 = lyap_rhs(P + 0.5 * dt * k2)
        k4 = lyap_rhs(P + dt * k3)
        P = P + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        P = 0.5 * (P + P.T)
        means[k + 1], covs[k + 1] = m, P

    return np.arange(K + 1) * dt, means, covs


def push_forward_moments(model: ModelSpec, mu0: GaussianMeasure, T: float, dt: float) -> GaussianMeasure:
    """Prior law p_T = lambda_T^f mu0 for Gaussian-preserving models."""
    _, means, covs = push_forward_path(model, mu0, T, dt)
    return GaussianMeasure(mean=means[-1], cov=covs[-1])
