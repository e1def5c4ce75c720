"""Forecast error-growth models: Leith, Lorenz, Dalcher-Kalnay, Stroe-Royer.

All work on the error variance V(t) (the Lorenz model's RMS form is
converted via V = E^2):

    leith        dV/dt = alpha V + S
    lorenz       dV/dt = 2 a sqrt(V_inf) V (1 - sqrt(V / V_inf))
    dk           dV/dt = (alpha V + S)(1 - V / V_inf)
    stroe_royer  dV/dt = -a V log(V / V_inf)

The comparison table reproduces the standard two-panel figure setup
(alpha=1, V0=1, V_inf=100, a = alpha / (2 sqrt(V_inf))): S=0 for all three
models, S=6 for Leith and DK (the Lorenz model has no systematic-error
term and is identical across panels, so its S=6 column is omitted).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .tables import write_csv

KINDS = ("leith", "lorenz", "dk", "stroe_royer")


@dataclass(frozen=True)
class ErrorGrowthParams:
    alpha: float = 1.0        # growth coefficient (1/time)
    S: float = 0.0            # systematic model error (variance/time)
    V_inf: float = 100.0      # saturation variance
    a_lorenz: float | None = None   # defaults to alpha / (2 sqrt(V_inf))
    V0: float = 1.0           # initial variance

    def __post_init__(self):
        if not self.V_inf > 0:
            raise ValueError("V_inf must be positive")
        if self.V0 < 0:
            raise ValueError("V0 must be nonnegative")

    @property
    def a(self) -> float:
        """Lorenz coefficient; the short-term matching rule when unset."""
        if self.a_lorenz is not None:
            return self.a_lorenz
        return self.alpha / (2.0 * math.sqrt(self.V_inf))


def leith_closed_form(t, params: ErrorGrowthParams):
    """(V0 + S/alpha) e^{alpha t} - S/alpha; requires alpha != 0."""
    if params.alpha == 0:
        raise ValueError("leith closed form requires alpha != 0")
    t = np.asarray(t, dtype=float)
    ratio = params.S / params.alpha
    return (params.V0 + ratio) * np.exp(params.alpha * t) - ratio


def growth_rhs(kind: str, params: ErrorGrowthParams):
    """Right-hand side dV/dt for the chosen model."""
    if kind == "leith":
        return lambda V: params.alpha * V + params.S
    if kind == "lorenz":
        coef = 2.0 * params.a * math.sqrt(params.V_inf)
        root = 1.0 / math.sqrt(params.V_inf)
        return lambda V: coef * V * (1.0 - math.sqrt(max(V, 0.0)) * root)
    if kind == "dk":
        return lambda V: (params.alpha * V + params.S) * (1.0 - V / params.V_inf)
    if kind == "stroe_royer":
        return lambda V: -params.a * V * math.log(V / params.V_inf) if V > 0 else 0.0
    raise ValueError(f"unknown error-growth model {kind!r}; supported: {KINDS}")


def integrate_error_model(kind: str, params: ErrorGrowthParams, T: float,
                          dt: float = 1e-3):
    """Fixed-step 4th-order integration of V(t); returns (times, values)."""
    if kind != "leith":
        if not 0.0 < params.V0 <= params.V_inf:
            if kind == "stroe_royer" and params.V0 == 0.0:
                raise ValueError("stroe_royer has a log singularity at V0 = 0")
            raise ValueError(f"{kind} requires 0 < V0 <= V_inf")
    K = int(round(T / dt))
    if K < 1 or abs(K * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"dt={dt} does not divide T={T}")
    rhs = growth_rhs(kind, params)
    out = np.empty(K + 1)
    out[0] = V = params.V0
    for k in range(K):
        k1 = rhs(V)
        k2 = rhs(V + 0.5 * dt * k1)
        k3 = rhs(V + 0.5 * dt * k2)
        k4 = rhs(V + dt * k3)
        V = V + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = V
    return np.arange(K + 1) * dt, out


@dataclass(frozen=True, eq=False)
class ErrorModelTable:
    """Shared-grid comparison series, CSV-ready."""

    times: np.ndarray
    leith_s0: np.ndarray
    lorenz_s0: np.ndarray
    dk_s0: np.ndarray
    leith_s6: np.ndarray
    dk_s6: np.ndarray

    COLUMNS = ("t", "leith_s0", "lorenz_s0", "dk_s0", "leith_s6", "dk_s6")

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.times, self.leith_s0, self.lorenz_s0,
                                self.dk_s0, self.leith_s6, self.dk_s6])
        write_csv(path, list(self.COLUMNS), rows)


def compare_models(params: ErrorGrowthParams = ErrorGrowthParams(),
                   S_imperfect: float = 6.0, T: float = 15.0,
                   dt: float = 1e-3) -> ErrorModelTable:
    """Three models for the perfect (S=0) and imperfect (S=S_imperfect) cases."""
    p0 = replace(params, S=0.0)
    p6 = replace(params, S=S_imperfect)
    times, leith0 = integrate_error_model("leith", p0, T, dt)
    _, lorenz0 = integrate_error_model("lorenz", p0, T, dt)
    _, dk0 = integrate_error_model("dk", p0, T, dt)
    _, leith6 = integrate_error_model("leith", p6, T, dt)
    _, dk6 = integrate_error_model("dk", p6, T, dt)
    return ErrorModelTable(times=times, leith_s0=leith0, lorenz_s0=lorenz0,
                           dk_s0=dk0, leith_s6=leith6, dk_s6=dk6)


FREE_PARAMS = {
    "leith": ("alpha", "S"),
    "dk": ("alpha", "S", "V_inf"),
    "lorenz": ("a_lorenz", "V_inf"),
    "stroe_royer": ("a_lorenz", "V_inf"),
}


@dataclass(frozen=True)
class ErrorModelFit:
    params: ErrorGrowthParams
    rms: float
    converged: bool
    message: str = ""


def _theta_to_params(kind: str, theta: np.ndarray, V0: float) -> ErrorGrowthParams:
    names = FREE_PARAMS[kind]
    kwargs = {"V0": V0}
    for name, value in zip(names, theta):
        # positive parameters live in log space; S in sqrt space (S >= 0)
        kwargs[name] = value ** 2 if name == "S" else math.exp(value)
    if "V_inf" not in kwargs:
        kwargs["V_inf"] = max(100.0, 10.0 * V0 + 1.0)   # inactive for leith
    return ErrorGrowthParams(**kwargs)


def fit_error_model(kind: str, times, values, seed: int = 0,
                    max_iter: int = 600) -> ErrorModelFit:
    """Least-squares fit of the model's free parameters to an observed series.

    Derivative-free simplex descent on the RMS residual of the integrated
    model, multi-started from 8 seeded initial points; V0 is pinned to the
    first observation. Non-convergence returns the best candidate with
    converged=False rather than raising.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.shape != values.shape or times.ndim != 1:
        raise ValueError("times and values must be matching 1-D arrays")
    if len(times) < 4:
        raise ValueError("need at least 4 points to fit")
    if np.any(values <= 0):
        raise ValueError("observed variances must be positive")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if kind not in FREE_PARAMS:
        raise ValueError(f"unknown error-growth model {kind!r}")

    V0 = float(values[0])
    t0, t1 = float(times[0]), float(times[-1])
    span = t1 - t0
    dt_obj = span / max(400, 4 * len(times))

    def objective(theta):
        try:
            p = _theta_to_params(kind, theta, V0)
            grid, series = integrate_error_model(kind, p, span + dt_obj, dt_obj)
        except (ValueError, OverflowError):
            return 1e18
        if not np.all(np.isfinite(series)):
            return 1e18
        model_vals = np.interp(times - t0, grid, series)
        return float(np.sqrt(np.mean((model_vals - values) ** 2)))

    # data-driven center: early log-slope for the growth rate, max for V_inf
    head = slice(0, max(3, len(times) // 4))
    slope = np.polyfit(times[head], np.log(values[head]), 1)[0]
    alpha0 = float(np.clip(abs(slope), 1e-3, 1e3))
    vinf0 = float(max(values.max() * 1.2, V0 * 1.5))
    centers = {"alpha": math.log(alpha0), "S": math.sqrt(max(alpha0 * V0, 1e-3)),
               "V_inf": math.log(vinf0),
               "a_lorenz": math.log(alpha0 / (2.0 * math.sqrt(vinf0)))}
    center = np.array([centers[name] for name in FREE_PARAMS[kind]])

    rng = np.random.default_rng(seed)
    best = None
    scale0 = float(np.abs(values).max())
    for start in range(8):
        theta0 = center if start == 0 else center + rng.normal(scale=0.7, size=center.shape)
        res = minimize(objective, theta0, method="Nelder-Mead",
                       options={"maxiter": max_iter, "xatol": 1e-10, "fatol": 1e-12})
        if best is None or res.fun < best.fun:
            best = res
        if best.fun <= 1e-9 * scale0:   # exact recovery; further starts are wasted
            break

    params = _theta_to_params(kind, best.x, V0)
    message = ""
    converged = bool(best.success)
    if kind in ("leith", "dk") and params.alpha < 1e-6:
        message = "alpha at lower boundary (degenerate, no growth in data)"
        converged = False
    elif not converged:
        message = "simplex budget exhausted; best candidate returned"
    return ErrorModelFit(params=params, rms=float(best.fun),
                         converged=converged, message=message)
