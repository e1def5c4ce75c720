"""Experiment configuration: strict JSON parsing and validation.

Configs are plain JSON with block structure (model / numerics / priors /
app2d / error_growth / output). Validation is strict and total: unknown
keys anywhere are rejected, blocks not used by the chosen experiment are
rejected, and every violation is reported at once. Every defaulted value
is recorded so the manifest can echo it (no hidden defaults). The seed is
mandatory: there is no silent nondeterminism.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .models import BoundedNonlinearity, GaussianMeasure, ModelSpec

EXPERIMENT_KINDS = ("simulate", "kalman", "pf", "twin", "app2d",
                    "prior-div", "nl-bound", "error-growth", "are")

_TOP_KEYS = {"experiment", "model", "numerics", "priors", "app2d",
             "error_growth", "x0", "filter", "output"}
_MODEL_KEYS = {"F", "H", "sigma", "nonlinear_drift", "nonlinear_obs"}
_NL_KEYS = {"kind", "amplitude", "offset"}
_NUMERICS_KEYS = {"dt", "T", "seed", "particles", "ess_threshold",
                  "checkpoint_every", "replicas"}
_PRIORS_KEYS = {"true", "wrong"}
_GAUSS_KEYS = {"mean", "cov"}
_APP2D_KEYS = {"lambda1", "lambda2", "h", "obs_mode", "expect_stabilized", "threshold"}
_EG_KEYS = {"kind", "alpha", "S", "V_inf", "V0", "a_lorenz", "S_imperfect"}
_OUTPUT_KEYS = {"directory", "formats"}

_NEEDS_MODEL = {"simulate", "kalman", "pf", "twin", "prior-div", "nl-bound", "are"}
_NEEDS_PRIOR_TRUE = {"kalman", "pf", "twin", "prior-div", "nl-bound"}
_NEEDS_PRIOR_WRONG = {"twin", "prior-div", "nl-bound"}

_DEFAULT_T = {"simulate": 10.0, "kalman": 10.0, "pf": 10.0, "twin": 30.0,
              "app2d": 30.0, "prior-div": 30.0, "nl-bound": 20.0,
              "error-growth": 15.0, "are": 30.0}

_APP2D_DEFAULTS = {"lambda1": -1.0, "lambda2": 1.0, "h": 1.0,
                   "obs_mode": "unstable_only", "expect_stabilized": None,
                   "threshold": 1e-2}
_EG_DEFAULTS = {"kind": "dk", "alpha": 1.0, "S": 0.0, "V_inf": 100.0,
                "V0": 1.0, "a_lorenz": None, "S_imperfect": 6.0}


@dataclass(eq=False)
class ExperimentConfig:
    experiment: str
    seed: int
    dt: float
    T: float
    model: ModelSpec | None = None
    prior_true: GaussianMeasure | None = None
    prior_wrong: GaussianMeasure | None = None
    x0: np.ndarray | None = None
    filter_kind: str = "kalman"
    particles: int = 2048
    ess_threshold: float = 0.5
    checkpoint_every: float = 1.0
    replicas: int = 32
    app2d: dict = field(default_factory=dict)
    error_growth: dict = field(default_factory=dict)
    out_dir: str = "out"
    formats: tuple = ("csv", "json")
    defaults_applied: dict = field(default_factory=dict)
    canonical: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """Fully-resolved config; parsing it again is a no-op (idempotent)."""
        return json.dumps(self.canonical, indent=2, sort_keys=True)

    def sha256(self) -> str:
        return hashlib.sha256(
            json.dumps(self.canonical, sort_keys=True).encode()).hexdigest()


class _Collector:
    """Accumulates violations and default records during validation."""

    def __init__(self):
        self.violations: list[str] = []
        self.defaults: dict = {}

    def error(self, msg: str) -> None:
        self.violations.append(msg)

    def check_keys(self, block: dict, allowed: set, where: str) -> None:
        for key in block:
            if key not in allowed:
                self.error(f"unknown key {key!r} in {where} (allowed: {sorted(allowed)})")

    def default(self, block: dict, key: str, value, where: str):
        if key in block and block[key] is not None:
            return block[key]
        self.defaults[f"{where}.{key}"] = value
        return value


def _as_matrix(raw, name: str, col: _Collector) -> np.ndarray | None:
    try:
        arr = np.array(raw, dtype=float)
    except (TypeError, ValueError):
        col.error(f"{name} must be a rectangular numeric matrix")
        return None
    if arr.ndim != 2 or arr.size == 0:
        col.error(f"{name} must be a 2-D matrix, got shape {arr.shape}")
        return None
    if not np.all(np.isfinite(arr)):
        col.error(f"{name} must be finite")
        return None
    return arr


def _as_vector(raw, name: str, col: _Collector) -> np.ndarray | None:
    try:
        arr = np.array(raw, dtype=float)
    except (TypeError, ValueError):
        col.error(f"{name} must be a numeric vector")
        return None
    if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
        col.error(f"{name} must be a finite 1-D vector")
        return None
    return arr


def _parse_nonlinearity(raw, name: str, col: _Collector) -> BoundedNonlinearity | None:
    if raw is None:
        return BoundedNonlinearity.zero()
    if not isinstance(raw, dict):
        col.error(f"{name} must be an object like {{\"kind\": \"tanh\", \"amplitude\": 0.5}}")
        return None
    col.check_keys(raw, _NL_KEYS, name)
    kind = raw.get("kind", "zero")
    try:
        if kind == "constant":
            return BoundedNonlinearity.constant(raw.get("offset", ()))
        return BoundedNonlinearity(kind=kind, amplitude=float(raw.get("amplitude", 0.0)))
    except (ValueError, TypeError) as exc:
        col.error(f"{name}: {exc}")
        return None


def _parse_model(raw, col: _Collector) -> ModelSpec | None:
    if not isinstance(raw, dict):
        col.error("model block must be an object")
        return None
    col.check_keys(raw, _MODEL_KEYS, "model block")
    for required in ("F", "H", "sigma"):
        if required not in raw:
            col.error(f"model block missing {required!r}")
    F = _as_matrix(raw.get("F", [[0.0]]), "model.F", col)
    H = _as_matrix(raw.get("H", [[0.0]]), "model.H", col)
    sigma = _as_matrix(raw.get("sigma", [[0.0]]), "model.sigma", col)
    drift = _parse_nonlinearity(raw.get("nonlinear_drift"), "model.nonlinear_drift", col)
    obs = _parse_nonlinearity(raw.get("nonlinear_obs"), "model.nonlinear_obs", col)
    if any(x is None for x in (F, H, sigma, drift, obs)) or col.violations:
        # shape errors already recorded; also report cross-shape problems when possible
        if F is not None and H is not None and F.shape[0] == F.shape[1] and H.shape[1] != F.shape[0]:
            col.error(f"model.H shape {H.shape} inconsistent with model.F shape {F.shape}")
        return None
    try:
        return ModelSpec(F=F, H=H, sigma=sigma, nonlinear_drift=drift, nonlinear_obs=obs)
    except ValueError as exc:
        col.error(f"model block: {exc}")
        if F.shape[0] != F.shape[1]:
            col.error(f"model.F must be square, got shape {F.shape}")
        elif H.shape[1] != F.shape[0]:
            col.error(f"model.H shape {H.shape} inconsistent with model.F shape {F.shape}")
        return None


def _parse_gaussian(raw, name: str, col: _Collector) -> GaussianMeasure | None:
    if not isinstance(raw, dict):
        col.error(f"{name} must be an object with mean and cov")
        return None
    col.check_keys(raw, _GAUSS_KEYS, name)
    if "mean" not in raw or "cov" not in raw:
        col.error(f"{name} must provide both mean and cov")
        return None
    mean = _as_vector(raw["mean"], f"{name}.mean", col)
    cov = _as_matrix(raw["cov"], f"{name}.cov", col)
    if mean is None or cov is None:
        return None
    try:
        return GaussianMeasure(mean=mean, cov=cov)
    except ValueError as exc:
        col.error(f"{name}: {exc}")
        return None


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON config; raises ConfigError with every violation."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"not valid JSON: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a JSON object"])

    col = _Collector()
    col.check_keys(raw, _TOP_KEYS, "top level")

    experiment = raw.get("experiment")
    if experiment not in EXPERIMENT_KINDS:
        col.error(f"experiment must be one of {list(EXPERIMENT_KINDS)}, got {experiment!r}")
        raise ConfigError(col.violations)

    numerics = raw.get("numerics", {})
    if not isinstance(numerics, dict):
        col.error("numerics block must be an object")
        numerics = {}
    col.check_keys(numerics, _NUMERICS_KEYS, "numerics block")

    if "seed" not in numerics or numerics["seed"] is None:
        col.error("numerics.seed is required (no silent nondeterminism)")
        seed = 0
    elif not isinstance(numerics["seed"], int) or isinstance(numerics["seed"], bool):
        col.error("numerics.seed must be an integer")
        seed = 0
    else:
        seed = numerics["seed"]

    dt = float(col.default(numerics, "dt", 1e-3, "numerics"))
    T = float(col.default(numerics, "T", _DEFAULT_T[experiment], "numerics"))
    particles = int(col.default(numerics, "particles", 2048, "numerics"))
    ess_threshold = float(col.default(numerics, "ess_threshold", 0.5, "numerics"))
    checkpoint_every = float(col.default(numerics, "checkpoint_every", 1.0, "numerics"))
    replicas = int(col.default(numerics, "replicas", 32, "numerics"))
    if dt <= 0:
        col.error("numerics.dt must be positive")
    if T < dt:
        col.error("numerics.T must be at least dt")
    if particles < 2:
        col.error("numerics.particles must be at least 2")
    if not 0.0 <= ess_threshold <= 1.0:
        col.error("numerics.ess_threshold must lie in [0, 1]")
    if replicas < 1:
        col.error("numerics.replicas must be positive")

    filter_kind = raw.get("filter", None)
    if experiment in ("twin",):
        filter_kind = col.default(raw, "filter", "kalman", "top")
        if filter_kind not in ("kalman", "particle"):
            col.error("filter must be 'kalman' or 'particle'")
    elif filter_kind is not None:
        col.error(f"filter key is not used by experiment {experiment!r}")
        filter_kind = "kalman"
    else:
        filter_kind = "kalman"

    # model / priors / x0, gated by experiment kind
    model = None
    if experiment in _NEEDS_MODEL:
        if "model" not in raw:
            col.error(f"experiment {experiment!r} requires a model block")
        else:
            model = _parse_model(raw["model"], col)
    elif "model" in raw:
        col.error(f"model block is not used by experiment {experiment!r} "
                  "(app2d builds its own model; error-growth has none)")

    priors_raw = raw.get("priors", {})
    prior_true = prior_wrong = None
    if experiment in _NEEDS_PRIOR_TRUE or experiment == "app2d":
        if not isinstance(priors_raw, dict):
            col.error("priors block must be an object")
            priors_raw = {}
        col.check_keys(priors_raw, _PRIORS_KEYS, "priors block")
        needs_wrong = experiment in _NEEDS_PRIOR_WRONG
        if experiment == "app2d":
            # optional, defaults live in the experiment
            if "true" in priors_raw:
                prior_true = _parse_gaussian(priors_raw["true"], "priors.true", col)
            if "wrong" in priors_raw:
                prior_wrong = _parse_gaussian(priors_raw["wrong"], "priors.wrong", col)
        else:
            if "true" not in priors_raw:
                col.error(f"experiment {experiment!r} requires priors.true")
            else:
                prior_true = _parse_gaussian(priors_raw["true"], "priors.true", col)
            if needs_wrong:
                if "wrong" not in priors_raw:
                    col.error(f"experiment {experiment!r} requires priors.wrong")
                else:
                    prior_wrong = _parse_gaussian(priors_raw["wrong"], "priors.wrong", col)
            elif "wrong" in priors_raw:
                col.error(f"priors.wrong is not used by experiment {experiment!r}")
    elif "priors" in raw:
        col.error(f"priors block is not used by experiment {experiment!r}")

    x0 = None
    if experiment == "simulate":
        if "x0" not in raw:
            col.error("experiment 'simulate' requires x0")
        else:
            x0 = _as_vector(raw["x0"], "x0", col)
    elif "x0" in raw:
        col.error(f"x0 is not used by experiment {experiment!r}")

    app2d_block = dict(_APP2D_DEFAULTS)
    if experiment == "app2d":
        given = raw.get("app2d", {})
        if not isinstance(given, dict):
            col.error("app2d block must be an object")
            given = {}
        col.check_keys(given, _APP2D_KEYS, "app2d block")
        for key in _APP2D_DEFAULTS:
            app2d_block[key] = col.default(given, key, _APP2D_DEFAULTS[key], "app2d")
        if app2d_block["obs_mode"] not in ("unstable_only", "stable_only", "sum"):
            col.error("app2d.obs_mode must be one of unstable_only/stable_only/sum")
        if not (float(app2d_block["lambda1"]) < 0 < float(app2d_block["lambda2"])):
            col.error("app2d requires lambda1 < 0 < lambda2")
    elif "app2d" in raw:
        col.error(f"app2d block is not used by experiment {experiment!r}")

    eg_block = dict(_EG_DEFAULTS)
    if experiment == "error-growth":
        given = raw.get("error_growth", {})
        if not isinstance(given, dict):
            col.error("error_growth block must be an object")
            given = {}
        col.check_keys(given, _EG_KEYS, "error_growth block")
        for key in _EG_DEFAULTS:
            eg_block[key] = col.default(given, key, _EG_DEFAULTS[key], "error_growth")
        if eg_block["kind"] not in ("leith", "lorenz", "dk", "stroe_royer"):
            col.error("error_growth.kind must be leith/lorenz/dk/stroe_royer")
    elif "error_growth" in raw:
        col.error(f"error_growth block is not used by experiment {experiment!r}")

    output = raw.get("output", {})
    if not isinstance(output, dict):
        col.error("output block must be an object")
        output = {}
    col.check_keys(output, _OUTPUT_KEYS, "output block")
    out_dir = str(col.default(output, "directory", "out", "output"))
    formats = col.default(output, "formats", ["csv", "json"], "output")
    if (not isinstance(formats, (list, tuple)) or
            any(f not in ("csv", "json") for f in formats)):
        col.error("output.formats must be a list drawn from ['csv', 'json']")
        formats = ["csv", "json"]

    # cross-dimension checks
    if model is not None:
        d = model.d
        for name, g in (("priors.true", prior_true), ("priors.wrong", prior_wrong)):
            if g is not None and g.d != d:
                col.error(f"{name} has dimension {g.d}, model has d={d}")
        if x0 is not None and x0.shape != (d,):
            col.error(f"x0 has shape {x0.shape}, model has d={d}")
        if experiment in ("pf", "nl-bound") or (experiment == "twin" and filter_kind == "particle"):
            pass  # particle counts already validated
        if experiment == "kalman" and not model.is_linear_gaussian:
            col.error("experiment 'kalman' requires zero/constant nonlinear parts")

    if col.violations:
        raise ConfigError(col.violations)

    canonical = {
        "experiment": experiment,
        "numerics": {"dt": dt, "T": T, "seed": seed, "particles": particles,
                     "ess_threshold": ess_threshold,
                     "checkpoint_every": checkpoint_every, "replicas": replicas},
        "output": {"directory": out_dir, "formats": list(formats)},
    }
    if experiment == "twin":
        canonical["filter"] = filter_kind
    if model is not None:
        canonical["model"] = {
            "F": model.F.tolist(), "H": model.H.tolist(), "sigma": model.sigma.tolist(),
            "nonlinear_drift": _nl_dict(model.nonlinear_drift),
            "nonlinear_obs": _nl_dict(model.nonlinear_obs),
        }
    priors_out = {}
    if prior_true is not None:
        priors_out["true"] = {"mean": prior_true.mean.astype(float).tolist(),
                              "cov": prior_true.cov.tolist()}
    if prior_wrong is not None:
        priors_out["wrong"] = {"mean": prior_wrong.mean.astype(float).tolist(),
                               "cov": prior_wrong.cov.tolist()}
    if priors_out:
        canonical["priors"] = priors_out
    if x0 is not None:
        canonical["x0"] = x0.tolist()
    if experiment == "app2d":
        canonical["app2d"] = app2d_block
    if experiment == "error-growth":
        canonical["error_growth"] = eg_block

    return ExperimentConfig(
        experiment=experiment, seed=seed, dt=dt, T=T, model=model,
        prior_true=prior_true, prior_wrong=prior_wrong, x0=x0,
        filter_kind=filter_kind, particles=particles, ess_threshold=ess_threshold,
        checkpoint_every=checkpoint_every, replicas=replicas,
        app2d=app2d_block, error_growth=eg_block,
        out_dir=out_dir, formats=tuple(formats),
        defaults_applied=col.defaults, canonical=canonical)


def _nl_dict(term: BoundedNonlinearity) -> dict:
    out = {"kind": term.kind}
    if term.kind == "constant":
        out["offset"] = list(term.offset)
    elif term.kind in ("tanh", "sine"):
        out["amplitude"] = term.amplitude
    return out
