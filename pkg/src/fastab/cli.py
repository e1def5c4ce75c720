"""Batch front door: config-driven experiment runs and the `fastab` CLI.

Exit codes: 0 success, 1 software/validation error, 2 the experiment ran
but its acceptance predicate failed (e.g. expect_stabilized in a test
profile) — a scientific failure channel CI can distinguish from crashes.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import EXPERIMENT_KINDS, ExperimentConfig, parse_config
from .errors import ConfigError, FastabError
from .error_growth import ErrorGrowthParams, compare_models
from .experiments import (run_appendix_d, run_nonlinear_boundedness,
                          run_prior_divergence, run_twin_filter)
from .kalman import innovation_path, run_kalman_bucy, solve_are
from .models import simulate_observation, simulate_signal
from .particles import run_particle_filter
from .streams import substream
from .tables import write_csv, write_json


def _simulate_path(cfg: ExperimentConfig):
    signal = simulate_signal(cfg.model, cfg.x0, cfg.dt, cfg.T, cfg.seed)
    return simulate_observation(signal, cfg.model, cfg.seed)


def _prior_draw_path(cfg: ExperimentConfig):
    x0 = substream(cfg.seed, "init").multivariate_normal(
        cfg.prior_true.mean.astype(float), cfg.prior_true.cov)
    signal = simulate_signal(cfg.model, x0, cfg.dt, cfg.T, cfg.seed)
    return simulate_observation(signal, cfg.model, cfg.seed)


def run_from_config(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> int:
    """Dispatch the configured experiment and write its artifact files.

    Writes a manifest.json recording the config hash, seed, library
    versions, every applied default, the produced files and the wall time.
    Returns the process exit code.
    """
    started = time.perf_counter()
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs: list[str] = []
    status = 0

    def emit_csv(obj, name):
        if "csv" in cfg.formats:
            obj.to_csv(out / name)
            outputs.append(name)

    def emit_json(obj, name):
        if "json" in cfg.formats:
            obj.to_json(out / name)
            outputs.append(name)

    kind = cfg.experiment
    if kind == "simulate":
        emit_csv(_simulate_path(cfg), "path.csv")
    elif kind == "kalman":
        obs = _prior_draw_path(cfg)
        emit_csv(obs, "path.csv")
        traj = run_kalman_bucy(obs, cfg.prior_true, cfg.model)
        emit_csv(traj, "trajectory.csv")
        innov = innovation_path(obs, traj, cfg.model)
        if "csv" in cfg.formats:
            header = ["t"] + [f"i{i+1}" for i in range(cfg.model.n)]
            write_csv(out / "innovation.csv", header,
                      np.hstack([obs.times[:, None], innov]))
            outputs.append("innovation.csv")
    elif kind == "pf":
        obs = _prior_draw_path(cfg)
        n_checks = int(np.floor(cfg.T / cfg.checkpoint_every + 1e-9))
        checkpoints = np.arange(n_checks + 1) * cfg.checkpoint_every
        run = run_particle_filter(obs, cfg.prior_true, cfg.model, cfg.particles,
                                  cfg.ess_threshold, seed=cfg.seed,
                                  checkpoint_times=checkpoints)
        emit_csv(run, "summary.csv")
        if "csv" in cfg.formats:
            for t, cloud in sorted(run.checkpoints.items()):
                name = f"cloud_t{format(t, 'g')}.csv"
                cloud.to_csv(out / name)
                outputs.append(name)
    elif kind == "twin":
        report = run_twin_filter(cfg.model, cfg.prior_true, cfg.prior_wrong,
                                 cfg.T, cfg.dt, cfg.seed,
                                 filter_kind=cfg.filter_kind, n_particles=cfg.particles,
                                 ess_threshold=cfg.ess_threshold,
                                 checkpoint_every=cfg.checkpoint_every)
        emit_csv(report, "report.csv")
        emit_json(report, "report.json")
    elif kind == "app2d":
        s = cfg.app2d
        result = run_appendix_d(lambda1=float(s["lambda1"]), lambda2=float(s["lambda2"]),
                                h_gain=float(s["h"]), obs_mode=s["obs_mode"],
                                T=cfg.T, dt=cfg.dt, seed=cfg.seed,
                                prior_true=cfg.prior_true, prior_wrong=cfg.prior_wrong,
                                threshold=float(s["threshold"]))
        emit_csv(result.report, "report.csv")
        emit_json(result.report, "report.json")
        if result.are is not None:
            emit_json(result.are, "are.json")
        if s["expect_stabilized"] is not None and result.stabilized != bool(s["expect_stabilized"]):
            status = 2
    elif kind == "prior-div":
        result = run_prior_divergence(cfg.model, cfg.prior_true, cfg.prior_wrong,
                                      cfg.T, cfg.dt)
        emit_csv(result, "prior_divergence.csv")
        if "json" in cfg.formats:
            rate = result.fitted_rate
            write_json(out / "prior_divergence.json",
                       {"fitted_rate": rate if np.isfinite(rate) else None})
            outputs.append("prior_divergence.json")
    elif kind == "nl-bound":
        report = run_nonlinear_boundedness(cfg.model, cfg.prior_true, cfg.prior_wrong,
                                           cfg.T, cfg.dt, cfg.replicas, cfg.seed,
                                           cfg.particles, cfg.ess_threshold,
                                           cfg.checkpoint_every)
        emit_csv(report, "ensemble.csv")
        emit_json(report, "ensemble.json")
    elif kind == "error-growth":
        s = cfg.error_growth
        params = ErrorGrowthParams(alpha=float(s["alpha"]), S=float(s["S"]),
                                   V_inf=float(s["V_inf"]),
                                   a_lorenz=s["a_lorenz"], V0=float(s["V0"]))
        table = compare_models(params, S_imperfect=float(s["S_imperfect"]),
                               T=cfg.T, dt=cfg.dt)
        emit_csv(table, "error_growth.csv")
    elif kind == "are":
        emit_json(solve_are(cfg.model), "are.json")
    else:  # pragma: no cover - kinds are validated upstream
        raise ValueError(f"unhandled experiment {kind!r}")

    write_json(out / "manifest.json", {
        "experiment": kind,
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "versions": {"fastab": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__,
                     "python": sys.version.split()[0]},
        "defaults_applied": cfg.defaults_applied,
        "outputs": sorted(outputs),
        "wall_time_s": time.perf_counter() - started,
        "exit_status": status,
    })
    return status


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastab",
        description="Filtering-stabilization experiments: simulate, filter, compare, report.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="enumerate experiment kinds")
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override numerics.seed")
        p.add_argument("--out", type=str, default=None, help="override output directory")
        p.add_argument("--dt", type=float, default=None, help="override numerics.dt")
        p.add_argument("--T", type=float, default=None, help="override numerics.T")
        p.add_argument("--particles", type=int, default=None,
                       help="override numerics.particles")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "list":
        for kind in EXPERIMENT_KINDS:
            print(kind)
        return 0

    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return 1
        if not isinstance(raw, dict):
            print("error: config top level must be a JSON object", file=sys.stderr)
            return 1
    else:
        raw = {}

    # flags override config fields
    raw["experiment"] = args.command
    numerics = dict(raw.get("numerics", {}))
    for flag, key in (("seed", "seed"), ("dt", "dt"), ("T", "T"), ("particles", "particles")):
        value = getattr(args, flag)
        if value is not None:
            numerics[key] = value
    raw["numerics"] = numerics
    if args.out is not None:
        output = dict(raw.get("output", {}))
        output["directory"] = args.out
        raw["output"] = output

    try:
        cfg = parse_config(json.dumps(raw))
        return run_from_config(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FastabError as exc:
        print(f"error [{type(exc).__module__}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
