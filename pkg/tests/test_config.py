import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastab.config import EXPERIMENT_KINDS, parse_config
from fastab.errors import ConfigError


def parse(d):
    return parse_config(json.dumps(d))


MODEL_2D = {"F": [[-1.0, 0.0], [0.0, 1.0]], "H": [[0.0, 1.0]],
            "sigma": [[1.0, 0.0], [0.0, 1.0]]}
PRIORS_2D = {"true": {"mean": [0.0, 0.0], "cov": [[1.0, 0.0], [0.0, 1.0]]},
             "wrong": {"mean": [5.0, 5.0], "cov": [[4.0, 0.0], [0.0, 4.0]]}}


class TestParseConfig:
    def test_minimal_app2d_gets_documented_defaults(self):
        cfg = parse({"experiment": "app2d", "numerics": {"seed": 1}})
        assert cfg.dt == 1e-3
        assert cfg.T == 30.0
        assert cfg.app2d["threshold"] == 1e-2
        assert cfg.app2d["obs_mode"] == "unstable_only"
        assert cfg.defaults_applied["numerics.dt"] == 1e-3
        assert cfg.defaults_applied["numerics.T"] == 30.0
        assert cfg.defaults_applied["app2d.threshold"] == 1e-2

    def test_shape_mismatch_reports_both_shapes(self):
        bad = {"experiment": "kalman", "numerics": {"seed": 1},
               "model": {"F": [[1.0, 0.0], [0.0, 1.0]], "H": [[1.0, 0.0, 0.0]],
                         "sigma": [[1.0, 0.0], [0.0, 1.0]]},
               "priors": {"true": {"mean": [0.0, 0.0],
                                   "cov": [[1.0, 0.0], [0.0, 1.0]]}}}
        with pytest.raises(ConfigError) as exc:
            parse(bad)
        message = str(exc.value)
        assert "(1, 3)" in message and "(2, 2)" in message

    def test_missing_seed_rejected(self):
        with pytest.raises(ConfigError, match="seed is required"):
            parse({"experiment": "app2d"})

    def test_non_integer_seed_rejected(self):
        with pytest.raises(ConfigError, match="integer"):
            parse({"experiment": "app2d", "numerics": {"seed": 1.5}})

    def test_unknown_keys_rejected_everywhere(self):
        bad = {"experiment": "app2d", "numerics": {"seed": 1, "dtt": 0.1},
               "app2d": {"lambda3": 2.0}, "banana": True}
        with pytest.raises(ConfigError) as exc:
            parse(bad)
        msg = str(exc.value)
        assert "dtt" in msg and "lambda3" in msg and "banana" in msg

    def test_every_violation_reported_not_just_first(self):
        bad = {"experiment": "twin", "numerics": {"seed": 1, "dt": -1.0}}
        with pytest.raises(ConfigError) as exc:
            parse(bad)
        assert len(exc.value.violations) >= 3   # dt, model, priors

    def test_unused_blocks_rejected(self):
        with pytest.raises(ConfigError, match="not used"):
            parse({"experiment": "error-growth", "numerics": {"seed": 1},
                   "model": MODEL_2D})
        with pytest.raises(ConfigError, match="not used"):
            parse({"experiment": "app2d", "numerics": {"seed": 1},
                   "model": MODEL_2D})

    def test_prior_dimension_cross_checked(self):
        bad = {"experiment": "kalman", "numerics": {"seed": 1}, "model": MODEL_2D,
               "priors": {"true": {"mean": [0.0], "cov": [[1.0]]}}}
        with pytest.raises(ConfigError, match="dimension"):
            parse(bad)

    def test_twin_roundtrip(self):
        cfg = parse({"experiment": "twin", "numerics": {"seed": 9, "T": 5.0},
                     "model": MODEL_2D, "priors": PRIORS_2D,
                     "filter": "particle"})
        assert cfg.filter_kind == "particle"
        again = parse_config(cfg.to_json())
        assert again.canonical == cfg.canonical
        assert again.sha256() == cfg.sha256()
        assert again.defaults_applied == {}    # everything explicit now

    def test_nonlinear_families_parse(self):
        model = dict(MODEL_2D)
        model["nonlinear_drift"] = {"kind": "tanh", "amplitude": 0.5}
        model["nonlinear_obs"] = {"kind": "constant", "offset": [1.0]}
        cfg = parse({"experiment": "pf", "numerics": {"seed": 2},
                     "model": model,
                     "priors": {"true": PRIORS_2D["true"]}})
        assert cfg.model.nonlinear_drift.kind == "tanh"
        assert cfg.model.nonlinear_obs.offset == (1.0,)

    def test_kalman_rejects_nonaffine_model(self):
        model = dict(MODEL_2D)
        model["nonlinear_drift"] = {"kind": "sine", "amplitude": 0.5}
        with pytest.raises(ConfigError, match="constant"):
            parse({"experiment": "kalman", "numerics": {"seed": 2},
                   "model": model, "priors": {"true": PRIORS_2D["true"]}})

    def test_invalid_json_reported(self):
        with pytest.raises(ConfigError, match="JSON"):
            parse_config("{not json")

    def test_simulate_requires_x0(self):
        with pytest.raises(ConfigError, match="x0"):
            parse({"experiment": "simulate", "numerics": {"seed": 1},
                   "model": MODEL_2D})

    @given(seed=st.integers(min_value=0, max_value=2**63 - 1),
           dt=st.sampled_from([1e-3, 1e-2, 0.05]),
           T=st.sampled_from([1.0, 5.0, 20.0]),
           kind=st.sampled_from(["app2d", "error-growth"]))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_idempotent(self, seed, dt, T, kind):
        cfg = parse({"experiment": kind,
                     "numerics": {"seed": seed, "dt": dt, "T": T}})
        again = parse_config(cfg.to_json())
        assert again.canonical == cfg.canonical
        third = parse_config(again.to_json())
        assert third.canonical == again.canonical


class TestKindsList:
    def test_all_kinds_known(self):
        assert set(EXPERIMENT_KINDS) == {"simulate", "kalman", "pf", "twin", "app2d",
                                         "prior-div", "nl-bound", "error-growth", "are"}

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError, match="experiment"):
            parse({"experiment": "frobnicate", "numerics": {"seed": 1}})
