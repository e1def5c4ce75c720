"""fastab: a continuous-time stochastic filtering laboratory.

Signal/observation SDE simulation, exact Kalman-Bucy filtering with
Riccati/ARE machinery, bootstrap particle filters, Wasserstein-2
diagnostics, twin-filter stabilization experiments and forecast
error-growth models, behind one config-driven CLI.
"""

__version__ = "0.1.0"

from .errors import (AreConvergenceError, BlowUpError, ConfigError, FastabError,
                     NonGaussianPushForwardError, RiccatiStepError,
                     UndetectablePairError, UnstabilizablePairError,
                     WeightCollapseError)
from .models import (BoundedNonlinearity, GaussianMeasure, ModelSpec, PathRecord,
                     push_forward_moments, simulate_observation, simulate_signal)
from .kalman import (AreSolution, KalmanTrajectory, check_detectability,
                     check_stabilizability, estimate_psi_decay, innovation_path,
                     riccati_flow, run_kalman_bucy, solve_are)
from .particles import (ParticleCloud, cloud_moments, ess, pf_step,
                        run_particle_filter, systematic_resample)
from .wasserstein import (moment_bound_check, second_moment, w2_empirical,
                          w2_gaussian)
from .experiments import (StabilizationReport, occupation_time, run_appendix_d,
                          run_nonlinear_boundedness, run_prior_divergence,
                          run_twin_filter)
from .error_growth import (ErrorGrowthParams, compare_models, fit_error_model,
                           integrate_error_model, leith_closed_form)
from .config import ExperimentConfig, parse_config
from .streams import sub_seed, substream

__all__ = [name for name in dir() if not name.startswith("_")]
