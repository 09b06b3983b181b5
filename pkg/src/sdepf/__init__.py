"""Continuous-discrete particle filtering for SDE state-space models.

The state evolves as an Ito SDE between measurement times; importance
weights for arbitrary proposal drifts come from a measure-change
likelihood ratio accumulated along each Euler path, so no transition
densities are ever needed.  Conditionally linear-Gaussian sub-states and
conjugate static parameters can be marginalized in closed form.
"""

from .exceptions import (ConfigError, DegeneracyError, DiffusionError,
                         IntegrationError, SdepfError, SingularMatrixError)
from .sde import (BrownianIncrements, DiffusionSpec, OdeField, SdeModel,
                  SplitSdeModel, TimeGrid, euler_maruyama_step, integrate_ode,
                  integrate_sde, sample_brownian_increments)
from .girsanov import (CoupledResult, ImportanceSpec, SplitCoupledResult,
                       estimate_kl, prior_proposal, propagate_coupled,
                       propagate_coupled_split, step_llr, step_llr_singular,
                       step_scaled_process)
from .filtering import (FilterConfig, FilterResult, MeasurementModel,
                        Particle, ParticleSet, StepStats, SummaryRow,
                        effective_sample_size, finish_step,
                        gaussian_measurement, init_particle_set,
                        normalize_log_weights, run_filter, seed_streams,
                        sir_split_step, sir_step, systematic_resample,
                        systematic_resample_indices)
from .raoblackwell import (CondGaussModel, ConjugateFamily, GaussianBlock,
                           eval_mixture, gamma_poisson_family,
                           init_rb_gauss_set, invchi2_family, kalman_update,
                           propagate_gaussian_block, rb_gauss_step,
                           rb_param_step, repair_cov)
from .proposals import (BridgeSpec, EkfMoments, build_bridge, ekf_condition,
                        ekf_predict)
from . import models

__version__ = "0.1.0"

__all__ = [
    "BridgeSpec", "BrownianIncrements", "CondGaussModel", "ConfigError",
    "ConjugateFamily", "CoupledResult", "DegeneracyError", "DiffusionError",
    "DiffusionSpec", "EkfMoments", "FilterConfig", "FilterResult",
    "GaussianBlock", "ImportanceSpec", "IntegrationError", "MeasurementModel",
    "OdeField", "Particle", "ParticleSet", "SdeModel", "SdepfError",
    "SingularMatrixError", "SplitCoupledResult", "SplitSdeModel", "StepStats",
    "SummaryRow", "TimeGrid", "build_bridge", "effective_sample_size",
    "ekf_condition", "ekf_predict", "estimate_kl", "euler_maruyama_step",
    "eval_mixture", "gamma_poisson_family", "gaussian_measurement",
    "init_particle_set", "init_rb_gauss_set", "integrate_ode",
    "integrate_sde", "invchi2_family", "kalman_update", "models",
    "normalize_log_weights", "prior_proposal", "propagate_coupled",
    "propagate_coupled_split", "propagate_gaussian_block", "rb_gauss_step",
    "rb_param_step", "repair_cov", "run_filter",
    "sample_brownian_increments",
    "finish_step", "seed_streams", "sir_split_step", "sir_step", "step_llr",
    "step_llr_singular", "step_scaled_process", "systematic_resample",
    "systematic_resample_indices",
]
