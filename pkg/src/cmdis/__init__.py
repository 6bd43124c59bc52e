"""Diffusion inverse solvers on an analytic Gaussian-mixture prior.

The prior's score, posterior and probability-flow map are all available in
closed form or by exact integration, so every approximation a solver makes can
be scored against the true posterior.
"""

from .dynamics import ConsistencyFunction, ancestral_step, sample_unconditional, solve_pf_ode
from .errors import (CmdisError, ConfigError, IntegrationError, OrderingError, ShapeError,
                     SolverDivergence, TargetError, TrainingError)
from .mixture import GaussianMixture, PosteriorMixture
from .operators import MeasurementOperator, MlpNetwork, train_mlp
from .schedule import NoiseSchedule, bridge_sample, forward_perturb, make_schedule
from .solvers import Problem, SolverConfig, Trajectory, run_batch, solve

__version__ = "0.1.0"
