"""Robust stochastic-optimization variational inference with convergence diagnostics."""
from .diagnostics import (
    DiagnosticsReport, IterateChains, diagnose, ess, gpd_fit, khat_iterates, mcse, psis_khat,
    split_rhat,
)
from .families import VariationalParams, entropy, log_density, sample
from .gradients import ElboEstimate, estimate_elbo, estimate_grad
from .metrics import MomentDistance, moment_distance, params_distance, variational_moments
from .optimizers import DivergenceError, OptimizerState
from .workflow import RunResult, WorkflowConfig, iterate_average, ou_theory_check, run

__version__ = "0.1.0"
