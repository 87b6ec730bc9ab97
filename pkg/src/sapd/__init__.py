"""Constrained online convex optimization with structure-adaptive primal-dual learners."""

__version__ = "0.1.0"

from .core import (BoxDomain, DimensionError, FunctionConstraint, LinearConstraint, LinearLoss,
                   QuadraticLoss, constraint_value_grad, loss_value_grad, project, sup_distance)
from .environments import (ConfigError, Round, ScenarioConfig, Stream, gen_lower_bound,
                           gen_periodic, gen_smooth, gen_sparse, generate, inject_noise)
from .estimators import EstimatorConfig, EstimatorState, change_point_test, detect_period, observe_delta
from .learners import (AlgoConfig, LearnerState, RunAbort, estimate_slater, pd_fixed_step, run,
                       sapd_step, vq_oco_step)
from .metrics import (RunTrace, aggregate, cumulative_violation, hindsight_optimum, scaling_exponent,
                      static_regret)

__all__ = [
    "BoxDomain", "DimensionError", "FunctionConstraint", "LinearConstraint", "LinearLoss",
    "QuadraticLoss", "constraint_value_grad", "loss_value_grad", "project", "sup_distance",
    "ConfigError", "Round", "ScenarioConfig", "Stream", "gen_lower_bound", "gen_periodic",
    "gen_smooth", "gen_sparse", "generate", "inject_noise",
    "EstimatorConfig", "EstimatorState", "change_point_test", "detect_period", "observe_delta",
    "AlgoConfig", "LearnerState", "RunAbort", "estimate_slater", "pd_fixed_step", "run",
    "sapd_step", "vq_oco_step",
    "RunTrace", "aggregate", "cumulative_violation", "hindsight_optimum", "scaling_exponent",
    "static_regret",
]
