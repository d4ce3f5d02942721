"""Bilevel meta-reinforcement learning on tabular MDPs with exact hypergradients."""
from .adapt import AdaptConfig, AdaptResult, LambdaTooSmall, adapt, maml_one_step, repeat_adapt
from .analysis import (AssumptionViolation, analyze, task_variance, teog, theorem_lambda,
                       theoretical_bound)
from .hypergrad import ConcavityError, hypergrad, hypergrad_linear, hypergrad_tabular
from .mdp import (NumericalError, TabularMdp, accumulated_reward, policy_evaluation,
                  state_visitation, value_iteration)
from .meta import MetaTrainConfig, meta_train, meta_train_batched, theorem_step_size
from .policy import SoftmaxPolicy, policy_distance
from .tasks import GridSpec, TaskDistribution, generate_frozen_lake, preset_distribution

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "AdaptResult", "AssumptionViolation", "ConcavityError", "GridSpec",
    "LambdaTooSmall", "MetaTrainConfig", "NumericalError", "SoftmaxPolicy", "TabularMdp",
    "TaskDistribution", "accumulated_reward", "adapt", "analyze", "generate_frozen_lake",
    "hypergrad", "hypergrad_linear", "hypergrad_tabular", "maml_one_step", "meta_train",
    "meta_train_batched", "policy_distance", "policy_evaluation", "preset_distribution",
    "repeat_adapt", "state_visitation", "task_variance", "teog", "theorem_lambda",
    "theorem_step_size", "theoretical_bound", "value_iteration",
]
