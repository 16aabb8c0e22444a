"""Direct multi-turn preference optimization on exactly solvable tabular MDPs."""

from dmpo_lab.errors import (
    ConfigError,
    DmpoLabError,
    GenerationExhaustedError,
    SupportMismatchError,
    UpdateRefusedError,
    ValidationError,
)
from dmpo_lab.mdp import Mdp, RolloutReport, Trajectory, discounted_return, make_env, rollout
from dmpo_lab.policy import TabularPolicy, grad_log_prob, log_prob, traj_log_ratio_terms

__all__ = [
    "ConfigError",
    "DmpoLabError",
    "GenerationExhaustedError",
    "Mdp",
    "RolloutReport",
    "SupportMismatchError",
    "TabularPolicy",
    "Trajectory",
    "UpdateRefusedError",
    "ValidationError",
    "discounted_return",
    "grad_log_prob",
    "log_prob",
    "make_env",
    "rollout",
    "traj_log_ratio_terms",
]

__version__ = "0.1.0"
