"""Shielded, curriculum-driven reinforcement learning for 2D lidar navigation."""
from .acsi import CurriculumState, FullReset, ReplayCritical, StateHistoryRing, on_collision, update_curriculum
from .evaluation import EvalReport, GoalSeekingPolicy, PolicyRunner, evaluate, load_policy
from .policy import ActorCritic, NetworkSizes, load_checkpoint, save_checkpoint
from .shield import ShieldParams, build_constraints, fuse_lse, project_damped, shield_command, solve_qp_oracle
from .trainer.config import ConfigError, TrainConfig, load_config
from .trainer.ppo import Trainer
from .world import Scenario, cast_lidar, check_collision, empty_scenario, generate_scenario, step_dynamics

__version__ = "0.1.0"

__all__ = [
    "ActorCritic", "ConfigError", "CurriculumState", "EvalReport", "FullReset", "GoalSeekingPolicy",
    "NetworkSizes", "PolicyRunner", "ReplayCritical", "Scenario", "ShieldParams", "StateHistoryRing",
    "TrainConfig", "Trainer", "build_constraints", "cast_lidar", "check_collision", "empty_scenario",
    "evaluate", "fuse_lse", "generate_scenario", "load_checkpoint", "load_config", "on_collision",
    "project_damped", "save_checkpoint", "shield_command", "solve_qp_oracle", "step_dynamics",
    "update_curriculum",
]
