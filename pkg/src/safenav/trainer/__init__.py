"""PPO training stack: config, rewards, losses, vectorised environments and the update loop."""
from .config import ConfigError, TrainConfig, load_config
from .env import RandomizationDraw, VecNavEnv, sample_randomization
from .ppo import LossReport, Trainer, TransitionBatch, ppo_update, run_episode_loop, total_loss
from .rewards import RewardBreakdown, StuckTracker, compute_reward

__all__ = [
    "ConfigError", "TrainConfig", "load_config", "RandomizationDraw", "VecNavEnv", "sample_randomization",
    "LossReport", "Trainer", "TransitionBatch", "ppo_update", "run_episode_loop", "total_loss",
    "RewardBreakdown", "StuckTracker", "compute_reward",
]
