"""Training configuration: defaults, JSON loading, env-var overrides and validation."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..policy import NetworkSizes, config_hash

ENV_PREFIX = "SAFENAV_"


class ConfigError(ValueError):
    def __init__(self, problems: dict[str, str]):
        self.problems = problems
        detail = "; ".join(f"{k}: {v}" for k, v in sorted(problems.items()))
        super().__init__(f"invalid config keys: {detail}")


@dataclass
class TrainConfig:
    seed: int = 0
    difficulty: str = "easy"
    n_envs: int = 64
    total_steps: int = 1_200_000
    rollout_len: int = 32

    # PPO
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatches: int = 4
    learning_rate: float = 3e-4
    clip_ratio: float = 0.2
    value_coef: float = 1.0
    entropy_coef: float = 0.003
    max_grad_norm: float = 1.0
    reward_scale: float = 0.1
    # goal-stay endings are cut like time limits: the value of staying at the goal is bootstrapped
    bootstrap_success: bool = True

    # auxiliary losses
    lambda_shield: float = 0.1
    lambda_reg: float = 1.0
    lambda_pi: float = 0.05
    lambda_v: float = 0.005
    u_min: list = field(default_factory=lambda: [-0.5, -0.8, -1.0])
    u_max: list = field(default_factory=lambda: [1.7, 0.8, 1.0])

    # shield
    d_safe: float = 0.45
    k: float = 10.0
    eps_d: float = 1.0
    alpha_min: float = 0.1

    # collision-state replay
    p_min: float = 0.1
    p_max: float = 0.5
    d_up: float = 0.5
    d_down: float = 2.0
    curriculum_step: float = 0.05
    t_back: float = 1.0
    t_hist: float = 3.0

    # episodes
    episode_duration: float = 60.0
    goal_radius: float = 0.5
    goal_stay: float = 2.0
    footprint: float = 0.40
    stuck_window: int = 10
    randomize: bool = True
    scenario_pool: int = 512

    # ablation switches
    use_shield: bool = True
    use_acsi: bool = True
    use_reg: bool = True

    # network
    encoder: list = field(default_factory=lambda: [128, 32])
    backbone: list = field(default_factory=lambda: [256, 128])
    nav_head: list = field(default_factory=lambda: [64])
    alpha_head: list = field(default_factory=lambda: [32])
    critic: list = field(default_factory=lambda: [256, 128])
    log_std_init: float = -0.7
    net_dtype: str = "float32"

    # bookkeeping
    checkpoint_every: int = 50

    def network_sizes(self) -> NetworkSizes:
        return NetworkSizes(encoder=tuple(self.encoder), backbone=tuple(self.backbone),
                            nav_head=tuple(self.nav_head), alpha_head=tuple(self.alpha_head),
                            critic=tuple(self.critic), log_std_init=self.log_std_init)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def ablate(self, name: str | None) -> "TrainConfig":
        if name in (None, "", "none"):
            return self
        if name == "no-shield":
            self.use_shield = False
            self.lambda_shield = 0.0
        elif name == "no-acsi":
            self.use_acsi = False
        elif name == "no-reg":
            self.use_reg = False
            self.lambda_reg = 0.0
        else:
            raise ConfigError({"ablate": f"unknown ablation {name!r}"})
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        problems: dict[str, str] = {}
        values = {}
        for key, value in data.items():
            if key not in known:
                problems[key] = "unknown key"
                continue
            expected = type(getattr(defaults, key))
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if expected is int and isinstance(value, bool):
                problems[key] = "expected int, got bool"
                continue
            if not isinstance(value, expected):
                problems[key] = f"expected {expected.__name__}, got {type(value).__name__}"
                continue
            values[key] = value
        cfg = cls(**values)
        problems.update(cfg._semantic_problems())
        if problems:
            raise ConfigError(problems)
        return cfg

    def _semantic_problems(self) -> dict[str, str]:
        p = {}
        if self.difficulty not in ("easy", "medium", "hard"):
            p["difficulty"] = f"must be easy/medium/hard, got {self.difficulty!r}"
        for name in ("n_envs", "total_steps", "rollout_len", "epochs", "minibatches", "stuck_window",
                     "scenario_pool"):
            if getattr(self, name) <= 0:
                p[name] = "must be positive"
        for name in ("d_safe", "k", "eps_d", "alpha_min", "learning_rate", "footprint",
                     "episode_duration", "goal_stay", "goal_radius"):
            if not getattr(self, name) > 0:
                p[name] = "must be strictly positive"
        for name in ("u_min", "u_max"):
            v = getattr(self, name)
            if len(v) != 3 or not all(isinstance(x, (int, float)) for x in v):
                p[name] = "must be a list of 3 numbers"
        if "u_min" not in p and "u_max" not in p and any(a > b for a, b in zip(self.u_min, self.u_max)):
            p["u_min"] = "must be componentwise <= u_max"
        if self.net_dtype not in ("float32", "float64"):
            p["net_dtype"] = "must be float32 or float64"
        if not 0 <= self.p_min <= self.p_max <= 1:
            p["p_min"] = "need 0 <= p_min <= p_max <= 1"
        if (self.n_envs * self.rollout_len) % self.minibatches:
            p["minibatches"] = "must divide n_envs * rollout_len"
        return p


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    known = {f.name for f in fields(TrainConfig)}
    out = {}
    for key, raw in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name in known:
                out[name] = _parse_env_value(raw)
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> TrainConfig:
    """Defaults <- JSON file <- ``SAFENAV_*`` environment variables <- explicit overrides."""
    data: dict = {}
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError({"<file>": f"{path}: {exc}"}) from exc
        if not isinstance(loaded, dict):
            raise ConfigError({"<file>": "top level must be a JSON object"})
        data.update(loaded)
    data.update(env_overrides(environ))
    data.update(overrides or {})
    return TrainConfig.from_dict(data)
