"""Held-out evaluation: SR/CR/TR over randomized trials with a deterministic policy.

Evaluation differs from training in a few fixed ways: the smaller 0.35 m
footprint, a 30 s timeout, a 0.5 s goal-stay, no domain randomisation, and the
policy mean instead of a sampled command.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .policy import ActorCritic, HistoryBuffer, config_hash, load_checkpoint, sizes_from_dict
from .shield import ShieldParams, build_constraints, fuse_lse, project_damped
from .trainer.config import TrainConfig
from .trainer.env import VecNavEnv, POLICY_DT
from .world import FOOTPRINT_EVAL, Scenario, empty_scenario, generate_scenario

EVAL_TIMEOUT = 30.0
EVAL_GOAL_STAY = 0.5
SEED_GROUPS = 3
# evaluation layouts come from a seed range that the training pool never touches
EVAL_SEED_OFFSET = 1_000_000

OUTCOMES = {1: "success", 2: "collision", 3: "timeout"}


class ConfigHashMismatch(RuntimeError):
    def __init__(self, checkpoint_hash: str, config_hash_: str):
        self.checkpoint_hash = checkpoint_hash
        self.config_hash = config_hash_
        super().__init__(f"checkpoint config hash {checkpoint_hash} does not match config hash {config_hash_}")


@dataclass
class TrialResult:
    index: int
    group: int
    scenario_seed: int
    outcome: str
    duration: float
    path_length: float


@dataclass
class EvalReport:
    difficulty: str
    trials: int
    seed: int
    seeds: list[int]
    sr: float
    cr: float
    tr: float
    sr_mean: float
    sr_std: float
    cr_mean: float
    cr_std: float
    tr_mean: float
    tr_std: float
    avg_speed: float
    results: list[TrialResult] = field(default_factory=list)

    def to_dict(self, with_trials: bool = False) -> dict:
        d = asdict(self)
        if not with_trials:
            d.pop("results")
        return d

    def to_json(self, with_trials: bool = False) -> str:
        return json.dumps(self.to_dict(with_trials), sort_keys=True, indent=2)

    def table_row(self) -> str:
        return (f"{self.difficulty:<7} SR {self.sr_mean:5.1f} +/- {self.sr_std:4.1f}  "
                f"CR {self.cr_mean:5.1f} +/- {self.cr_std:4.1f}  TR {self.tr_mean:5.1f} +/- {self.tr_std:4.1f}  "
                f"AS {self.avg_speed:.2f} m/s  (n={self.trials})")


def eval_scenarios(difficulty: str, trials: int, seed: int) -> list[tuple[int, int, Scenario]]:
    """(group, scenario seed, scenario) per trial; trials are split into contiguous seed groups."""
    out = []
    for g, chunk in enumerate(np.array_split(np.arange(trials), SEED_GROUPS)):
        for j in chunk:
            s = EVAL_SEED_OFFSET + seed * 100_000 + int(j)
            out.append((g, s, generate_scenario(difficulty, s)))
    return out


class PolicyRunner:
    """Deterministic policy-plus-shield controller used for evaluation and trajectory dumps."""

    def __init__(self, net: ActorCritic, params, cfg: TrainConfig):
        self.net, self.params, self.cfg = net, params, cfg
        self.shield = ShieldParams(d_safe=cfg.d_safe, k=cfg.k, eps_d=cfg.eps_d, alpha_min=cfg.alpha_min)

    def act(self, obs, hist, ranges):
        """Returns (u_s, h, alpha, eta) for a batch of observations."""
        out, _ = self.net.forward(self.params, obs, hist)
        fb = fuse_lse(build_constraints(ranges, self.shield), self.shield.k)
        if self.cfg.use_shield:
            so = project_damped(out.mean, fb, out.alpha, self.shield.eps_d)
            return so.u_s, fb.h, out.alpha, so.eta
        return out.mean, fb.h, out.alpha, np.zeros(len(obs))


def make_eval_env(scenarios: list[Scenario], cfg: TrainConfig) -> VecNavEnv:
    return VecNavEnv(
        len(scenarios), difficulty=cfg.difficulty, seed=cfg.seed, footprint=FOOTPRINT_EVAL,
        episode_duration=EVAL_TIMEOUT, goal_radius=cfg.goal_radius, goal_stay=EVAL_GOAL_STAY,
        randomize=False, use_acsi=False, stuck_window=cfg.stuck_window,
        u_min=cfg.u_min, u_max=cfg.u_max, auto_reset=False, scenarios=scenarios,
    )


def rollout_outcomes(runner, scenarios: list[Scenario], cfg: TrainConfig, trace: int | None = None):
    """Run one episode per scenario until every env is finished.

    Returns (env, trajectory rows for env ``trace`` or None).
    """
    env = make_eval_env(scenarios, cfg)
    hist = HistoryBuffer(env.n)
    rows = []
    while not env.finished.all():
        u, h, alpha, eta = runner.act(env.obs, hist.data, env.obs_ranges)
        if trace is not None and not env.finished[trace]:
            t = env.tick[trace] * POLICY_DT
            rows.append([t, *env.pose[trace], *env.vel[trace], h[trace], alpha[trace], eta[trace]])
        obs = env.obs.copy()
        env.step(u)
        hist.push(obs)
    if trace is not None:
        t = env.tick[trace] * POLICY_DT
        rows.append([t, *env.pose[trace], *env.vel[trace], np.nan, np.nan, np.nan])
    return env, (rows if trace is not None else None)


def _rates(outcomes: list[str]) -> tuple[float, float, float]:
    n = len(outcomes)
    if n == 0:
        return 0.0, 0.0, 0.0
    return tuple(100.0 * sum(o == k for o in outcomes) / n for k in ("success", "collision", "timeout"))


def evaluate(runner, cfg: TrainConfig, difficulty: str, trials: int = 100, seed: int = 0,
             scenarios: list[tuple[int, int, Scenario]] | None = None) -> EvalReport:
    if trials <= 0:
        raise ValueError("trials must be positive")
    items = scenarios if scenarios is not None else eval_scenarios(difficulty, trials, seed)
    env, _ = rollout_outcomes(runner, [s for _, _, s in items], cfg)
    results = []
    for i, (g, s, _) in enumerate(items):
        duration = float(env.finish_tick[i] * POLICY_DT)
        results.append(TrialResult(i, g, s, OUTCOMES[int(env.outcome[i])], duration, float(env.path_length[i])))
    sr, cr, tr = _rates([r.outcome for r in results])
    per_group = np.array([_rates([r.outcome for r in results if r.group == g])
                          for g in sorted({r.group for r in results})])
    mean, std = per_group.mean(axis=0), per_group.std(axis=0)
    speeds = [r.path_length / r.duration for r in results if r.outcome == "success" and r.duration > 0]
    return EvalReport(
        difficulty=difficulty, trials=len(results), seed=seed, seeds=[r.scenario_seed for r in results],
        sr=sr, cr=cr, tr=tr, sr_mean=float(mean[0]), sr_std=float(std[0]), cr_mean=float(mean[1]),
        cr_std=float(std[1]), tr_mean=float(mean[2]), tr_std=float(std[2]),
        avg_speed=float(np.mean(speeds)) if speeds else 0.0, results=results,
    )


def load_policy(checkpoint, cfg: TrainConfig | None = None) -> PolicyRunner:
    """Load a checkpoint; if ``cfg`` is given its hash must match the one stored with the weights."""
    params, meta = load_checkpoint(checkpoint)
    stored = TrainConfig.from_dict(meta["config"]) if meta.get("config") else TrainConfig()
    if cfg is not None and config_hash(cfg.to_dict()) != meta["config_hash"]:
        raise ConfigHashMismatch(meta["config_hash"], config_hash(cfg.to_dict()))
    net = ActorCritic(sizes_from_dict(meta["sizes"]))
    return PolicyRunner(net, params, cfg or stored)


class ConstantPolicy:
    """Fixed command for every env, useful as a baseline (zero command -> all timeouts)."""

    def __init__(self, command=(0.0, 0.0, 0.0)):
        self.command = np.asarray(command, dtype=np.float64)

    def act(self, obs, hist, ranges):
        n = len(obs)
        return np.tile(self.command, (n, 1)), np.zeros(n), np.ones(n), np.zeros(n)


class GoalSeekingPolicy:
    """Scripted controller: turn toward the goal and drive, filtered by the shield.

    Reads the body-frame goal vector from the observation, so it needs no map.
    """

    def __init__(self, speed: float = 1.0, turn_gain: float = 2.0, alpha: float = 1.0,
                 shield: ShieldParams | None = None):
        self.speed, self.turn_gain, self.alpha = speed, turn_gain, alpha
        self.shield = shield or ShieldParams()

    def act(self, obs, hist, ranges):
        n = len(obs)
        gx, gy = obs[:, 9], obs[:, 10]
        bearing = np.arctan2(gy, gx)
        dist = np.hypot(gx, gy)
        vx = self.speed * np.clip(dist, 0.0, 1.0) * np.clip(np.cos(bearing), 0.0, None)
        u = np.stack([vx, np.zeros(n), np.clip(self.turn_gain * bearing, -1.0, 1.0)], axis=1)
        alpha = np.full(n, self.alpha)
        fb = fuse_lse(build_constraints(ranges, self.shield), self.shield.k)
        so = project_damped(u, fb, alpha, self.shield.eps_d)
        return so.u_s, fb.h, alpha, so.eta


def empty_room_trials(trials: int, seed: int = 0) -> list[tuple[int, int, Scenario]]:
    """Obstacle-free rooms with randomized start, goal and heading."""
    rng = np.random.default_rng(seed)
    out = []
    for j, g in enumerate(np.repeat(np.arange(SEED_GROUPS), -(-trials // SEED_GROUPS))[:trials]):
        while True:
            start, goal = rng.uniform(1.0, 9.0, 2), rng.uniform(1.0, 9.0, 2)
            if np.linalg.norm(goal - start) >= 4.0:
                break
        heading = float(rng.uniform(-np.pi, np.pi))
        out.append((int(g), j, empty_scenario(start=tuple(start), goal=tuple(goal), heading=heading)))
    return out
