"""Vectorised navigation environments: randomisation, goal-stay episodes and collision replay."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace

import numpy as np

from .. import acsi
from ..acsi import CurriculumState, ReplayCritical, StateHistoryRing
from ..policy import OBS_DIM
from ..world import (
    FOOTPRINT_TRAIN, OBSTACLE_COUNT, RANGE_MAX, SIM_DT, TAU_V, Difficulty, FreeSpace, RobotState,
    Scenario, cast_lidar_batch, clearance_batch, generate_scenario, goal_in_body_frame,
    pad_obstacles, step_dynamics_batch,
)
from .rewards import RewardBreakdown, StuckTracker, compute_reward

POLICY_DT = 0.1
SUBSTEPS = int(round(POLICY_DT / SIM_DT))
EXTERO_PERIOD_MS = 100.0
GOAL_CLIP = 5.0
MAX_PAD = max(OBSTACLE_COUNT.values())

RANDOMIZATION_RANGES = {
    "ray_delay_ms": (40.0, 80.0),
    "gravity_noise": (-0.05, 0.05),
    "linvel_noise": (-0.1, 0.1),
    "angvel_noise": (-0.1, 0.1),
    "friction": (-0.2, 1.25),
    "mass_kg": (-1.5, 1.5),
}


@dataclass(frozen=True)
class RandomizationDraw:
    """One episode's draw. Noise fields are amplitudes of per-observation uniform noise."""

    ray_delay_ms: float = 0.0
    gravity_noise: float = 0.0
    linvel_noise: float = 0.0
    angvel_noise: float = 0.0
    friction: float = 0.0
    mass_kg: float = 0.0

    @property
    def delay_ticks(self) -> int:
        return int(math.floor(self.ray_delay_ms / EXTERO_PERIOD_MS + 0.5))

    def tau(self, base: float = TAU_V) -> float:
        # no contact model: friction and payload only slow down velocity tracking
        return base * (1.0 + 0.1 * self.mass_kg) * float(np.clip(1.0 / (1.0 + self.friction), 0.5, 2.0))


NOMINAL = RandomizationDraw()


def sample_randomization(rng: np.random.Generator) -> RandomizationDraw:
    lo = {k: v[0] for k, v in RANDOMIZATION_RANGES.items()}
    hi = {k: v[1] for k, v in RANDOMIZATION_RANGES.items()}
    draw = {k: float(rng.uniform(lo[k], hi[k])) for k in RANDOMIZATION_RANGES}
    # noise ranges are symmetric; store the amplitude
    for k in ("gravity_noise", "linvel_noise", "angvel_noise"):
        draw[k] = hi[k]
    return RandomizationDraw(**draw)


def build_observation(vel: np.ndarray, ranges: np.ndarray, goal_body: np.ndarray,
                      noise: np.ndarray | None = None) -> np.ndarray:
    """Pack (B, 52) observations: v_B, w_B, g_B, clipped local goal, normalised ranges."""
    B = len(vel)
    obs = np.zeros((B, OBS_DIM))
    obs[:, 0:2] = vel[:, 0:2]
    obs[:, 5] = vel[:, 2]
    obs[:, 8] = -1.0
    if noise is not None:
        obs[:, 0:9] += noise
    norm = np.linalg.norm(goal_body, axis=1, keepdims=True)
    scale = np.where(norm > GOAL_CLIP, GOAL_CLIP / np.where(norm > 0, norm, 1.0), 1.0)
    obs[:, 9:11] = goal_body * scale
    obs[:, 11:] = ranges / RANGE_MAX
    return obs


@functools.lru_cache(maxsize=4096)
def cached_scenario(difficulty: str, seed: int) -> Scenario:
    return generate_scenario(difficulty, seed)


@functools.lru_cache(maxsize=4096)
def cached_free_space(difficulty: str, seed: int) -> FreeSpace:
    s = cached_scenario(difficulty, seed)
    return FreeSpace(s.circles, s.boxes, s.extent)


@dataclass
class StepResult:
    next_obs: np.ndarray  # observation after the step, before any reset
    next_ranges: np.ndarray
    reward: RewardBreakdown
    terminal: np.ndarray  # collision: no bootstrap
    success: np.ndarray  # goal-stay satisfied: no bootstrap
    truncated: np.ndarray  # time limit: bootstrap from next_obs
    goal_distance: np.ndarray
    replayed: np.ndarray

    @property
    def done(self) -> np.ndarray:
        return self.terminal | self.success | self.truncated


class VecNavEnv:
    """``n`` independent rooms stepped in lock-step at the 10 Hz policy rate.

    With ``auto_reset`` every finished episode is immediately replaced (training);
    without it each env runs one episode and then freezes (evaluation).
    """

    def __init__(self, n_envs: int, *, difficulty: str = "easy", seed: int = 0,
                 footprint: float = FOOTPRINT_TRAIN, episode_duration: float = 60.0,
                 goal_radius: float = 0.5, goal_stay: float = 2.0, randomize: bool = True,
                 use_acsi: bool = True, curriculum: CurriculumState | None = None,
                 curriculum_step: float = 0.05, t_back: float = acsi.T_BACK,
                 t_hist: float = acsi.T_HIST, stuck_window: int = 10, scenario_pool: int = 512,
                 u_min=(-0.5, -0.8, -1.0), u_max=(1.7, 0.8, 1.0), auto_reset: bool = True,
                 scenarios: list[Scenario] | None = None):
        self.n = n_envs
        self.difficulty = Difficulty.parse(difficulty).value
        self.footprint = footprint
        self.max_ticks = int(round(episode_duration / POLICY_DT))
        self.goal_radius = goal_radius
        self.stay_ticks = int(round(goal_stay / POLICY_DT))
        self.randomize = randomize
        self.use_acsi = use_acsi
        self.curriculum_step = curriculum_step
        self.t_back = t_back
        self.scenario_pool = scenario_pool
        self.u_min = np.asarray(u_min, dtype=np.float64)
        self.u_max = np.asarray(u_max, dtype=np.float64)
        self.auto_reset = auto_reset
        self.fixed_scenarios = scenarios
        if scenarios is not None and len(scenarios) != n_envs:
            raise ValueError("need one scenario per env")

        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence([seed, 0xE7]).spawn(n_envs)]
        self.curricula = [curriculum or CurriculumState() for _ in range(n_envs)]
        self.rings = [StateHistoryRing(t_hist, POLICY_DT) for _ in range(n_envs)]
        self.stuck = StuckTracker(n_envs, stuck_window)

        self.extent = (0.0, 0.0, 10.0, 10.0)
        self.circles = np.zeros((n_envs, MAX_PAD, 3))
        self.boxes = np.zeros((n_envs, MAX_PAD, 4))
        self.scenario_ids = np.zeros(n_envs, dtype=np.int64)
        self.pose = np.zeros((n_envs, 3))
        self.vel = np.zeros((n_envs, 3))
        self.goal = np.zeros((n_envs, 2))
        self.tick = np.zeros(n_envs, dtype=np.int64)
        self.stay = np.zeros(n_envs, dtype=np.int64)
        self.tau = np.full(n_envs, TAU_V)
        self.delay = np.zeros(n_envs, dtype=np.int64)
        self.noise_amp = np.zeros((n_envs, 9))
        self.scan_queue = np.full((n_envs, 2, 41), RANGE_MAX)
        self.finished = np.zeros(n_envs, dtype=bool)
        self.outcome = np.zeros(n_envs, dtype=np.int8)  # 0 running, 1 success, 2 collision, 3 timeout
        self.path_length = np.zeros(n_envs)
        self.finish_tick = np.zeros(n_envs, dtype=np.int64)
        self.counts = {"replay": 0, "full_reset": 0, "success": 0, "collision": 0, "timeout": 0}

        self.obs = np.zeros((n_envs, OBS_DIM))
        self.obs_ranges = np.full((n_envs, 41), RANGE_MAX)
        for i in range(n_envs):
            self._full_reset(i)
        self._refresh_obs(np.arange(n_envs), fresh=True)

    # -- resets ------------------------------------------------------------

    def _load_scenario(self, i: int, scn: Scenario) -> None:
        C, B = pad_obstacles([scn], MAX_PAD, MAX_PAD)
        self.circles[i], self.boxes[i] = C[0], B[0]
        self.extent = scn.extent

    def _full_reset(self, i: int) -> None:
        rng = self.rngs[i]
        if self.fixed_scenarios is not None:
            scn = self.fixed_scenarios[i]
            start, goal, heading = scn.start, scn.goal, scn.start_heading
        else:
            sid = int(rng.integers(self.scenario_pool))
            scn = cached_scenario(self.difficulty, sid)
            pair = cached_free_space(self.difficulty, sid).sample(rng)
            start, goal, heading = pair if pair is not None else (scn.start, scn.goal, scn.start_heading)
            self.scenario_ids[i] = sid
        self._load_scenario(i, scn)
        self.pose[i] = (start[0], start[1], heading)
        self.vel[i] = 0.0
        self.goal[i] = goal
        self.tick[i] = 0
        self.stay[i] = 0
        draw = sample_randomization(rng) if self.randomize else NOMINAL
        self.apply_randomization(draw, i)
        self.rings[i].clear()
        self.rings[i].record(RobotState.from_arrays(self.pose[i], self.vel[i]), 0.0)
        self.stuck.reset(i)
        self.path_length[i] = 0.0

    def _replay(self, i: int, state: RobotState) -> None:
        pose, vel = state.as_arrays()
        self.pose[i] = pose
        self.vel[i] = vel
        self.stay[i] = 0
        t = self.tick[i] * POLICY_DT
        self.rings[i].clear()
        self.rings[i].record(state, t)
        self.stuck.reset(i)

    def apply_randomization(self, draw: RandomizationDraw, i: int) -> None:
        self.tau[i] = draw.tau()
        self.delay[i] = min(draw.delay_ticks, self.scan_queue.shape[1] - 1)
        self.noise_amp[i] = [draw.linvel_noise] * 3 + [draw.angvel_noise] * 3 + [draw.gravity_noise] * 3

    # -- observation -------------------------------------------------------

    def _scan(self, idx: np.ndarray) -> np.ndarray:
        return cast_lidar_batch(self.pose[idx], self.circles[idx], self.boxes[idx], self.extent)

    def _noise(self, idx: np.ndarray) -> np.ndarray | None:
        if not self.randomize:
            return None
        return np.stack([self.rngs[i].uniform(-1.0, 1.0, 9) for i in idx]) * self.noise_amp[idx]

    def _observe(self, idx: np.ndarray, fresh: bool) -> tuple[np.ndarray, np.ndarray]:
        scan = self._scan(idx)
        if fresh:
            self.scan_queue[idx] = scan[:, None, :]
        else:
            self.scan_queue[idx, 1:] = self.scan_queue[idx, :-1]
            self.scan_queue[idx, 0] = scan
        ranges = self.scan_queue[idx, self.delay[idx]]
        goal_b = goal_in_body_frame(self.pose[idx], self.goal[idx])
        return build_observation(self.vel[idx], ranges, goal_b, self._noise(idx)), ranges

    def _refresh_obs(self, idx: np.ndarray, fresh: bool) -> None:
        if len(idx):
            self.obs[idx], self.obs_ranges[idx] = self._observe(idx, fresh)

    def goal_distance(self) -> np.ndarray:
        return np.linalg.norm(self.goal - self.pose[:, :2], axis=1)

    def clip_command(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.u_min, self.u_max)

    # -- stepping ----------------------------------------------------------

    def step(self, command: np.ndarray) -> StepResult:
        cmd = self.clip_command(np.asarray(command, dtype=np.float64))
        decision_ranges = self.obs_ranges.copy()
        frozen = self.finished.copy()
        collided = np.zeros(self.n, dtype=bool)
        for _ in range(SUBSTEPS):
            moving = ~(collided | frozen)
            p, v = step_dynamics_batch(self.pose, self.vel, cmd, SIM_DT, self.tau)
            self.path_length += np.where(moving, np.linalg.norm(p[:, :2] - self.pose[:, :2], axis=1), 0.0)
            self.pose = np.where(moving[:, None], p, self.pose)
            self.vel = np.where(moving[:, None], v, self.vel)
            clr, _ = clearance_batch(self.pose[:, :2], self.circles, self.boxes, self.extent)
            collided |= moving & (clr < self.footprint)
        active = ~frozen
        self.tick[active] += 1

        all_idx = np.arange(self.n)
        next_obs, next_ranges = self._observe(all_idx, fresh=False)
        self.stuck.push(self.pose[:, :2])
        d = self.goal_distance()
        self.stay = np.where(d < self.goal_radius, self.stay + 1, 0)
        success = active & ~collided & (self.stay >= self.stay_ticks)
        truncated = active & ~collided & ~success & (self.tick >= self.max_ticks)
        reward = compute_reward(self.pose, self.vel, decision_ranges, cmd, self.goal, self.stuck,
                                collided, collided)

        done = collided | success | truncated
        for i in np.nonzero(active & ~done)[0]:
            self.rings[i].record(RobotState.from_arrays(self.pose[i], self.vel[i]), self.tick[i] * POLICY_DT)

        replayed = np.zeros(self.n, dtype=bool)
        reset_idx = []
        for i in np.nonzero(done)[0]:
            self.counts["collision" if collided[i] else "success" if success[i] else "timeout"] += 1
            self.curricula[i] = acsi.update_curriculum(self.curricula[i], float(d[i]), self.curriculum_step)
            if not self.auto_reset:
                self.finished[i] = True
                self.outcome[i] = 2 if collided[i] else 1 if success[i] else 3
                self.finish_tick[i] = self.tick[i]
                continue
            if collided[i]:
                p_reset = self.curricula[i].p_reset if self.use_acsi else 0.0
                decision = acsi.on_collision(self.rings[i], p_reset, self.rngs[i],
                                             self.tick[i] * POLICY_DT, self.t_back)
                if isinstance(decision, ReplayCritical):
                    self._replay(i, decision.state)
                    replayed[i] = True
                    self.counts["replay"] += 1
                    reset_idx.append(i)
                    continue
            self._full_reset(i)
            self.counts["full_reset"] += 1
            reset_idx.append(i)

        self.obs, self.obs_ranges = next_obs.copy(), next_ranges.copy()
        self._refresh_obs(np.asarray(reset_idx, dtype=np.int64), fresh=True)
        return StepResult(next_obs, next_ranges, reward, collided, success, truncated, d, replayed)

    @property
    def p_reset(self) -> np.ndarray:
        if not self.use_acsi:
            return np.zeros(self.n)
        return np.array([c.p_reset for c in self.curricula])

    def state(self, i: int) -> RobotState:
        return RobotState.from_arrays(self.pose[i], self.vel[i])

    def with_curriculum(self, **kw) -> None:
        self.curricula = [replace(c, **kw) for c in self.curricula]
