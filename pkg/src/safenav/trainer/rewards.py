"""Per-step reward terms and their fixed weights."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..world import RAY_ANGLES, heading_error

WEIGHTS = {
    "term": -100.0,
    "reach": 10.0,
    "velo": 15.0,
    "clear": 15.0,
    "stuck": -5.0,
    "coll": -4.0,
    "omega": -0.05,
}
FRONT_CONE = np.pi / 6.0
COLLISION_BETA = 1.0


@dataclass
class RewardBreakdown:
    """Weighted per-step terms; each field has shape (B,)."""

    term: np.ndarray
    reach: np.ndarray
    velo: np.ndarray
    clear: np.ndarray
    stuck: np.ndarray
    coll: np.ndarray
    omega: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return (self.term + self.reach + self.velo + self.clear + self.stuck
                + self.coll + self.omega)

    def means(self) -> dict[str, float]:
        out = {f.name: float(np.mean(getattr(self, f.name))) for f in fields(self)}
        out["total"] = float(np.mean(self.total))
        return out


class StuckTracker:
    """Recent planar positions per env; ``max_displacement`` is max_t |p_t - p_1| over the window."""

    def __init__(self, n_envs: int, window: int = 10):
        self.window = window
        self.positions = np.zeros((n_envs, window, 2))
        self.count = np.zeros(n_envs, dtype=np.int64)

    def push(self, positions: np.ndarray) -> None:
        self.positions[:, :-1] = self.positions[:, 1:]
        self.positions[:, -1] = positions
        self.count = np.minimum(self.count + 1, self.window)

    def reset(self, mask) -> None:
        self.positions[mask] = 0.0
        self.count[mask] = 0

    @property
    def full(self) -> np.ndarray:
        return self.count >= self.window

    def max_displacement(self) -> np.ndarray:
        first = self.positions[:, :1]
        return np.linalg.norm(self.positions - first, axis=-1).max(axis=1)


def most_open_bearing(ranges: np.ndarray) -> np.ndarray:
    """Bearing of the longest ray; ties go to the smallest |bearing|."""
    is_max = ranges >= ranges.max(axis=-1, keepdims=True)
    key = np.where(is_max, np.abs(RAY_ANGLES), np.inf)
    return RAY_ANGLES[np.argmin(key, axis=-1)]


def frontal_clearance(ranges: np.ndarray) -> np.ndarray:
    return ranges[..., np.abs(RAY_ANGLES) <= FRONT_CONE + 1e-12].min(axis=-1)


def compute_reward(pose, vel, ranges, command, goal, stuck: StuckTracker | None,
                   collided, terminated) -> RewardBreakdown:
    """Evaluate the seven weighted terms on a batch of transitions.

    ``pose``/``vel`` describe the state after the step; ``ranges`` is the scan
    the command was chosen from. ``stuck`` must already contain the new position.
    The stuck term uses the commanded forward and yaw rates; it is only armed
    once the tracker window is full.
    """
    pose = np.atleast_2d(pose)
    vel = np.atleast_2d(vel)
    ranges = np.atleast_2d(ranges)
    command = np.atleast_2d(command)
    goal = np.atleast_2d(goal)
    collided = np.asarray(collided, dtype=bool).reshape(-1)
    terminated = np.asarray(terminated, dtype=bool).reshape(-1)

    d = np.linalg.norm(goal - pose[:, :2], axis=1)
    v_x = vel[:, 0]
    proximity = 1.0 / (1.0 + 2.0 * d * d)
    theta = heading_error(pose, goal)
    phi = most_open_bearing(ranges)

    r_term = terminated.astype(np.float64)
    r_reach = proximity * (d < 0.5)
    r_velo = np.cos(theta) * v_x + proximity
    r_clear = (d > 1.0) * np.cos(phi) * v_x + (d <= 1.0) * proximity
    if stuck is not None:
        armed = stuck.full & (stuck.max_displacement() < 0.1)
    else:
        armed = np.zeros(len(pose), dtype=bool)
    r_stuck = ((d > 1.0) & armed & (command[:, 0] > 0.0) & (np.abs(command[:, 2]) < 1.0)).astype(np.float64)
    speed2 = vel[:, 0] ** 2 + vel[:, 1] ** 2
    r_coll = (1.0 + 4.0 * (speed2 + vel[:, 2] ** 2)) * COLLISION_BETA * collided
    # roll/pitch rates are identically zero for the planar plant
    r_omega = np.zeros(len(pose))

    return RewardBreakdown(
        term=WEIGHTS["term"] * r_term,
        reach=WEIGHTS["reach"] * r_reach,
        velo=WEIGHTS["velo"] * r_velo,
        clear=WEIGHTS["clear"] * r_clear,
        stuck=WEIGHTS["stuck"] * r_stuck,
        coll=WEIGHTS["coll"] * r_coll,
        omega=WEIGHTS["omega"] * r_omega,
    )

