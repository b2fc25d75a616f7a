"""Collision-state replay with a goal-distance curriculum on the replay probability."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .world import RobotState

T_BACK = 1.0
T_HIST = 3.0
POLICY_DT = 0.1


class Snapshot(NamedTuple):
    state: RobotState
    t: float


class StateHistoryRing:
    """Bounded record of recent robot states, evicting the oldest first."""

    def __init__(self, horizon: float = T_HIST, dt: float = POLICY_DT):
        # tolerate float noise in horizon/dt before taking the ceiling
        self.capacity = max(1, math.ceil(horizon / dt - 1e-9))
        self._buf: deque[Snapshot] = deque(maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._buf)

    def __iter__(self):
        return iter(self._buf)

    def record(self, state: RobotState, t: float) -> None:
        if self._buf and t < self._buf[-1].t:
            raise ValueError(f"timestamps must be monotone: {t} < {self._buf[-1].t}")
        self._buf.append(Snapshot(state, float(t)))

    def query(self, t: float) -> Snapshot | None:
        """Latest snapshot whose timestamp is <= ``t`` (1e-9 s slack for tick arithmetic)."""
        best = None
        for snap in self._buf:
            if snap.t <= t + 1e-9:
                best = snap
            else:
                break
        return best

    def clear(self) -> None:
        self._buf.clear()


def record_state(ring: StateHistoryRing, state: RobotState, t: float) -> None:
    ring.record(state, t)


@dataclass(frozen=True)
class CurriculumState:
    l_goal: float = 0.0
    p_min: float = 0.1
    p_max: float = 0.5
    d_up: float = 0.5
    d_down: float = 2.0
    l_bounds: tuple[float, float] | None = (-1.0, 2.0)

    def __post_init__(self):
        if not 0.0 <= self.p_min <= self.p_max <= 1.0:
            raise ValueError(f"need 0 <= p_min <= p_max <= 1, got {self.p_min}, {self.p_max}")

    @property
    def p_reset(self) -> float:
        return reset_probability(self.l_goal, self.p_min, self.p_max)


def reset_probability(l_goal, p_min: float, p_max: float):
    return p_min + (p_max - p_min) * np.clip(l_goal, 0.0, 1.0)


def update_curriculum(cs: CurriculumState, d: float, step_increment: float = 0.05) -> CurriculumState:
    """Move the success counter by +step (close finish), -step (far finish) or not at all."""
    if d < 0:
        raise ValueError("goal distance must be non-negative")
    delta = step_increment * (float(d < cs.d_up) - float(d > cs.d_down))
    l_goal = cs.l_goal + delta
    if cs.l_bounds is not None:
        l_goal = min(max(l_goal, cs.l_bounds[0]), cs.l_bounds[1])
    return replace(cs, l_goal=l_goal)


class ReplayCritical(NamedTuple):
    state: RobotState


class FullReset(NamedTuple):
    pass


ResetDecision = ReplayCritical | FullReset


def on_collision(ring: StateHistoryRing, cs: CurriculumState | float, rng: np.random.Generator,
                 t_now: float | None = None, t_back: float = T_BACK) -> ResetDecision:
    """Decide between replaying the state ``t_back`` seconds before the collision and a full reset.

    One uniform draw is consumed per call regardless of the outcome.
    """
    p = cs.p_reset if isinstance(cs, CurriculumState) else float(cs)
    u = rng.random()
    if len(ring) == 0:
        return FullReset()
    if t_now is None:
        t_now = ring.query(math.inf).t
    snap = ring.query(t_now - t_back)
    if snap is None or not u < p:
        return FullReset()
    return ReplayCritical(snap.state)
