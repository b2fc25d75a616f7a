import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safenav.acsi import (
    CurriculumState, FullReset, ReplayCritical, StateHistoryRing, on_collision, record_state, reset_probability,
    update_curriculum,
)
from safenav.checks import replay_fraction
from safenav.world import RobotState


def state(i: float) -> RobotState:
    return RobotState((i, -i), 0.1 * i, (0.5, 0.0, -0.2))


def filled_ring(n=30, dt=0.1):
    ring = StateHistoryRing(3.0, dt)
    for i in range(n):
        record_state(ring, state(float(i)), i * dt)
    return ring


class TestRing:
    def test_capacity(self):
        assert StateHistoryRing(3.0, 0.1).capacity == 30
        assert StateHistoryRing(1.0, 0.3).capacity == 4

    def test_eviction(self):
        ring = filled_ring(31)
        assert len(ring) == 30
        assert all(s.state != state(0.0) for s in ring)
        assert next(iter(ring)).state == state(1.0)

    def test_query(self):
        ring = filled_ring(30)
        assert ring.query(2.9 - 1.0).state == state(19.0)
        assert ring.query(1.95).state == state(19.0)
        assert ring.query(-1.0) is None

    def test_empty_query(self):
        assert StateHistoryRing().query(10.0) is None

    def test_monotone_time(self):
        ring = filled_ring(3)
        with pytest.raises(ValueError):
            ring.record(state(9.0), 0.05)


class TestCurriculum:
    @pytest.mark.parametrize("l_goal, p", [(0.0, 0.1), (1.0, 0.5), (1.7, 0.5), (0.5, 0.3), (-0.4, 0.1)])
    def test_closed_form(self, l_goal, p):
        assert CurriculumState(l_goal=l_goal).p_reset == pytest.approx(p, abs=1e-12)

    def test_random_values_exact(self):
        l = np.random.default_rng(0).uniform(-2, 3, 1000)
        p = reset_probability(l, 0.1, 0.5)
        ref = np.array([0.1 + 0.4 * min(max(x, 0.0), 1.0) for x in l])
        assert np.max(np.abs(p - ref)) <= 1e-12

    @settings(max_examples=100)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert reset_probability(lo, 0.1, 0.5) <= reset_probability(hi, 0.1, 0.5)

    def test_update_rule(self):
        cs = CurriculumState()
        assert update_curriculum(cs, 0.2).l_goal == pytest.approx(0.05)
        assert update_curriculum(cs, 3.0).l_goal == pytest.approx(-0.05)
        assert update_curriculum(cs, 1.0).l_goal == 0.0

    def test_bounds(self):
        cs = CurriculumState(l_goal=2.0)
        assert update_curriculum(cs, 0.0).l_goal == 2.0
        assert update_curriculum(CurriculumState(l_goal=-1.0), 9.0).l_goal == -1.0
        assert update_curriculum(CurriculumState(l_goal=5.0, l_bounds=None), 0.0).l_goal == pytest.approx(5.05)

    def test_negative_distance(self):
        with pytest.raises(ValueError):
            update_curriculum(CurriculumState(), -0.1)

    def test_invalid_probabilities(self):
        with pytest.raises(ValueError):
            CurriculumState(p_min=0.6, p_max=0.5)


class TestOnCollision:
    def test_p_zero_always_full_reset(self):
        ring, rng = filled_ring(), np.random.default_rng(0)
        assert all(isinstance(on_collision(ring, 0.0, rng, 2.9), FullReset) for _ in range(200))

    def test_p_one_replays_lookback_state(self):
        ring, rng = filled_ring(), np.random.default_rng(0)
        for _ in range(50):
            d = on_collision(ring, 1.0, rng, 2.9)
            assert isinstance(d, ReplayCritical)
            assert d.state == state(19.0)  # bit-exact snapshot, 1 s before the collision

    def test_empty_ring(self):
        assert isinstance(on_collision(StateHistoryRing(), 1.0, np.random.default_rng(0), 5.0), FullReset)

    def test_too_early(self):
        ring = filled_ring(5)
        assert isinstance(on_collision(ring, 1.0, np.random.default_rng(0), 0.4), FullReset)

    def test_accepts_curriculum(self):
        d = on_collision(filled_ring(), CurriculumState(l_goal=1.0, p_min=1.0, p_max=1.0),
                         np.random.default_rng(0), 2.9)
        assert isinstance(d, ReplayCritical)

    def test_consumes_one_draw(self):
        a, b = np.random.default_rng(3), np.random.default_rng(3)
        on_collision(StateHistoryRing(), 0.5, a, 1.0)
        b.random()
        assert a.random() == b.random()

    def test_replay_fraction(self):
        n = 10_000
        assert abs(replay_fraction(n, 0.5, seed=11) - 0.5) <= 3 * math.sqrt(0.25 / n)
