import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safenav.world import (
    NUM_RAYS, RANGE_MAX, RANGE_MIN, RAY_ANGLES, Box, Circle, Difficulty, OBSTACLE_COUNT, RobotState,
    Scenario, TRAJECTORY_COLUMNS, cast_lidar, check_collision, clearance_field, empty_scenario,
    generate_scenario, read_trajectory_csv, step_dynamics, wrap_angle, write_trajectory_csv,
)


def at(x, y, theta=0.0, vel=(0.0, 0.0, 0.0)):
    return RobotState((x, y), theta, vel)


class TestGeometryTypes:
    def test_circle_radius_must_be_positive(self):
        with pytest.raises(ValueError):
            Circle((1.0, 1.0), 0.0)

    def test_box_half_extents_must_be_positive(self):
        with pytest.raises(ValueError):
            Box((1.0, 1.0), (0.5, -0.1))

    def test_ray_fan(self):
        assert len(RAY_ANGLES) == NUM_RAYS == 41
        assert RAY_ANGLES[0] == pytest.approx(-2 * math.pi / 3)
        assert RAY_ANGLES[-1] == pytest.approx(2 * math.pi / 3)
        assert np.allclose(np.diff(RAY_ANGLES), math.pi / 30)

    @pytest.mark.parametrize("theta, expected", [(math.pi, math.pi), (-math.pi, math.pi), (3 * math.pi, math.pi),
                                                 (0.5, 0.5), (2 * math.pi + 0.25, 0.25)])
    def test_wrap_angle_half_open(self, theta, expected):
        assert wrap_angle(theta) == pytest.approx(expected)


class TestScenarioGeneration:
    def test_deterministic(self):
        a = generate_scenario("easy", 1)
        b = generate_scenario(Difficulty.EASY, 1)
        assert a == b
        assert a.to_json() == b.to_json()

    def test_different_seeds_differ(self):
        assert generate_scenario("easy", 1).obstacles != generate_scenario("easy", 2).obstacles

    @pytest.mark.parametrize("level", list(Difficulty))
    def test_obstacle_count(self, level):
        assert len(generate_scenario(level, 3).obstacles) == OBSTACLE_COUNT[level]

    def test_hard_denser_than_easy(self):
        assert len(generate_scenario("hard", 7).obstacles) > len(generate_scenario("easy", 7).obstacles)

    @pytest.mark.parametrize("seed", range(5))
    def test_start_goal_valid(self, seed):
        s = generate_scenario("hard", seed)
        assert math.dist(s.start, s.goal) >= 4.0
        clr = clearance_field(np.array([s.start, s.goal]), s.circles, s.boxes, s.extent)
        assert np.all(clr > 0.40)
        xmin, ymin, xmax, ymax = s.extent
        for o in s.obstacles:
            half = (o.radius, o.radius) if isinstance(o, Circle) else o.half_extents
            assert xmin <= o.center[0] - half[0] and o.center[0] + half[0] <= xmax
            assert ymin <= o.center[1] - half[1] and o.center[1] + half[1] <= ymax

    def test_json_round_trip(self):
        s = generate_scenario("medium", 11)
        assert Scenario.from_json(s.to_json()) == s
        d = s.to_dict()
        assert {"extent", "obstacles", "seed", "difficulty"} <= set(d)

    def test_unknown_difficulty(self):
        with pytest.raises(ValueError):
            generate_scenario("extreme", 0)


class TestLidar:
    def test_empty_room_centered_saturates(self):
        scan = cast_lidar(empty_scenario(), at(5.0, 5.0))
        assert np.all(scan.ranges == RANGE_MAX)

    def test_wall_ahead(self):
        scan = cast_lidar(empty_scenario(), at(9.0, 5.0))
        assert scan.ranges[NUM_RAYS // 2] == pytest.approx(1.0, abs=1e-12)

    def test_circle_ahead(self):
        scn = empty_scenario(obstacles=[Circle((7.0, 5.0), 0.5)])
        scan = cast_lidar(scn, at(5.0, 5.0))
        assert scan.ranges[NUM_RAYS // 2] == pytest.approx(1.5, abs=1e-12)

    def test_box_face_ahead(self):
        scn = empty_scenario(obstacles=[Box((7.0, 5.0), (0.5, 1.0))])
        scan = cast_lidar(scn, at(5.0, 5.0))
        assert scan.ranges[NUM_RAYS // 2] == pytest.approx(1.5, abs=1e-12)

    def test_heading_rotates_scan(self):
        scn = empty_scenario()
        scan = cast_lidar(scn, at(5.0, 9.0, math.pi / 2))
        assert scan.ranges[NUM_RAYS // 2] == pytest.approx(1.0, abs=1e-12)

    def test_inside_obstacle_clamps_to_min(self):
        scn = empty_scenario(obstacles=[Circle((5.0, 5.0), 0.5)])
        assert np.all(cast_lidar(scn, at(5.0, 5.0)).ranges == RANGE_MIN)

    @settings(max_examples=50, deadline=None)
    @given(x=st.floats(0.05, 9.95), y=st.floats(0.05, 9.95), th=st.floats(-math.pi, math.pi),
           seed=st.integers(0, 50))
    def test_ranges_always_clamped(self, x, y, th, seed):
        scn = generate_scenario("hard", seed)
        r = cast_lidar(scn, at(x, y, th)).ranges
        assert np.all((r >= RANGE_MIN) & (r <= RANGE_MAX))

    @settings(max_examples=30, deadline=None)
    @given(steps=st.lists(st.floats(0.01, 0.5), min_size=1, max_size=10))
    def test_approach_perpendicular_wall_monotone(self, steps):
        scn = empty_scenario()
        x = 7.2
        prev = cast_lidar(scn, at(x, 5.0)).ranges
        for dx in steps:
            x = min(x + dx, 9.9)
            cur = cast_lidar(scn, at(x, 5.0)).ranges
            assert np.all(cur <= prev + 1e-12)
            prev = cur


class TestCollision:
    def test_far_from_everything(self):
        scn = empty_scenario(obstacles=[Circle((7.0, 5.0), 0.5)])
        assert not check_collision(scn, at(5.0, 5.0), 0.3).colliding

    def test_center_on_boundary(self):
        scn = empty_scenario(obstacles=[Circle((7.0, 5.0), 0.5)])
        c = check_collision(scn, at(6.5, 5.0), 0.3)
        assert c.colliding and c.clearance == pytest.approx(0.0)

    def test_near_box_face(self):
        scn = empty_scenario(obstacles=[Box((7.0, 5.0), (0.5, 1.0))])
        c = check_collision(scn, at(6.25, 5.0), 0.3)
        assert c.colliding
        assert c.penetration == pytest.approx(0.05)
        assert np.allclose(c.normal, [-1.0, 0.0])

    def test_wall_contact_normal(self):
        c = check_collision(empty_scenario(), at(0.2, 5.0), 0.35)
        assert c.colliding and np.allclose(c.normal, [1.0, 0.0])

    def test_footprint_must_be_positive(self):
        with pytest.raises(ValueError):
            check_collision(empty_scenario(), at(5.0, 5.0), 0.0)

    @settings(max_examples=60, deadline=None)
    @given(x=st.floats(0.0, 10.0), y=st.floats(0.0, 10.0), r=st.floats(0.01, 1.0), extra=st.floats(0.0, 1.0))
    def test_inflation_monotone(self, x, y, r, extra):
        scn = generate_scenario("medium", 4)
        if check_collision(scn, at(x, y), r).colliding:
            assert check_collision(scn, at(x, y), r + extra).colliding


class TestDynamics:
    def test_fixed_point(self):
        s = at(1.0, 2.0, 0.3)
        assert step_dynamics(s, (0.0, 0.0, 0.0), 0.1) == s

    def test_pure_translation(self):
        s = step_dynamics(at(0.0, 0.0), (1.0, 0.0, 0.0), 0.1, tau=0.0)
        assert s.position == pytest.approx((0.1, 0.0))

    def test_pure_rotation(self):
        s = step_dynamics(at(1.0, 1.0), (0.0, 0.0, 1.0), 0.1, tau=0.0)
        assert s.heading == pytest.approx(0.1)
        assert s.position == (1.0, 1.0)

    def test_first_order_lag(self):
        s = step_dynamics(at(0.0, 0.0), (1.0, 0.0, 0.0), 0.2, tau=0.2)
        assert s.body_velocity[0] == pytest.approx(1.0 - math.exp(-1.0))

    def test_heading_wrapped(self):
        s = step_dynamics(at(0.0, 0.0, 3.1), (0.0, 0.0, 1.0), 0.1, tau=0.0)
        assert -math.pi < s.heading <= math.pi

    def test_dt_must_be_positive(self):
        with pytest.raises(ValueError):
            step_dynamics(at(0.0, 0.0), (1.0, 0.0, 0.0), 0.0)

    def test_reproducible(self):
        a = step_dynamics(at(1.0, 1.0, 0.4, (0.2, 0.1, 0.3)), (0.7, -0.2, 0.5), 0.02)
        b = step_dynamics(at(1.0, 1.0, 0.4, (0.2, 0.1, 0.3)), (0.7, -0.2, 0.5), 0.02)
        assert a == b


def test_trajectory_csv_round_trip(tmp_path):
    rows = [[0.1 * i, 1.0, 2.0, 0.3, 0.5, 0.0, 0.1, 0.2, 1.0, 0.0] for i in range(5)]
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, rows)
    assert path.read_text().splitlines()[0] == ",".join(TRAJECTORY_COLUMNS)
    assert np.array_equal(read_trajectory_csv(path), np.array(rows))


def test_trajectory_csv_rejects_short_rows(tmp_path):
    with pytest.raises(ValueError):
        write_trajectory_csv(tmp_path / "t.csv", [[0.0, 1.0]])
