"""Planar obstacle rooms, analytic LiDAR, collision queries and the velocity-tracking plant.

Everything here is vectorised over a leading batch axis where it matters for
training throughput; the single-robot functions are thin wrappers around the
batched kernels so both paths are bit-identical.
"""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

NUM_RAYS = 41
RAY_ANGLES = np.linspace(-2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0, NUM_RAYS)
RANGE_MIN = 0.1
RANGE_MAX = 3.0

ROOM_SIZE = 10.0
FOOTPRINT_EVAL = 0.35
FOOTPRINT_TRAIN = 0.40
TAU_V = 0.2
SIM_DT = 0.02
MIN_START_GOAL_DIST = 4.0

# far-away filler used to pad per-env obstacle arrays to a common length
_PAD_CENTER = 1.0e6


class Difficulty(str, enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"

    @classmethod
    def parse(cls, value: "Difficulty | str") -> "Difficulty":
        if isinstance(value, Difficulty):
            return value
        return cls(str(value).lower())


OBSTACLE_COUNT = {Difficulty.EASY: 6, Difficulty.MEDIUM: 14, Difficulty.HARD: 24}
CIRCLE_RADIUS_RANGE = (0.2, 0.6)
BOX_HALF_EXTENT_RANGE = (0.2, 0.7)


class ScenarioGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"circle radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class Box:
    center: tuple[float, float]
    half_extents: tuple[float, float]

    def __post_init__(self):
        if not (self.half_extents[0] > 0 and self.half_extents[1] > 0):
            raise ValueError(f"box half-extents must be positive, got {self.half_extents}")


Obstacle = Circle | Box


@dataclass(frozen=True)
class Scenario:
    extent: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    obstacles: tuple[Obstacle, ...]
    difficulty: Difficulty
    seed: int
    start: tuple[float, float] = (0.0, 0.0)
    goal: tuple[float, float] = (0.0, 0.0)
    start_heading: float = 0.0

    @property
    def circles(self) -> np.ndarray:
        rows = [(*o.center, o.radius) for o in self.obstacles if isinstance(o, Circle)]
        return np.asarray(rows, dtype=np.float64).reshape(-1, 3)

    @property
    def boxes(self) -> np.ndarray:
        rows = [(*o.center, *o.half_extents) for o in self.obstacles if isinstance(o, Box)]
        return np.asarray(rows, dtype=np.float64).reshape(-1, 4)

    def to_dict(self) -> dict:
        obstacles = []
        for o in self.obstacles:
            if isinstance(o, Circle):
                obstacles.append({"type": "circle", "center": list(o.center), "radius": o.radius})
            else:
                obstacles.append({"type": "box", "center": list(o.center),
                                  "half_extents": list(o.half_extents)})
        return {
            "extent": list(self.extent),
            "obstacles": obstacles,
            "seed": self.seed,
            "difficulty": self.difficulty.value,
            "start": list(self.start),
            "goal": list(self.goal),
            "start_heading": self.start_heading,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        obstacles: list[Obstacle] = []
        for o in d["obstacles"]:
            if o["type"] == "circle":
                obstacles.append(Circle(tuple(o["center"]), float(o["radius"])))
            elif o["type"] == "box":
                obstacles.append(Box(tuple(o["center"]), tuple(o["half_extents"])))
            else:
                raise ValueError(f"unknown obstacle type {o['type']!r}")
        return cls(
            extent=tuple(d["extent"]),
            obstacles=tuple(obstacles),
            difficulty=Difficulty.parse(d["difficulty"]),
            seed=int(d["seed"]),
            start=tuple(d.get("start", (0.0, 0.0))),
            goal=tuple(d.get("goal", (0.0, 0.0))),
            start_heading=float(d.get("start_heading", 0.0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class RobotState:
    position: tuple[float, float]
    heading: float
    body_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        pose = np.array([self.position[0], self.position[1], self.heading], dtype=np.float64)
        return pose, np.asarray(self.body_velocity, dtype=np.float64)

    @classmethod
    def from_arrays(cls, pose, vel) -> "RobotState":
        return cls((float(pose[0]), float(pose[1])), float(pose[2]),
                   (float(vel[0]), float(vel[1]), float(vel[2])))


@dataclass(frozen=True)
class LidarScan:
    ranges: np.ndarray
    ray_angles: np.ndarray = field(default_factory=lambda: RAY_ANGLES.copy())


class Contact(NamedTuple):
    colliding: bool
    penetration: float  # footprint radius minus signed clearance; > 0 when colliding
    normal: np.ndarray  # unit vector pointing from the nearest surface towards the robot
    clearance: float


def wrap_angle(theta):
    """Wrap to (-pi, pi]; values already in range pass through unchanged."""
    inside = (theta > -np.pi) & (theta <= np.pi)
    return np.where(inside, theta, np.pi - np.mod(np.pi - theta, 2.0 * np.pi))


# ---------------------------------------------------------------------------
# scenario generation


def _sample_obstacles(rng: np.random.Generator, count: int, extent) -> list[Obstacle]:
    xmin, ymin, xmax, ymax = extent
    out: list[Obstacle] = []
    for _ in range(count):
        if rng.random() < 0.5:
            r = rng.uniform(*CIRCLE_RADIUS_RANGE)
            cx = rng.uniform(xmin + r, xmax - r)
            cy = rng.uniform(ymin + r, ymax - r)
            out.append(Circle((float(cx), float(cy)), float(r)))
        else:
            hx, hy = rng.uniform(*BOX_HALF_EXTENT_RANGE, size=2)
            cx = rng.uniform(xmin + hx, xmax - hx)
            cy = rng.uniform(ymin + hy, ymax - hy)
            out.append(Box((float(cx), float(cy)), (float(hx), float(hy))))
    return out


def clearance_field(points: np.ndarray, circles: np.ndarray, boxes: np.ndarray, extent) -> np.ndarray:
    """Signed distance from each point to the nearest obstacle surface or room wall.

    ``points`` has shape (..., 2); negative values mean the point is inside an obstacle.
    """
    p = np.asarray(points, dtype=np.float64)
    xmin, ymin, xmax, ymax = extent
    d = np.minimum.reduce([p[..., 0] - xmin, xmax - p[..., 0], p[..., 1] - ymin, ymax - p[..., 1]])
    if len(circles):
        dc = np.linalg.norm(p[..., None, :] - circles[:, :2], axis=-1) - circles[:, 2]
        d = np.minimum(d, dc.min(axis=-1))
    if len(boxes):
        d = np.minimum(d, _box_sdf(p[..., None, :], boxes).min(axis=-1))
    return d


def _box_sdf(p: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    q = np.abs(p - boxes[..., :2]) - boxes[..., 2:]
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.maximum(q[..., 0], q[..., 1]), 0.0)
    return outside + inside


class FreeSpace:
    """Gridded clearance map of a layout, used to draw connected start/goal pairs.

    Cells whose clearance exceeds the training footprint are labelled by
    connected component; a start and goal are only paired within one component.
    """

    def __init__(self, circles: np.ndarray, boxes: np.ndarray, extent,
                 resolution: float = 0.1, footprint: float = FOOTPRINT_TRAIN):
        xmin, ymin, xmax, ymax = extent
        self.extent = extent
        self.resolution = resolution
        xs = np.arange(xmin + resolution / 2, xmax, resolution)
        ys = np.arange(ymin + resolution / 2, ymax, resolution)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        self.centers = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        self.clearance = clearance_field(self.centers, circles, boxes, extent)
        labels, _ = ndimage.label((self.clearance > footprint).reshape(gx.shape))
        self.labels = labels.ravel()
        self._circles, self._boxes = circles, boxes

    def label_at(self, p) -> int:
        xmin, ymin, xmax, ymax = self.extent
        n_y = int(round((ymax - ymin) / self.resolution))
        n_x = int(round((xmax - xmin) / self.resolution))
        i = min(max(int((p[0] - xmin) / self.resolution), 0), n_x - 1)
        j = min(max(int((p[1] - ymin) / self.resolution), 0), n_y - 1)
        return int(self.labels[i * n_y + j])

    def sample(self, rng: np.random.Generator, clearance: float = FOOTPRINT_TRAIN + 0.1,
               min_distance: float = MIN_START_GOAL_DIST, max_tries: int = 20):
        """Draw ``(start, goal, heading)`` or return None when the layout admits none."""
        ok = np.nonzero((self.clearance >= clearance + self.resolution) & (self.labels > 0))[0]
        if len(ok) < 2:
            return None
        half = self.resolution / 2
        for _ in range(max_tries):
            s_idx = ok[rng.integers(len(ok))]
            same = ok[self.labels[ok] == self.labels[s_idx]]
            far = same[np.linalg.norm(self.centers[same] - self.centers[s_idx], axis=1) >= min_distance + 2 * half]
            if len(far) == 0:
                continue
            g_idx = far[rng.integers(len(far))]
            start = self.centers[s_idx] + rng.uniform(-half, half, size=2)
            goal = self.centers[g_idx] + rng.uniform(-half, half, size=2)
            heading = float(rng.uniform(-np.pi, np.pi))
            return (float(start[0]), float(start[1])), (float(goal[0]), float(goal[1])), heading
        return None


def generate_scenario(difficulty: Difficulty | str, seed: int, room_size: float = ROOM_SIZE,
                      max_attempts: int = 50) -> Scenario:
    """Build a room for ``difficulty``; a pure function of ``(difficulty, seed)``."""
    difficulty = Difficulty.parse(difficulty)
    level = list(Difficulty).index(difficulty)
    rng = np.random.default_rng([int(seed), level])
    extent = (0.0, 0.0, float(room_size), float(room_size))
    for _ in range(max_attempts):
        obstacles = _sample_obstacles(rng, OBSTACLE_COUNT[difficulty], extent)
        draft = Scenario(extent, tuple(obstacles), difficulty, int(seed))
        pair = FreeSpace(draft.circles, draft.boxes, extent).sample(rng)
        if pair is not None:
            start, goal, heading = pair
            return Scenario(extent, tuple(obstacles), difficulty, int(seed), start, goal, heading)
    raise ScenarioGenerationError(
        f"no feasible start/goal pair for difficulty={difficulty.value} seed={seed} "
        f"after {max_attempts} obstacle layouts")


def empty_scenario(room_size: float = ROOM_SIZE, obstacles: Iterable[Obstacle] = (),
                   start=(2.0, 5.0), goal=(8.0, 5.0), heading=0.0) -> Scenario:
    return Scenario((0.0, 0.0, room_size, room_size), tuple(obstacles), Difficulty.EASY, 0,
                    tuple(start), tuple(goal), heading)


# ---------------------------------------------------------------------------
# padded obstacle arrays for batched queries


def pad_obstacles(scenarios: Sequence[Scenario], n_circles: int | None = None,
                  n_boxes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    circles = [s.circles for s in scenarios]
    boxes = [s.boxes for s in scenarios]
    mc = max(n_circles or 0, max((len(c) for c in circles), default=0), 1)
    mb = max(n_boxes or 0, max((len(b) for b in boxes), default=0), 1)
    C = np.tile(np.array([_PAD_CENTER, _PAD_CENTER, 1.0]), (len(scenarios), mc, 1))
    B = np.tile(np.array([_PAD_CENTER, _PAD_CENTER, 1.0, 1.0]), (len(scenarios), mb, 1))
    for i, (c, b) in enumerate(zip(circles, boxes)):
        C[i, :len(c)] = c
        B[i, :len(b)] = b
    return C, B


# ---------------------------------------------------------------------------
# ray casting


def ray_distances(origins: np.ndarray, angles: np.ndarray, circles: np.ndarray,
                  boxes: np.ndarray, extent) -> np.ndarray:
    """Unclamped distance along each ray to the first surface.

    origins (B, 2), world-frame angles (B, R), circles (B, Mc, 3), boxes (B, Mb, 4).
    Rays that start inside an obstacle return 0.
    """
    o = origins[:, None, :]  # (B,1,2)
    dx, dy = np.cos(angles), np.sin(angles)  # (B,R)

    # walls, hit from inside
    xmin, ymin, xmax, ymax = extent
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(dx > 0, (xmax - o[..., 0]) / dx, np.where(dx < 0, (xmin - o[..., 0]) / dx, np.inf))
        ty = np.where(dy > 0, (ymax - o[..., 1]) / dy, np.where(dy < 0, (ymin - o[..., 1]) / dy, np.inf))
    t = np.maximum(np.minimum(tx, ty), 0.0)

    # circles: |o + t d - c|^2 = r^2
    f = o[:, :, None, :] - circles[:, None, :, :2]  # (B,1,Mc,2)
    b = dx[..., None] * f[..., 0] + dy[..., None] * f[..., 1]  # (B,R,Mc)
    c = (f[..., 0] ** 2 + f[..., 1] ** 2) - circles[:, None, :, 2] ** 2  # (B,1,Mc)
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        t_near = -b - np.sqrt(disc)
    hit = (disc >= 0.0) & (t_near >= 0.0)
    tc = np.where(c <= 0.0, 0.0, np.where(hit, t_near, np.inf))
    t = np.minimum(t, tc.min(axis=-1))

    # boxes: slab test
    lo = boxes[:, None, :, :2] - boxes[:, None, :, 2:]  # (B,1,Mb,2)
    hi = boxes[:, None, :, :2] + boxes[:, None, :, 2:]
    t_enter = np.zeros(dx.shape + (boxes.shape[1],))
    t_exit = np.full_like(t_enter, np.inf)
    for axis, d in ((0, dx), (1, dy)):
        oa = o[..., axis][..., None]  # (B,1,1)
        da = d[..., None]  # (B,R,1)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[..., axis] - oa) / da
            t2 = (hi[..., axis] - oa) / da
        inside_slab = (oa >= lo[..., axis]) & (oa <= hi[..., axis])
        parallel = da == 0.0
        a_lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        a_hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        t_enter = np.maximum(t_enter, a_lo)
        t_exit = np.minimum(t_exit, a_hi)
    tb = np.where(t_exit >= t_enter, t_enter, np.inf)
    t = np.minimum(t, tb.min(axis=-1))
    return t


def cast_lidar_batch(poses: np.ndarray, circles: np.ndarray, boxes: np.ndarray, extent) -> np.ndarray:
    """Clamped 41-ray scans for (B, 3) poses; returns (B, 41)."""
    angles = poses[:, 2:3] + RAY_ANGLES[None, :]
    d = ray_distances(poses[:, :2], angles, circles, boxes, extent)
    return np.clip(d, RANGE_MIN, RANGE_MAX)


def cast_lidar(scenario: Scenario, state: RobotState) -> LidarScan:
    pose, _ = state.as_arrays()
    C, B = pad_obstacles([scenario])
    ranges = cast_lidar_batch(pose[None], C, B, scenario.extent)[0]
    return LidarScan(ranges=ranges)


# ---------------------------------------------------------------------------
# collision


def clearance_batch(positions: np.ndarray, circles: np.ndarray, boxes: np.ndarray, extent):
    """Signed clearance (B,) and the outward unit normal (B, 2) of the nearest surface."""
    p = positions
    xmin, ymin, xmax, ymax = extent
    walls = np.stack([p[:, 0] - xmin, xmax - p[:, 0], p[:, 1] - ymin, ymax - p[:, 1]], axis=1)
    wall_normals = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])

    dc_vec = p[:, None, :] - circles[..., :2]
    dc_norm = np.linalg.norm(dc_vec, axis=-1)
    dc = dc_norm - circles[..., 2]
    db = _box_sdf(p[:, None, :], boxes)

    allds = np.concatenate([walls, dc, db], axis=1)
    idx = np.argmin(allds, axis=1)
    clearance = allds[np.arange(len(p)), idx]

    normals = np.zeros((len(p), 2))
    nw = walls.shape[1]
    nc = dc.shape[1]
    is_wall = idx < nw
    normals[is_wall] = wall_normals[idx[is_wall]]
    is_c = (idx >= nw) & (idx < nw + nc)
    if np.any(is_c):
        rows = np.nonzero(is_c)[0]
        v = dc_vec[rows, idx[rows] - nw]
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        normals[rows] = np.where(n > 0, v / np.where(n > 0, n, 1.0), np.array([1.0, 0.0]))
    is_b = idx >= nw + nc
    if np.any(is_b):
        rows = np.nonzero(is_b)[0]
        bx = boxes[rows, idx[rows] - nw - nc]
        normals[rows] = _box_normal(p[rows], bx)
    return clearance, normals


def _box_normal(p: np.ndarray, box: np.ndarray) -> np.ndarray:
    rel = p - box[:, :2]
    q = np.abs(rel) - box[:, 2:]
    outside = np.maximum(q, 0.0)
    n = np.sign(rel) * outside
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    # inside: push out through the nearest face
    axis = np.argmax(q, axis=-1)
    inner = np.zeros_like(p)
    inner[np.arange(len(p)), axis] = np.where(rel[np.arange(len(p)), axis] >= 0, 1.0, -1.0)
    return np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), inner)


def check_collision(scenario: Scenario, state: RobotState, footprint_radius: float) -> Contact:
    if not footprint_radius > 0:
        raise ValueError("footprint_radius must be positive")
    C, B = pad_obstacles([scenario])
    clearance, normal = clearance_batch(np.asarray([state.position], dtype=np.float64), C, B,
                                        scenario.extent)
    clr = float(clearance[0])
    return Contact(clr < footprint_radius, footprint_radius - clr, normal[0], clr)


# ---------------------------------------------------------------------------
# plant


def step_dynamics_batch(poses: np.ndarray, vels: np.ndarray, commands: np.ndarray, dt: float,
                        tau=TAU_V) -> tuple[np.ndarray, np.ndarray]:
    """First-order velocity tracking followed by planar body-velocity integration.

    Velocity relaxes with the exact exponential factor, so ``tau -> 0`` tracks the
    command immediately. The pose is advanced with the updated velocity using the
    midpoint heading.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    tau = np.asarray(tau, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        blend = np.where(tau > 0, -np.expm1(-dt / np.where(tau > 0, tau, 1.0)), 1.0)
    blend = np.reshape(blend, np.shape(blend) + (1,) * (vels.ndim - np.ndim(blend)))
    new_v = vels + blend * (commands - vels)
    theta_mid = poses[:, 2] + 0.5 * dt * new_v[:, 2]
    c, s = np.cos(theta_mid), np.sin(theta_mid)
    new_p = np.empty_like(poses)
    new_p[:, 0] = poses[:, 0] + dt * (c * new_v[:, 0] - s * new_v[:, 1])
    new_p[:, 1] = poses[:, 1] + dt * (s * new_v[:, 0] + c * new_v[:, 1])
    new_p[:, 2] = wrap_angle(poses[:, 2] + dt * new_v[:, 2])
    return new_p, new_v


def step_dynamics(state: RobotState, command, dt: float, tau: float = TAU_V) -> RobotState:
    pose, vel = state.as_arrays()
    cmd = np.asarray(command, dtype=np.float64).reshape(1, 3)
    p, v = step_dynamics_batch(pose[None], vel[None], cmd, dt, tau)
    return RobotState.from_arrays(p[0], v[0])


# ---------------------------------------------------------------------------
# trajectory dumps

TRAJECTORY_COLUMNS = ("t", "x", "y", "theta", "v_x", "v_y", "omega_z", "h", "alpha", "eta")


def write_trajectory_csv(path, rows: Iterable[Sequence[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for row in rows:
            if len(row) != len(TRAJECTORY_COLUMNS):
                raise ValueError(f"trajectory row has {len(row)} fields, expected {len(TRAJECTORY_COLUMNS)}")
            w.writerow([repr(float(v)) for v in row])


def read_trajectory_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != TRAJECTORY_COLUMNS:
            raise ValueError(f"unexpected trajectory header {header}")
        return np.array([[float(v) for v in row] for row in r], dtype=np.float64).reshape(-1, len(header))


def goal_in_body_frame(pose: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Goal position in each robot's body frame; pose (B,3), goal (B,2)."""
    d = goal - pose[:, :2]
    c, s = np.cos(pose[:, 2]), np.sin(pose[:, 2])
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)


def heading_error(pose: np.ndarray, goal: np.ndarray) -> np.ndarray:
    d = goal - pose[:, :2]
    return wrap_angle(np.arctan2(d[:, 1], d[:, 0]) - pose[:, 2])
