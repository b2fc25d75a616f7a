"""Self-contained property suites behind ``safenav check``.

Every suite returns a JSON-serialisable dict with a ``passed`` flag and the
measured worst case, so the same numbers can be asserted in tests and printed
from the command line.
"""
from __future__ import annotations

import math
import time

import numpy as np

from . import acsi
from .policy import ActorCritic, NetworkSizes, OBS_DIM, HISTORY_LEN
from .shield import (
    SINGULAR_EPS, ConstraintSet, FusedBarrier, ShieldParams, build_constraints, fuse_lse, project_damped, solve_qp_oracle,
)
from .trainer.config import TrainConfig
from .trainer.rewards import StuckTracker, compute_reward
from .world import (
    NUM_RAYS, RANGE_MAX, RAY_ANGLES, RobotState, cast_lidar_batch, empty_scenario, pad_obstacles,
    step_dynamics_batch,
)

SUITES = ("shield", "gradients", "acsi", "rewards", "lse")


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        out["seconds"] = time.perf_counter() - t0
        return out
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def random_barriers(rng: np.random.Generator, n: int, min_norm: float = 0.0, zero_fraction: float = 0.0):
    """Random (u_nom, barrier, alpha) instances, optionally with some exactly-zero gradients."""
    u = rng.uniform(-2.0, 2.0, (n, 3))
    h = rng.uniform(-1.0, 2.0, n)
    g = rng.normal(size=(n, 3))
    g *= rng.uniform(0.0, 2.0, (n, 1)) / np.linalg.norm(g, axis=1, keepdims=True)
    if min_norm > 0:
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        g = np.where(norm <= min_norm, g / norm * (min_norm + rng.uniform(1e-4, 1.0, (n, 1))), g)
    if zero_fraction > 0:
        g[rng.random(n) < zero_fraction] = 0.0
    alpha = rng.uniform(0.05, 3.0, n)
    return u, FusedBarrier(h, g, np.ones((n, 1)), 10.0), alpha


# ---------------------------------------------------------------------------
# lse


@_timed
def lse_suite(n: int = 10_000, seed: int = 0, tol: float = 1e-9) -> dict:
    """Sandwich ``min h - ln(N)/k <= h_fused <= min h`` on random residue vectors."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in (1.0, 10.0, 100.0):
        res = rng.uniform(-1.0, RANGE_MAX, (n, NUM_RAYS))
        grads = np.broadcast_to(np.zeros(3), res.shape + (3,))
        fused = fuse_lse(ConstraintSet(res, grads), k).h
        lo = res.min(axis=1) - math.log(NUM_RAYS) / k
        hi = res.min(axis=1)
        worst = max(worst, float(np.max(lo - fused)), float(np.max(fused - hi)))
    return {"suite": "lse", "instances": 3 * n, "max_violation": max(worst, 0.0),
            "passed": bool(worst <= tol)}


# ---------------------------------------------------------------------------
# shield


def oracle_max_error(n: int = 10_000, seed: int = 1) -> float:
    """Max ``|u_s - u_QP|`` with ``eps_d = 0`` over gradients safely away from zero."""
    rng = np.random.default_rng(seed)
    u, fb, alpha = random_barriers(rng, n, min_norm=max(SINGULAR_EPS, 1e-3))
    ours = project_damped(u, fb, alpha, 0.0).u_s
    ref = solve_qp_oracle(u, fb, alpha)
    return float(np.max(np.linalg.norm(ours - ref, axis=1)))


def damping_failures(n: int = 10_000, seed: int = 2, eps_d: float = 1.0) -> int:
    """Count violations of ``eta <= |b| / eps_d`` (or non-finite outputs), zero gradients included."""
    rng = np.random.default_rng(seed)
    u, fb, alpha = random_barriers(rng, n, zero_fraction=0.2)
    out = project_damped(u, fb, alpha, eps_d)
    bound = np.abs(out.margin) / eps_d
    bad = (out.eta > bound) | ~np.all(np.isfinite(out.u_s), axis=1) | ~np.isfinite(out.eta)
    return int(bad.sum())


@_timed
def shield_suite(n: int = 10_000, seed: int = 0, tol: float = 1e-9) -> dict:
    err = oracle_max_error(n, seed + 1)
    fails = damping_failures(n, seed + 2)
    return {"suite": "shield", "instances": n, "oracle_max_error": err, "damping_failures": fails,
            "passed": bool(err <= tol and fails == 0)}


# ---------------------------------------------------------------------------
# gradients


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


def shield_jacobian_error(n: int = 1000, seed: int = 3, step: float = 1e-5, eps_d: float = 1.0) -> float:
    """Max relative error of the analytic shield Jacobians against central differences."""
    rng = np.random.default_rng(seed)
    u, fb, alpha = random_barriers(rng, 4 * n)
    b = np.einsum("ij,ij->i", fb.grad, u) + alpha * fb.h
    keep = np.nonzero(np.abs(b) >= 1e-7)[0][:n]
    u, alpha = u[keep], alpha[keep]
    fb = FusedBarrier(fb.h[keep], fb.grad[keep], fb.weights[keep], fb.k)
    out = project_damped(u, fb, alpha, eps_d)
    num_u = np.zeros_like(out.jac_u)
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        plus = project_damped(u + e, fb, alpha, eps_d).u_s
        minus = project_damped(u - e, fb, alpha, eps_d).u_s
        num_u[:, :, j] = (plus - minus) / (2 * step)
    num_a = (project_damped(u, fb, alpha + step, eps_d).u_s
             - project_damped(u, fb, alpha - step, eps_d).u_s) / (2 * step)
    worst = 0.0
    for i in range(len(u)):
        worst = max(worst, _rel_err(out.jac_u[i], num_u[i]), _rel_err(out.jac_alpha[i], num_a[i]))
    return worst


def synthetic_batch(rng: np.random.Generator, n: int = 4):
    """A small random transition batch with consistent shapes."""
    from .trainer.ppo import TransitionBatch
    obs = rng.normal(size=(n, OBS_DIM)) * 0.5
    hist = rng.normal(size=(n, HISTORY_LEN, OBS_DIM)) * 0.5
    ranges = rng.uniform(0.2, RANGE_MAX, (n, NUM_RAYS))
    obs[:, 11:] = ranges / RANGE_MAX
    return TransitionBatch(
        obs=obs, hist=hist, actions=rng.normal(size=(n, 3)), u_s=np.zeros((n, 3)),
        alpha=np.ones(n), log_probs=rng.normal(size=n) - 2.0, rewards=np.zeros(n), values=np.zeros(n),
        dones=np.zeros(n, dtype=bool), ranges=ranges, next_obs=obs + rng.normal(size=(n, OBS_DIM)) * 0.1,
        advantages=rng.normal(size=n), returns=rng.normal(size=n),
    )


def end_to_end_gradient_error(seed: int = 4, width: int = 8, n: int = 4, step: float = 1e-6,
                              cfg: TrainConfig | None = None, max_per_tensor: int = 256) -> float:
    """Relative error of the analytic full-loss gradient against central differences.

    Every coordinate is probed except in tensors larger than ``max_per_tensor``
    (the encoder input layer), where a random subset is used.
    """
    from .trainer.ppo import total_loss
    cfg = cfg or TrainConfig(clip_ratio=10.0)  # keep every ratio on the smooth branch
    rng = np.random.default_rng(seed)
    sizes = NetworkSizes.tiny(width)
    net = ActorCritic(sizes)
    params = net.init_params(rng)
    # scale up the tiny nav head so the shield and range terms are exercised
    last = f"nav.{len(net.blocks['nav'][0]) - 1}.W"
    params[last] = params[last] * 100.0
    mb = synthetic_batch(rng, n)
    beta = rng.uniform(-1.0, 1.0, n)
    _, grads = total_loss(net, params, mb, cfg, beta)
    analytic, numeric = [], []
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_per_tensor:
            coords = np.sort(rng.choice(flat.size, max_per_tensor, replace=False))
        for i in coords:
            old = flat[i]
            flat[i] = old + step
            lp = total_loss(net, params, mb, cfg, beta, want_grads=False)[0].total
            flat[i] = old - step
            lm = total_loss(net, params, mb, cfg, beta, want_grads=False)[0].total
            flat[i] = old
            numeric.append((lp - lm) / (2 * step))
        analytic.append(grads[name].reshape(-1)[coords])
    return _rel_err(np.concatenate(analytic), np.asarray(numeric))


@_timed
def gradients_suite(n: int = 1000, seed: int = 0, jac_tol: float = 1e-4, e2e_tol: float = 1e-3) -> dict:
    jac = shield_jacobian_error(n, seed + 3)
    e2e = end_to_end_gradient_error(seed + 4)
    return {"suite": "gradients", "instances": n, "max_jacobian_rel_error": jac,
            "end_to_end_rel_error": e2e, "passed": bool(jac <= jac_tol and e2e <= e2e_tol)}


# ---------------------------------------------------------------------------
# acsi


def replay_fraction(events: int = 10_000, p_reset: float = 0.5, seed: int = 5) -> float:
    rng = np.random.default_rng(seed)
    ring = acsi.StateHistoryRing()
    for t in range(30):
        ring.record(RobotState((float(t), 0.0), 0.0), t * acsi.POLICY_DT)
    t_now = 29 * acsi.POLICY_DT
    hits = sum(isinstance(acsi.on_collision(ring, p_reset, rng, t_now), acsi.ReplayCritical)
               for _ in range(events))
    return hits / events


@_timed
def acsi_suite(events: int = 10_000, seed: int = 0) -> dict:
    frac = replay_fraction(events, 0.5, seed + 5)
    sigma = math.sqrt(0.25 / events)
    closed = {0.0: 0.1, 1.0: 0.5, 1.5: 0.5, 0.5: 0.3}
    worst = max(abs(float(acsi.reset_probability(l, 0.1, 0.5)) - v) for l, v in closed.items())
    ok = abs(frac - 0.5) <= 3 * sigma and worst <= 1e-12
    return {"suite": "acsi", "events": events, "replay_fraction": frac, "sigma": sigma,
            "closed_form_max_error": worst, "passed": bool(ok)}


# ---------------------------------------------------------------------------
# rewards


def reference_reward(d: float, theta: float, phi: float, v: tuple[float, float, float], cmd_vx: float,
                     cmd_wz: float, dp_max: float, collided: bool, terminated: bool) -> dict[str, float]:
    """Scalar evaluation of each weighted term, written out independently of the vectorised code."""
    vx, vy, wz = v
    prox = 1.0 / (1.0 + 2.0 * d * d)
    return {
        "term": -100.0 * (1.0 if terminated else 0.0),
        "reach": 10.0 * (prox if d < 0.5 else 0.0),
        "velo": 15.0 * (math.cos(theta) * vx + prox),
        "clear": 15.0 * (math.cos(phi) * vx if d > 1.0 else prox),
        "stuck": -5.0 * float(d > 1.0 and dp_max < 0.1 and cmd_vx > 0.0 and abs(cmd_wz) < 1.0),
        "coll": -4.0 * ((1.0 + 4.0 * (vx * vx + vy * vy + wz * wz)) if collided else 0.0),
        "omega": -0.0,
    }


def reward_cases():
    """Hand-built states: (pose, vel, ranges, command, goal, stuck positions, collided, terminated)."""
    open_ray = np.full(NUM_RAYS, 1.0)
    open_ray[30] = 2.5
    cases = [
        # parked on the goal
        ((5.0, 5.0, 0.0), (0.0, 0.0, 0.0), np.full(NUM_RAYS, 3.0), (0.0, 0.0, 0.0), (5.0, 5.0), None, False, False),
        # driving at the goal from 3 m, straight ahead open
        ((2.0, 5.0, 0.0), (1.0, 0.0, 0.0), np.full(NUM_RAYS, 3.0), (1.0, 0.0, 0.0), (5.0, 5.0), None, False, False),
        # heading 90 degrees off, most open ray off-axis
        ((2.0, 5.0, np.pi / 2), (0.8, 0.1, 0.2), open_ray, (0.8, 0.0, 0.2), (5.0, 5.0), None, False, False),
        # inside 1 m but outside the reach radius
        ((4.2, 5.0, 0.3), (0.5, 0.0, 0.0), open_ray, (0.5, 0.0, 0.0), (5.0, 5.0), None, False, False),
        # stuck against something while commanding forward
        ((2.0, 2.0, 0.0), (0.0, 0.0, 0.0), np.full(NUM_RAYS, 0.5), (0.6, 0.0, 0.3), (8.0, 8.0), "still", False, False),
        # collision with motion
        ((2.0, 2.0, 0.0), (0.7, -0.2, 0.5), np.full(NUM_RAYS, 0.3), (0.7, 0.0, 0.5), (8.0, 8.0), None, True, True),
    ]
    return cases


@_timed
def rewards_suite(tol: float = 1e-12) -> dict:
    worst = 0.0
    nonzero: set[str] = set()
    for pose, vel, ranges, cmd, goal, stuck_kind, coll, term in reward_cases():
        pose, vel, cmd, goal = map(np.asarray, (pose, vel, cmd, goal))
        tracker = StuckTracker(1, 10)
        for j in range(10):
            drift = 0.0 if stuck_kind == "still" else 0.2 * (j - 9)
            tracker.push(pose[None, :2] + [drift, 0.0])
        dp = float(tracker.max_displacement()[0])
        got = compute_reward(pose, vel, ranges, cmd, goal, tracker, [coll], [term])
        dx, dy = goal - pose[:2]
        d = math.hypot(dx, dy)
        theta = math.atan2(dy, dx) - pose[2]
        best = max(range(NUM_RAYS), key=lambda i: (ranges[i], -abs(RAY_ANGLES[i])))
        ref = reference_reward(d, theta, float(RAY_ANGLES[best]), tuple(vel), cmd[0], cmd[2], dp, coll, term)
        for k, v in ref.items():
            worst = max(worst, abs(float(getattr(got, k)[0]) - v))
            if v != 0.0:
                nonzero.add(k)
        worst = max(worst, abs(float(got.total[0]) - sum(ref.values())))
    return {"suite": "rewards", "cases": len(reward_cases()), "rows": len(ref), "rows_nonzero": sorted(nonzero),
            "max_abs_error": worst, "passed": bool(worst <= tol)}


# ---------------------------------------------------------------------------
# forward invariance


def invariance_run(alphas, command=(1.0, 0.0, 0.0), eps_d: float = 0.0, dt: float = 1e-3,
                   duration: float = 10.0, start=(7.0, 5.0), heading: float = 0.0,
                   params: ShieldParams | None = None) -> np.ndarray:
    """Drive a fixed command at the east wall of an empty room through the shield.

    One robot per gain in ``alphas`` (``command`` may also be one row per robot).
    The shielded command is tracked exactly, with no actuator lag. Returns the
    fused margin ``h`` with shape (steps + 1, len(alphas)).
    """
    params = params or ShieldParams()
    alphas = np.atleast_1d(np.asarray(alphas, dtype=np.float64))
    n = len(alphas)
    scn = empty_scenario(start=start, goal=start, heading=heading)
    C, B = pad_obstacles([scn], 1, 1)
    C, B = np.repeat(C, n, axis=0), np.repeat(B, n, axis=0)
    pose = np.tile([start[0], start[1], heading], (n, 1)).astype(np.float64)
    vel = np.zeros((n, 3))
    u_nom = np.broadcast_to(np.asarray(command, dtype=np.float64), (n, 3))
    steps = int(round(duration / dt))
    hs = np.empty((steps + 1, n))
    for i in range(steps + 1):
        fb = fuse_lse(build_constraints(cast_lidar_batch(pose, C, B, scn.extent), params), params.k)
        hs[i] = fb.h
        if i == steps:
            break
        u_s = project_damped(u_nom, fb, alphas, eps_d).u_s
        pose, vel = step_dynamics_batch(pose, vel, u_s, dt, np.zeros(n))
    return hs


SUITE_FUNCS = {
    "shield": shield_suite,
    "gradients": gradients_suite,
    "acsi": acsi_suite,
    "rewards": rewards_suite,
    "lse": lse_suite,
}


def run_suite(name: str) -> dict:
    if name not in SUITE_FUNCS:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return SUITE_FUNCS[name]()
