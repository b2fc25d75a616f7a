"""Collision-state replay and its success-driven curriculum.

A robot in an empty room drives straight into a wall. Every policy tick its
state goes into a 3 s ring buffer. On impact, with probability P_reset the
episode resumes from the state recorded 1 s earlier instead of starting over,
so the agent practises exactly the moment that went wrong. P_reset itself
follows a curriculum: it grows while the agent keeps reaching its goals.

Run:  python3 demos/02_collision_replay.py
"""
import numpy as np

from safenav.acsi import CurriculumState, update_curriculum
from safenav.checks import replay_fraction
from safenav.trainer.env import POLICY_DT, VecNavEnv
from safenav.world import empty_scenario


def replay_episode() -> None:
    scn = empty_scenario(start=(6.0, 5.0), goal=(2.0, 5.0), heading=0.0)
    env = VecNavEnv(1, scenarios=[scn], randomize=False, curriculum=CurriculumState(p_min=1.0, p_max=1.0))
    print("1. Driving east at 1 m/s with replay forced on (P_reset = 1)")
    for _ in range(120):
        x_before = env.pose[0, 0]
        res = env.step(np.array([[1.0, 0.0, 0.0]]))
        if res.terminal[0]:
            t = env.tick[0] * POLICY_DT
            print(f"   t = {t:.1f} s: collision near x = {x_before:.2f} m")
            print(f"   replayed = {bool(res.replayed[0])}; robot restored to x = {env.pose[0, 0]:.2f} m, "
                  f"v = {env.vel[0, 0]:.2f} m/s; goal unchanged at {env.goal[0]}")
            break


def curriculum() -> None:
    print("\n2. Curriculum: L_goal moves by 0.05 per episode, P_reset = 0.1 + 0.4 clip(L_goal, 0, 1)")
    cs = CurriculumState()
    rng = np.random.default_rng(0)
    for label, dist in [("ending at the goal", 0.1), ("ending at the goal", 0.1), ("ending 3 m short", 3.0)]:
        for _ in range(10):
            cs = update_curriculum(cs, dist + 0.05 * rng.random())
        print(f"   10 more episodes {label:18s}: L_goal = {cs.l_goal:+.2f}, P_reset = {cs.p_reset:.2f}")
    print(f"\n3. Sanity check: at P_reset = 0.5, 10,000 collisions replay {replay_fraction(10_000, 0.5, 0):.1%}")


if __name__ == "__main__":
    replay_episode()
    curriculum()
