"""Walk through the safety shield on a robot facing a wall.

The robot stands 1.3 m from the east wall of an empty 10 m room and the
"policy" asks for full speed straight ahead. We trace every stage the shield
goes through: lidar ranges, per-ray barrier residues, the smooth minimum,
and the projected command. Then we let the shielded robot drive and watch the
fused margin h settle instead of crossing zero.

Run:  python3 demos/01_shield_walkthrough.py
"""
import numpy as np

from safenav.checks import invariance_run
from safenav.shield import ShieldParams, build_constraints, fuse_lse, project_damped, solve_qp_oracle
from safenav.world import RAY_ANGLES, RobotState, cast_lidar, empty_scenario


def main() -> None:
    params = ShieldParams()
    scn = empty_scenario(start=(8.7, 5.0), goal=(2.0, 5.0), heading=0.0)
    scan = cast_lidar(scn, RobotState(scn.start, 0.0))
    ranges = scan.ranges

    print("1. Lidar: 41 rays over 360 degrees, clipped to [0.1, 3.0] m")
    for i in (0, 10, 20, 30, 40):
        print(f"   ray {i:2d} at {np.degrees(RAY_ANGLES[i]):7.1f} deg -> {ranges[i]:.3f} m")

    cs = build_constraints(ranges, params)
    fb = fuse_lse(cs, params.k)
    print("\n2. Each ray gives a residue h_i = range - d_safe; the fused barrier is a smooth minimum")
    print(f"   min h_i = {cs.residues.min():.4f} m, fused h = {float(fb.h):.4f} m "
          f"(never more than ln(41)/k = {np.log(41) / params.k:.3f} m below the true minimum)")
    print(f"   grad h  = {np.round(fb.grad, 4)}  (points away from the wall)")

    u_nom = np.array([1.5, 0.0, 0.0])
    print(f"\n3. Nominal command {u_nom} with gain alpha:")
    for alpha in (0.5, 1.0, 2.0):
        a = np.array(alpha)
        exact = project_damped(u_nom, fb, a, 0.0)
        damped = project_damped(u_nom, fb, a, params.eps_d)
        oracle = solve_qp_oracle(u_nom, fb, a)
        print(f"   alpha={alpha}: exact u_s={np.round(exact.u_s, 3)}  QP oracle={np.round(oracle, 3)}  "
              f"damped (eps_d={params.eps_d}) u_s={np.round(damped.u_s, 3)}")

    print("\n4. Closed loop: drive the shielded command into the wall for 10 s at dt = 1 ms")
    alphas = (0.5, 1.0, 2.0)
    h = invariance_run(alphas, eps_d=0.0)
    for j, a in enumerate(alphas):
        print(f"   alpha={a}: h starts at {h[0, j]:.3f} m, ends at {h[-1, j]:.4f} m, minimum {h[:, j].min():.4f} m")
    print("   The margin decays toward zero but never crosses it: the safe set is forward invariant.")
    hd = invariance_run(alphas, eps_d=1.0, dt=1e-2)
    print(f"   With the damping term eps_d = 1 the correction is only partial and h reaches {hd.min():.2f} m;")
    print("   damping trades strict invariance for bounded corrections when the barrier gradient vanishes.")


if __name__ == "__main__":
    main()
