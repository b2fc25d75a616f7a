"""Train a navigation policy briefly, then evaluate it against a scripted baseline.

The default budget (200k steps, a couple of minutes on one core) is enough to
see the policy learn to reach goals in the Easy rooms; the full default
config trains for 1.2M steps. Afterwards we evaluate 100 held-out rooms and
write one trajectory as CSV.

Run:  python3 demos/03_train_and_evaluate.py [--steps 200000] [--out runs/demo]
"""
import argparse
import logging
from pathlib import Path

from safenav.evaluation import GoalSeekingPolicy, PolicyRunner, eval_scenarios, evaluate, rollout_outcomes
from safenav.trainer.config import TrainConfig
from safenav.trainer.ppo import Trainer
from safenav.world import write_trajectory_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--difficulty", default="easy", choices=["easy", "medium", "hard"])
    ap.add_argument("--out", type=Path, default=Path("runs/demo"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = TrainConfig(difficulty=args.difficulty, total_steps=args.steps)
    print(f"Training {args.steps} steps on {args.difficulty} with 64 environments...")
    trainer = Trainer(cfg, run_dir=args.out)
    summary = trainer.train()
    print(f"done: {summary['iterations']} iterations in {summary['seconds']:.0f} s, "
          f"checkpoint at {args.out / 'checkpoint.bin'}")

    policy = PolicyRunner(trainer.net, trainer.params, cfg)
    print("\nHeld-out evaluation (100 rooms, 30 s timeout, deterministic policy + shield):")
    print("  learned  ", evaluate(policy, cfg, args.difficulty, 100).table_row())
    print("  scripted ", evaluate(GoalSeekingPolicy(), cfg, args.difficulty, 100).table_row())

    _, _, scn = eval_scenarios(args.difficulty, 1, 0)[0]
    env, rows = rollout_outcomes(policy, [scn], cfg, trace=0)
    path = args.out / "trajectory.csv"
    write_trajectory_csv(path, rows)
    print(f"\nFirst evaluation room: outcome code {int(env.outcome[0])} (1 success, 2 collision, 3 timeout); "
          f"trajectory with h, alpha and eta per tick in {path}")


if __name__ == "__main__":
    main()
