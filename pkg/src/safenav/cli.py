"""``safenav`` command line: train, eval, check and dump-traj.

Everything printed to stdout is JSON; exit codes are 0 (ok), 1 (a check suite
failed) and 2 (bad configuration or a checkpoint/config mismatch).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import checks
from .evaluation import ConfigHashMismatch, eval_scenarios, evaluate, load_policy, rollout_outcomes
from .trainer.config import ConfigError, load_config
from .trainer.ppo import Trainer
from .world import write_trajectory_csv

EXIT_OK, EXIT_SUITE_FAILED, EXIT_CONFIG = 0, 1, 2
ABLATIONS = ("no-acsi", "no-shield", "no-reg")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safenav", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy and write checkpoint + logs")
    t.add_argument("--config", type=Path)
    t.add_argument("--seed", type=int)
    t.add_argument("--difficulty", choices=("easy", "medium", "hard"))
    t.add_argument("--ablate", choices=ABLATIONS)
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--time-budget", type=float, help="stop after this many seconds")
    t.add_argument("--out", type=Path, default=Path("runs/default"))

    e = sub.add_parser("eval", help="evaluate a checkpoint over randomized trials")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--config", type=Path, help="refuse unless its hash matches the checkpoint")
    e.add_argument("--seed", type=int, default=0, help="evaluation seed (selects the trial layouts)")
    e.add_argument("--difficulty", choices=("easy", "medium", "hard"), default="easy")
    e.add_argument("--trials", type=int, default=100)
    e.add_argument("--out", type=Path, help="directory for eval_report.json and eval_trials.csv")

    c = sub.add_parser("check", help="run a property suite")
    c.add_argument("suite", choices=(*checks.SUITES, "all"))

    d = sub.add_parser("dump-traj", help="write one evaluation trajectory as CSV")
    d.add_argument("checkpoint", type=Path)
    d.add_argument("--config", type=Path)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--difficulty", choices=("easy", "medium", "hard"), default="easy")
    d.add_argument("--trial", type=int, default=0)
    d.add_argument("--out", type=Path, default=Path("trajectory.csv"))
    return p


def _train_overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.difficulty is not None:
        out["difficulty"] = args.difficulty
    if args.steps is not None:
        out["total_steps"] = args.steps
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config, _train_overrides(args)).ablate(args.ablate)
    trainer = Trainer(cfg, args.out)
    summary = trainer.train(time_budget=args.time_budget)
    summary.update(checkpoint=str(args.out / "checkpoint.bin"), config_hash=cfg.hash())
    _emit(summary)
    return EXIT_OK


def write_trials_csv(path: Path, report) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "group", "scenario_seed", "outcome", "duration", "path_length"])
        for r in report.results:
            w.writerow([r.index, r.group, r.scenario_seed, r.outcome, repr(r.duration), repr(r.path_length)])


def _runner(args):
    cfg = load_config(args.config) if args.config is not None else None
    return load_policy(args.checkpoint, cfg)


def cmd_eval(args) -> int:
    runner = _runner(args)
    report = evaluate(runner, runner.cfg, args.difficulty, args.trials, args.seed)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval_report.json").write_text(report.to_json())
        write_trials_csv(args.out / "eval_trials.csv", report)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_check(args) -> int:
    names = checks.SUITES if args.suite == "all" else (args.suite,)
    results = [checks.run_suite(n) for n in names]
    _emit(results[0] if len(results) == 1 else results)
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_SUITE_FAILED


def cmd_dump_traj(args) -> int:
    runner = _runner(args)
    items = eval_scenarios(args.difficulty, max(args.trial + 1, 1), args.seed)
    _, _, scn = items[args.trial]
    env, rows = rollout_outcomes(runner, [scn], runner.cfg, trace=0)
    write_trajectory_csv(args.out, rows)
    _emit({"trajectory": str(args.out), "rows": len(rows), "outcome": int(env.outcome[0])})
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "check": cmd_check, "dump-traj": cmd_dump_traj}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _emit({"error": "config", "problems": exc.problems})
        return EXIT_CONFIG
    except ConfigHashMismatch as exc:
        _emit({"error": "config hash mismatch", "checkpoint_hash": exc.checkpoint_hash,
               "config_hash": exc.config_hash})
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
