"""Acceptance criteria, one test per criterion.

Criteria 1-8 are exact property suites and run in seconds. Criteria 9-11 train
policies from scratch on one CPU core and take roughly half an hour together;
deselect them with ``-m "not slow"``.
"""
import json
import math
import time

import numpy as np
import pytest

from safenav import checks
from safenav.cli import main
from safenav.evaluation import PolicyRunner, evaluate
from safenav.trainer.config import TrainConfig
from safenav.trainer.ppo import Trainer

TRAIN_WALL_LIMIT = 30 * 60
ABLATION_STEPS = 300_000
ABLATION_SEEDS = (0, 1, 2)


def test_c01_lse_sandwich(criterion):
    out = checks.lse_suite(n=10_000)
    ok = out["max_violation"] <= 1e-9 and out["seconds"] < 1.0
    criterion(1, ok, f"LSE sandwich violation {out['max_violation']:.1e} over {out['instances']} vectors "
                     f"in {out['seconds']:.2f} s")
    assert ok


def test_c02_qp_oracle(criterion):
    t0 = time.perf_counter()
    err = checks.oracle_max_error(10_000, seed=1)
    dt = time.perf_counter() - t0
    ok = err <= 1e-9 and dt < 1.0
    criterion(2, ok, f"max |u_s - u_QP| = {err:.1e} on 1e4 instances in {dt:.2f} s")
    assert ok


def test_c03_damping_bound(criterion):
    fails = checks.damping_failures(10_000, seed=2)
    criterion(3, fails == 0, f"{fails} damping-bound failures on 1e4 instances (zero gradients included)")
    assert fails == 0


def test_c04_shield_jacobians(criterion):
    err = checks.shield_jacobian_error(1000, seed=3, step=1e-5)
    criterion(4, err <= 1e-4, f"max Jacobian relative error {err:.1e} vs central differences")
    assert err <= 1e-4


def test_c05_end_to_end_gradient(criterion):
    err = checks.end_to_end_gradient_error(seed=4, width=8, n=4)
    criterion(5, err <= 1e-3, f"full-loss gradient relative error {err:.1e} (width 8, 4 transitions)")
    assert err <= 1e-3


def test_c06_forward_invariance(criterion):
    alphas = (0.5, 1.0, 2.0)
    h = checks.invariance_run(alphas, eps_d=0.0, dt=1e-3, duration=10.0)
    worst = float(h.min())
    damped = float(checks.invariance_run(alphas, eps_d=1.0, dt=1e-2, duration=10.0).min())
    ok = worst >= -0.01
    criterion(6, ok, f"min h = {worst:.4f} m over alpha in {alphas} (undamped projection; "
                     f"with eps_d = 1 the margin reaches {damped:.2f} m)")
    assert ok


def test_c07_replay_statistics(criterion):
    n = 10_000
    frac = checks.replay_fraction(n, 0.5, seed=5)
    out = checks.acsi_suite(events=n)
    ok = abs(frac - 0.5) <= 3 * math.sqrt(0.25 / n) and out["closed_form_max_error"] <= 1e-12
    criterion(7, ok, f"replay fraction {frac:.4f} (3 sigma = {3 * math.sqrt(0.25 / n):.4f}); "
                     f"closed-form error {out['closed_form_max_error']:.1e}")
    assert ok


def test_c08_reward_table(criterion):
    out = checks.rewards_suite(tol=1e-12)
    ok = out["passed"] and out["rows"] == 7
    criterion(8, ok, f"{out['rows']} reward rows on {out['cases']} hand-built states, "
                     f"max error {out['max_abs_error']:.1e}")
    assert ok


def _train_and_eval(cfg: TrainConfig, difficulty: str, trials: int = 100, seed: int = 0):
    t0 = time.perf_counter()
    trainer = Trainer(cfg)
    trainer.train(time_budget=TRAIN_WALL_LIMIT)
    seconds = time.perf_counter() - t0
    report = evaluate(PolicyRunner(trainer.net, trainer.params, cfg), cfg, difficulty, trials, seed=seed)
    return report, seconds


@pytest.mark.slow
def test_c09_training_smoke(criterion):
    cfg = TrainConfig(difficulty="easy", seed=0)
    t0 = time.perf_counter()
    report, train_s = _train_and_eval(cfg, "easy")
    total = time.perf_counter() - t0
    ok = report.sr >= 80.0 and total < TRAIN_WALL_LIMIT
    criterion(9, ok, f"Easy SR {report.sr:.0f}% (CR {report.cr:.0f}%, TR {report.tr:.0f}%) over 100 trials; "
                     f"trained {cfg.total_steps} steps in {train_s / 60:.1f} min, {total / 60:.1f} min total")
    assert ok


@pytest.mark.slow
def test_c10_ablation_direction(criterion):
    sr = {}
    for variant in ("none", "no-shield", "no-acsi"):
        for seed in ABLATION_SEEDS:
            cfg = TrainConfig(difficulty="hard", seed=seed, total_steps=ABLATION_STEPS).ablate(variant)
            sr[variant, seed] = _train_and_eval(cfg, "hard", seed=seed)[0].sr
    mean = {v: float(np.mean([sr[v, s] for s in ABLATION_SEEDS])) for v in ("none", "no-shield", "no-acsi")}
    ok = mean["none"] >= mean["no-shield"] and mean["none"] >= mean["no-acsi"]
    criterion(10, ok, f"Hard mean SR full {mean['none']:.1f}% / no-shield {mean['no-shield']:.1f}% / "
                      f"no-acsi {mean['no-acsi']:.1f}% ({ABLATION_STEPS} steps x 3 seeds)")
    assert ok


@pytest.mark.slow
def test_c11_determinism(criterion, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, "total_steps": 8192}))
    outputs = []
    for run in ("a", "b"):
        run_dir, eval_dir = tmp_path / run, tmp_path / f"{run}_eval"
        assert main(["train", "--config", str(cfg), "--out", str(run_dir)]) == 0
        assert main(["eval", str(run_dir / "checkpoint.bin"), "--config", str(cfg), "--trials", "30",
                     "--seed", "3", "--out", str(eval_dir)]) == 0
        outputs.append([(run_dir / "train_log.csv").read_bytes(), (eval_dir / "eval_trials.csv").read_bytes(),
                        (eval_dir / "eval_report.json").read_bytes(), (run_dir / "checkpoint.bin").read_bytes()])
    same = [x == y for x, y in zip(*outputs)]
    ok = all(same)
    criterion(11, ok, "train log, eval trials CSV, eval report and checkpoint byte-identical across two runs"
              if ok else f"mismatch in outputs {same}")
    assert ok
