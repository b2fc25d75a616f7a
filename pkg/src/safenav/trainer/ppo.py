"""PPO with GAE, the shield-aware auxiliary losses and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from ..policy import (
    ActorCritic, HistoryBuffer, gaussian_entropy, gaussian_log_prob, sample_action, save_checkpoint,
)
from ..shield import ShieldParams, fuse_lse, build_constraints, project_damped, shield_backward
from .config import TrainConfig
from .env import VecNavEnv
from .losses import gae, ppo_surrogate, range_loss, range_loss_grad, shield_loss, shield_loss_grad

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TransitionBatch:
    obs: np.ndarray
    hist: np.ndarray
    actions: np.ndarray  # sampled nominal commands
    u_s: np.ndarray  # executed (shielded) commands
    alpha: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    ranges: np.ndarray
    next_obs: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def flat(self) -> "TransitionBatch":
        def f(a):
            return None if a is None else a.reshape((-1,) + a.shape[2:])
        return TransitionBatch(**{fl.name: f(getattr(self, fl.name)) for fl in fields(self)})

    def take(self, idx) -> "TransitionBatch":
        return TransitionBatch(**{fl.name: None if getattr(self, fl.name) is None else getattr(self, fl.name)[idx]
                                  for fl in fields(self)})

    def __len__(self) -> int:
        return len(self.obs)


@dataclass
class LossReport:
    ppo: float = 0.0
    policy: float = 0.0
    value: float = 0.0
    entropy: float = 0.0
    shield: float = 0.0
    range: float = 0.0
    smooth: float = 0.0
    reg: float = 0.0
    total: float = 0.0
    clip_fraction: float = 0.0

    def add(self, other: "LossReport", w: float) -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + w * getattr(other, f.name))


def shield_params(cfg: TrainConfig) -> ShieldParams:
    return ShieldParams(d_safe=cfg.d_safe, k=cfg.k, eps_d=cfg.eps_d, alpha_min=cfg.alpha_min)


def next_history(hist: np.ndarray, obs: np.ndarray) -> np.ndarray:
    return np.concatenate([hist[:, 1:], obs[:, None, :]], axis=1)


def total_loss(net: ActorCritic, params, mb: TransitionBatch, cfg: TrainConfig, beta: np.ndarray,
               want_grads: bool = True):
    """Clipped PPO + shield intervention + kinematic regularisation, with gradients.

    The auxiliary terms act on the policy mean: the shield is re-applied to the
    mean command with the current gain, and its Jacobians carry the gradient
    back to the navigation and gain heads.
    """
    n = len(mb)
    out, tape = net.forward(params, mb.obs, mb.hist)
    logp = gaussian_log_prob(mb.actions, out.mean, out.log_std)
    pol, d_logp, ratio = ppo_surrogate(logp, mb.log_probs, mb.advantages, cfg.clip_ratio)
    v_err = out.value - mb.returns
    vloss = float(np.mean(v_err ** 2))
    ent = gaussian_entropy(out.log_std)
    l_ppo = pol + cfg.value_coef * vloss - cfg.entropy_coef * ent

    std = np.exp(out.log_std)
    z = (mb.actions - out.mean) / std
    d_mean = d_logp[:, None] * z / std
    d_log_std = (d_logp[:, None] * (z * z - 1.0)).sum(axis=0) - cfg.entropy_coef
    d_value = cfg.value_coef * 2.0 * v_err / n
    d_alpha = np.zeros(n)

    if cfg.use_shield:
        fb = fuse_lse(build_constraints(mb.ranges, shield_params(cfg)), cfg.k)
        so = project_damped(out.mean, fb, out.alpha, cfg.eps_d)
        u_s = so.u_s
    else:
        so = None
        u_s = out.mean
    l_shield = shield_loss(out.mean, u_s, out.alpha, cfg.alpha_min)
    l_range = range_loss(u_s, cfg.u_min, cfg.u_max)

    beta_obs = mb.obs + beta[:, None] * (mb.next_obs - mb.obs)
    nh = next_history(mb.hist, mb.obs)
    beta_hist = mb.hist + beta[:, None, None] * (nh - mb.hist)
    out_bar, tape_bar = net.forward(params, beta_obs, beta_hist)
    dm = out.mean - out_bar.mean
    dv = out.value - out_bar.value
    l_smooth = cfg.lambda_pi * float(np.mean(dm ** 2)) + cfg.lambda_v * float(np.mean(dv ** 2))
    l_reg = l_range + l_smooth
    total = l_ppo + cfg.lambda_shield * l_shield + cfg.lambda_reg * l_reg

    report = LossReport(ppo=l_ppo, policy=pol, value=vloss, entropy=ent, shield=l_shield,
                        range=l_range, smooth=l_smooth, reg=l_reg, total=total,
                        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > cfg.clip_ratio)))
    if not np.isfinite(total):
        raise TrainingDiverged(f"non-finite loss: {report}")
    if not want_grads:
        return report, None

    # shield and range terms: upstream gradient at u_s, plus the direct partials
    g_nom, g_us, g_alpha = shield_loss_grad(out.mean, u_s, out.alpha, cfg.alpha_min)
    g_us = cfg.lambda_shield * g_us + cfg.lambda_reg * range_loss_grad(u_s, cfg.u_min, cfg.u_max)
    d_mean += cfg.lambda_shield * g_nom
    d_alpha += cfg.lambda_shield * g_alpha
    if so is not None:
        gu, ga = shield_backward(so, g_us)
        d_mean += gu
        d_alpha += ga
    else:
        d_mean += g_us

    g_m = cfg.lambda_reg * 2.0 * cfg.lambda_pi * dm / dm.size
    g_v = cfg.lambda_reg * 2.0 * cfg.lambda_v * dv / dv.size
    d_mean += g_m
    d_value = d_value + g_v

    grads = net.backward(params, tape, d_mean=d_mean, d_log_std=d_log_std, d_alpha=d_alpha, d_value=d_value)
    grads_bar = net.backward(params, tape_bar, d_mean=-g_m, d_value=-g_v)
    for k in grads:
        grads[k] = grads[k] + grads_bar[k]
    return report, grads


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(grads, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def dump_batch(path, batch: TransitionBatch) -> None:
    np.savez_compressed(path, **{f.name: getattr(batch, f.name) for f in fields(batch)
                                 if getattr(batch, f.name) is not None})


def ppo_update(net: ActorCritic, params, batch: TransitionBatch, cfg: TrainConfig, opt: Adam,
               rng: np.random.Generator, dump_dir=None) -> LossReport:
    """Several epochs of minibatch steps on one rollout; mutates ``params`` in place.

    A non-finite loss aborts the update; the offending batch is written to
    ``dump_dir/diverged_batch.npz`` first when a directory is given.
    """
    flat = batch.flat()
    adv = flat.advantages
    flat.advantages = (adv - adv.mean()) / (adv.std() + 1e-8)
    m = len(flat)
    mb_size = m // cfg.minibatches
    report = LossReport()
    count = cfg.epochs * cfg.minibatches
    for _ in range(cfg.epochs):
        perm = rng.permutation(m)
        for j in range(cfg.minibatches):
            idx = perm[j * mb_size:(j + 1) * mb_size]
            beta = rng.uniform(-1.0, 1.0, len(idx))
            try:
                rep, grads = total_loss(net, params, flat.take(idx), cfg, beta)
            except TrainingDiverged:
                if dump_dir is not None:
                    Path(dump_dir).mkdir(parents=True, exist_ok=True)
                    dump_batch(Path(dump_dir) / "diverged_batch.npz", flat)
                raise
            clip_grad_norm(grads, cfg.max_grad_norm)
            opt.step(params, grads)
            report.add(rep, 1.0 / count)
    return report


def run_episode_loop(env: VecNavEnv, net: ActorCritic, params, cfg: TrainConfig, history: HistoryBuffer,
                     rng: np.random.Generator, steps: int):
    """Collect ``steps`` policy ticks from every env; returns (batch, rollout stats)."""
    sp = shield_params(cfg)
    N = env.n
    buf = {k: [] for k in ("obs", "hist", "actions", "u_s", "alpha", "log_probs", "rewards", "values",
                           "dones", "ranges", "next_obs")}
    comp_sum: dict[str, float] = {}
    active_sum = 0.0
    ended = {"success": 0, "collision": 0, "timeout": 0}
    for _ in range(steps):
        out, _ = net.forward(params, env.obs, history.data)
        u_nom, logp = sample_action(out, rng)
        if cfg.use_shield:
            fb = fuse_lse(build_constraints(env.obs_ranges, sp), sp.k)
            so = project_damped(u_nom, fb, out.alpha, sp.eps_d)
            u_s = so.u_s
            active_sum += float(np.mean(so.active))
        else:
            u_s = u_nom
        buf["obs"].append(env.obs.copy())
        buf["hist"].append(history.snapshot())
        buf["ranges"].append(env.obs_ranges.copy())
        res = env.step(u_s)
        history.push(buf["obs"][-1])
        reward = res.reward.total * cfg.reward_scale
        cut = res.truncated | (res.success if cfg.bootstrap_success else False)
        if np.any(cut):
            tr = np.nonzero(cut)[0]
            boot, _ = net.forward(params, res.next_obs[tr], history.data[tr])
            reward = reward.copy()
            reward[tr] += cfg.gamma * boot.value
        done = res.done
        history.reset(done)
        for k, v in res.reward.means().items():
            comp_sum[k] = comp_sum.get(k, 0.0) + v
        ended["success"] += int(res.success.sum())
        ended["collision"] += int(res.terminal.sum())
        ended["timeout"] += int(res.truncated.sum())
        buf["actions"].append(u_nom)
        buf["u_s"].append(u_s)
        buf["alpha"].append(out.alpha)
        buf["log_probs"].append(logp)
        buf["rewards"].append(reward)
        buf["values"].append(out.value)
        buf["dones"].append(done)
        buf["next_obs"].append(res.next_obs)
    batch = TransitionBatch(**{k: np.asarray(v) for k, v in buf.items()})
    last, _ = net.forward(params, env.obs, history.data)
    batch.advantages, batch.returns = gae(batch.rewards, batch.values, batch.dones, last.value,
                                          cfg.gamma, cfg.gae_lambda)
    n_end = sum(ended.values())
    stats = {f"r_{k}": v / steps for k, v in comp_sum.items()}
    stats.update(
        shield_active=active_sum / steps,
        mean_alpha=float(np.mean(batch.alpha)),
        p_reset=float(np.mean(env.p_reset)),
        episodes=n_end,
        sr_estimate=ended["success"] / n_end if n_end else float("nan"),
        **{f"n_{k}": v for k, v in ended.items()},
    )
    return batch, stats


LOG_COLUMNS = (
    "iteration", "step", "r_total", "r_term", "r_reach", "r_velo", "r_clear", "r_stuck", "r_coll", "r_omega",
    "loss_total", "loss_ppo", "loss_shield", "loss_range", "loss_smooth", "loss_reg", "entropy",
    "mean_alpha", "shield_active", "p_reset", "n_replay", "n_full_reset", "episodes", "sr_estimate",
)


class Trainer:
    """Owns the environments, network, optimiser and logs for one training run."""

    def __init__(self, cfg: TrainConfig, run_dir=None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.net = ActorCritic(cfg.network_sizes(), dtype=cfg.net_dtype)
        root = np.random.SeedSequence(cfg.seed)
        init_seq, roll_seq, upd_seq = root.spawn(3)
        self.params = self.net.init_params(np.random.default_rng(init_seq))
        self.rollout_rng = np.random.default_rng(roll_seq)
        self.update_rng = np.random.default_rng(upd_seq)
        self.opt = Adam(self.params, cfg.learning_rate)
        self.env = make_train_env(cfg)
        self.history = HistoryBuffer(cfg.n_envs)
        self.step = 0
        self.iteration = 0
        self.log_rows: list[dict] = []

    def train_iteration(self) -> dict:
        cfg = self.cfg
        before = dict(self.env.counts)
        batch, stats = run_episode_loop(self.env, self.net, self.params, cfg, self.history,
                                        self.rollout_rng, cfg.rollout_len)
        rep = ppo_update(self.net, self.params, batch, cfg, self.opt, self.update_rng, self.run_dir)
        self.step += cfg.n_envs * cfg.rollout_len
        self.iteration += 1
        row = {
            "iteration": self.iteration, "step": self.step,
            "loss_total": rep.total, "loss_ppo": rep.ppo, "loss_shield": rep.shield,
            "loss_range": rep.range, "loss_smooth": rep.smooth, "loss_reg": rep.reg, "entropy": rep.entropy,
            "n_replay": self.env.counts["replay"] - before["replay"],
            "n_full_reset": self.env.counts["full_reset"] - before["full_reset"],
        }
        for k in LOG_COLUMNS:
            if k not in row:
                row[k] = stats.get(k, float("nan"))
        self.log_rows.append(row)
        return row

    def train(self, total_steps: int | None = None, time_budget: float | None = None) -> dict:
        total = total_steps if total_steps is not None else self.cfg.total_steps
        t0 = time.perf_counter()
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True))
        while self.step < total:
            row = self.train_iteration()
            if self.iteration % 10 == 0:
                log.info("iter %d step %d r=%.3f sr~%.2f alpha=%.2f active=%.2f p_reset=%.2f",
                         row["iteration"], row["step"], row["r_total"], row["sr_estimate"],
                         row["mean_alpha"], row["shield_active"], row["p_reset"])
            if self.run_dir is not None and self.iteration % self.cfg.checkpoint_every == 0:
                self.save()
            if time_budget is not None and time.perf_counter() - t0 > time_budget:
                log.warning("time budget exhausted at step %d", self.step)
                break
        if self.run_dir is not None:
            self.save()
        return {"steps": self.step, "iterations": self.iteration, "seconds": time.perf_counter() - t0}

    def save(self) -> Path:
        assert self.run_dir is not None
        ckpt = self.run_dir / "checkpoint.bin"
        save_checkpoint(ckpt, self.params, self.net.sizes, config=self.cfg.to_dict(), step=self.step)
        write_log_csv(self.run_dir / "train_log.csv", self.log_rows)
        return ckpt


def write_log_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(row[k])) if isinstance(row[k], float) else row[k]) for k in LOG_COLUMNS})


def make_train_env(cfg: TrainConfig) -> VecNavEnv:
    from ..acsi import CurriculumState
    curriculum = CurriculumState(p_min=cfg.p_min, p_max=cfg.p_max, d_up=cfg.d_up, d_down=cfg.d_down)
    return VecNavEnv(
        cfg.n_envs, difficulty=cfg.difficulty, seed=cfg.seed, footprint=cfg.footprint,
        episode_duration=cfg.episode_duration, goal_radius=cfg.goal_radius, goal_stay=cfg.goal_stay,
        randomize=cfg.randomize, use_acsi=cfg.use_acsi, curriculum=curriculum,
        curriculum_step=cfg.curriculum_step, t_back=cfg.t_back, t_hist=cfg.t_hist,
        stuck_window=cfg.stuck_window, scenario_pool=cfg.scenario_pool, u_min=cfg.u_min, u_max=cfg.u_max,
    )

