import csv

import numpy as np
import pytest

from safenav import shield
from safenav.checks import end_to_end_gradient_error
from safenav.policy import ActorCritic, HistoryBuffer, gaussian_log_prob
from safenav.trainer.config import TrainConfig
from safenav.trainer.ppo import (
    LOG_COLUMNS, Adam, Trainer, TrainingDiverged, clip_grad_norm, make_train_env, ppo_update, run_episode_loop,
    total_loss,
)


def small_cfg(**kw) -> TrainConfig:
    base = dict(n_envs=4, rollout_len=8, minibatches=2, epochs=2, scenario_pool=8, encoder=[8, 4],
                backbone=[16, 8], nav_head=[8], alpha_head=[4], critic=[16, 8], net_dtype="float64")
    base.update(kw)
    return TrainConfig.from_dict(base)


def collect(cfg, seed=0):
    net = ActorCritic(cfg.network_sizes(), dtype=cfg.net_dtype)
    params = net.init_params(np.random.default_rng(seed))
    env = make_train_env(cfg)
    batch, stats = run_episode_loop(env, net, params, cfg, HistoryBuffer(cfg.n_envs),
                                    np.random.default_rng(seed + 1), cfg.rollout_len)
    return net, params, batch, stats


class TestRollout:
    def test_shapes(self):
        cfg = small_cfg()
        _, _, batch, stats = collect(cfg)
        assert batch.obs.shape == (8, 4, 52) and batch.hist.shape[:2] == (8, 4)
        assert batch.advantages.shape == (8, 4) and np.all(np.isfinite(batch.returns))
        assert 0.0 <= stats["shield_active"] <= 1.0

    def test_first_epoch_ratios_are_one(self):
        cfg = small_cfg()
        net, params, batch, _ = collect(cfg)
        flat = batch.flat()
        out, _ = net.forward(params, flat.obs, flat.hist)
        logp = gaussian_log_prob(flat.actions, out.mean, out.log_std)
        assert np.max(np.abs(np.exp(logp - flat.log_probs) - 1.0)) < 1e-9
        flat.advantages = np.ones(len(flat))
        rep, _ = total_loss(net, params, flat, cfg, np.zeros(len(flat)))
        assert rep.clip_fraction == 0.0

    def test_no_shield_skips_projection(self):
        cfg = small_cfg().ablate("no-shield")
        before = shield.PROJECT_CALLS
        net, params, batch, _ = collect(cfg)
        ppo_update(net, params, batch, cfg, Adam(params, cfg.learning_rate), np.random.default_rng(0))
        assert shield.PROJECT_CALLS == before
        assert np.array_equal(batch.u_s, batch.actions)

    def test_shield_runs_when_enabled(self):
        before = shield.PROJECT_CALLS
        collect(small_cfg())
        assert shield.PROJECT_CALLS > before


class TestLoss:
    def test_zero_auxiliary_weights_give_plain_ppo(self):
        cfg = small_cfg(lambda_shield=0.0, lambda_reg=0.0)
        net, params, batch, _ = collect(cfg)
        flat = batch.flat()
        beta = np.random.default_rng(0).uniform(-1, 1, len(flat))
        rep, grads = total_loss(net, params, flat, cfg, beta)
        assert rep.total == rep.ppo
        plain = small_cfg(lambda_shield=0.0, lambda_reg=0.0, use_shield=False)
        rep2, grads2 = total_loss(net, params, flat, plain, beta)
        assert rep2.total == rep.total
        for k in grads:
            assert np.allclose(grads[k], grads2[k], rtol=0, atol=1e-15)

    def test_shield_gradient_reaches_gain_head(self):
        cfg = small_cfg(lambda_shield=1.0, lambda_reg=1.0)
        net, params, batch, _ = collect(cfg)
        flat = batch.flat()
        flat.advantages = np.zeros(len(flat))
        flat.ranges = np.full_like(flat.ranges, 0.3)  # everything close: the shield is active
        _, grads = total_loss(net, params, flat, cfg, np.zeros(len(flat)))
        assert any(np.any(grads[k]) for k in grads if k.startswith("alpha"))

    def test_end_to_end_gradient(self):
        assert end_to_end_gradient_error() <= 1e-4


class TestUpdate:
    def test_grad_clip(self):
        g = {"a": np.array([3.0, 4.0])}
        assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(g["a"]) == pytest.approx(1.0)

    def test_divergence_dumps_batch(self, tmp_path):
        cfg = small_cfg()
        net, params, batch, _ = collect(cfg)
        batch.returns = batch.returns.copy()
        batch.returns[0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            ppo_update(net, params, batch, cfg, Adam(params, cfg.learning_rate), np.random.default_rng(0), tmp_path)
        dumped = np.load(tmp_path / "diverged_batch.npz")
        assert dumped["obs"].shape == (32, 52)


class TestTrainer:
    def test_same_seed_same_parameters(self):
        a, b = Trainer(small_cfg(seed=5)), Trainer(small_cfg(seed=5))
        for _ in range(2):
            a.train_iteration()
            b.train_iteration()
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_different_seed_differs(self):
        a, b = Trainer(small_cfg(seed=1)), Trainer(small_cfg(seed=2))
        assert not np.array_equal(a.params["nav.0.W"], b.params["nav.0.W"])

    def test_float32_network(self):
        t = Trainer(small_cfg(net_dtype="float32"))
        t.train_iteration()
        assert t.params["critic.0.W"].dtype == np.float32

    def test_run_directory(self, tmp_path):
        t = Trainer(small_cfg(), run_dir=tmp_path)
        summary = t.train(total_steps=64)
        assert summary["steps"] == 64 and summary["iterations"] == 2
        assert (tmp_path / "checkpoint.bin").exists() and (tmp_path / "config.json").exists()
        with open(tmp_path / "train_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 and tuple(rows[0]) == LOG_COLUMNS
