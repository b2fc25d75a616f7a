import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from safenav.policy import ActorCritic, NetworkSizes, HISTORY_LEN, OBS_DIM
from safenav.trainer.losses import (
    gae, ppo_surrogate, range_loss, range_loss_grad, shield_loss, shield_loss_grad, smooth_loss,
)

U_MIN = np.array([-0.5, -0.8, -1.0])
U_MAX = np.array([1.7, 0.8, 1.0])


class TestShieldLoss:
    def test_vanishes(self):
        u = np.array([[0.2, 0.1, 0.0]])
        assert shield_loss(u, u, np.array([0.5]), 0.1) == 0.0

    def test_example(self):
        u = np.zeros((1, 3))
        us = np.array([[0.3, 0.0, 0.0]])
        assert shield_loss(u, us, np.array([0.05]), 0.1) == pytest.approx(0.0925, abs=1e-15)

    def test_alpha_gradient_piecewise(self):
        u = np.zeros((1, 3))
        _, _, da = shield_loss_grad(u, u, np.array([0.05]), 0.1)
        assert da[0] == pytest.approx(-2 * (0.1 - 0.05))
        _, _, da = shield_loss_grad(u, u, np.array([0.2]), 0.1)
        assert da[0] == 0.0

    def test_gradient_fd(self):
        rng = np.random.default_rng(0)
        u, us, a = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.uniform(0.0, 0.2, 4)
        gn, gs, ga = shield_loss_grad(u, us, a, 0.1)
        step = 1e-6
        for arr, g in ((u, gn), (us, gs), (a, ga)):
            flat, gf = arr.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + step
                up = shield_loss(u, us, a, 0.1)
                flat[i] = old - step
                dn = shield_loss(u, us, a, 0.1)
                flat[i] = old
                assert gf[i] == pytest.approx((up - dn) / (2 * step), abs=1e-7)


class TestRangeLoss:
    def test_inside_is_zero(self):
        u = np.array([[1.0, 0.0, 0.5]])
        assert range_loss(u, U_MIN, U_MAX) == 0.0
        assert not np.any(range_loss_grad(u, U_MIN, U_MAX))

    def test_example(self):
        assert range_loss(np.array([[2.0, 0.0, 0.0]]), U_MIN, U_MAX) == pytest.approx(0.09, abs=1e-15)

    def test_both_sides(self):
        u = np.array([[-1.0, 1.0, 0.0]])
        assert range_loss(u, U_MIN, U_MAX) == pytest.approx(0.25 + 0.04)
        assert np.allclose(range_loss_grad(u, U_MIN, U_MAX), [[-1.0, 0.4, 0.0]])


class TestSurrogate:
    def test_zero_advantage(self):
        lp = np.array([-1.0, -2.0])
        loss, d, ratio = ppo_surrogate(lp, lp, np.zeros(2), 0.2)
        assert loss == 0.0 and np.all(ratio == 1.0) and not np.any(d)

    def test_clipped_has_no_gradient(self):
        loss, d, _ = ppo_surrogate(np.array([0.5]), np.array([0.0]), np.array([1.0]), 0.2)
        assert loss == pytest.approx(-1.2) and d[0] == 0.0

    def test_pessimistic_branch_keeps_gradient(self):
        # ratio above the band with a negative advantage: the unclipped term is the minimum
        loss, d, r = ppo_surrogate(np.array([0.5]), np.array([0.0]), np.array([-1.0]), 0.2)
        assert loss == pytest.approx(r[0]) and d[0] == pytest.approx(r[0])


class TestGAE:
    def test_lambda_one_is_monte_carlo(self):
        rng = np.random.default_rng(0)
        T, N, gamma = 12, 3, 0.9
        rewards, values = rng.normal(size=(T, N)), rng.normal(size=(T, N))
        dones = rng.random((T, N)) < 0.2
        last = rng.normal(size=N)
        adv, ret = gae(rewards, values, dones, last, gamma, 1.0)
        for n in range(N):
            g = last[n]
            for t in reversed(range(T)):
                g = rewards[t, n] + gamma * g * (1.0 - dones[t, n])
                assert adv[t, n] == pytest.approx(g - values[t, n], abs=1e-9)
                assert ret[t, n] == pytest.approx(g, abs=1e-9)

    def test_lambda_zero_is_td(self):
        r, v, last = np.array([[1.0], [2.0]]), np.array([[0.5], [0.2]]), np.array([3.0])
        adv, _ = gae(r, v, np.zeros((2, 1)), last, 0.9, 0.0)
        assert adv[:, 0] == pytest.approx([1.0 + 0.9 * 0.2 - 0.5, 2.0 + 0.9 * 3.0 - 0.2])

    def test_done_cuts_bootstrap(self):
        adv, _ = gae(np.array([[1.0]]), np.array([[0.0]]), np.array([[True]]), np.array([100.0]), 0.99, 0.95)
        assert adv[0, 0] == 1.0


class TestSmooth:
    @pytest.fixture
    def setup(self):
        net = ActorCritic(NetworkSizes.tiny(8))
        p = net.init_params(np.random.default_rng(0))
        rng = np.random.default_rng(1)
        obs = rng.normal(size=(4, OBS_DIM))
        hist = rng.normal(size=(4, HISTORY_LEN, OBS_DIM))
        return net, p, obs, hist, obs + rng.normal(size=obs.shape), hist + rng.normal(size=hist.shape)

    def test_beta_zero(self, setup):
        net, p, o, h, no, nh = setup
        loss, _ = smooth_loss(net, p, o, h, no, nh, np.zeros(4), 0.05, 0.005)
        assert loss == 0.0

    def test_static_transition(self, setup):
        net, p, o, h, _, _ = setup
        loss, _ = smooth_loss(net, p, o, h, o, h, np.full(4, 0.7), 0.05, 0.005)
        assert loss == 0.0

    def test_constant_network(self, setup):
        net, p, o, h, no, nh = setup
        q = {k: (v if k.endswith(".b") else np.zeros_like(v)) for k, v in p.items()}
        loss, _ = smooth_loss(net, q, o, h, no, nh, np.full(4, -0.4), 0.05, 0.005)
        assert loss == 0.0

    def test_gradient_fd(self, setup):
        net, p, o, h, no, nh = setup
        beta = np.array([0.3, -0.8, 0.5, 0.9])
        _, g = smooth_loss(net, p, o, h, no, nh, beta, 0.05, 0.005)
        step = 1e-6
        for name in ("nav.1.W", "critic.0.b", "encoder.0.W"):
            flat = p[name].reshape(-1)
            for i in range(4):
                old = flat[i]
                flat[i] = old + step
                up = smooth_loss(net, p, o, h, no, nh, beta, 0.05, 0.005, want_grads=False)[0]
                flat[i] = old - step
                dn = smooth_loss(net, p, o, h, no, nh, beta, 0.05, 0.005, want_grads=False)[0]
                flat[i] = old
                num = (up - dn) / (2 * step)
                assert g[name].reshape(-1)[i] == pytest.approx(num, rel=1e-4, abs=1e-9)

    def test_empty_batch(self, setup):
        net, p, *_ = setup
        e = np.zeros((0, OBS_DIM))
        eh = np.zeros((0, HISTORY_LEN, OBS_DIM))
        loss, g = smooth_loss(net, p, e, eh, e, eh, np.zeros(0), 0.05, 0.005)
        assert loss == 0.0 and not any(np.any(v) for v in g.values())


@settings(max_examples=100)
@given(u=arrays(np.float64, (3, 3), elements=st.floats(-3, 3)))
def test_range_loss_nonnegative_and_zero_iff_inside(u):
    loss = range_loss(u, U_MIN, U_MAX)
    inside = np.all((u >= U_MIN) & (u <= U_MAX))
    assert loss >= 0 and (loss == 0) == inside
