"""Loss terms with their analytic gradients.

Each ``*_loss`` returns the scalar; the matching ``*_grad`` returns partial
derivatives with respect to its array arguments. Batched losses average over
the leading axis.
"""
from __future__ import annotations

import numpy as np

from ..policy import ActorCritic


def shield_loss(u_nom, u_s, alpha, alpha_min: float) -> float:
    """``|u_s - u_nom|^2 + max(0, alpha_min - alpha)^2`` averaged over the batch."""
    u_nom, u_s, alpha = np.asarray(u_nom), np.asarray(u_s), np.asarray(alpha)
    gap = np.maximum(alpha_min - alpha, 0.0)
    per = np.sum((u_s - u_nom) ** 2, axis=-1) + gap ** 2
    return float(np.mean(per))


def shield_loss_grad(u_nom, u_s, alpha, alpha_min: float):
    """Returns (dL/du_nom, dL/du_s, dL/dalpha), the direct partials only."""
    u_nom, u_s, alpha = np.asarray(u_nom), np.asarray(u_s), np.asarray(alpha)
    n = max(1, int(np.prod(alpha.shape)))
    diff = 2.0 * (u_s - u_nom) / n
    d_alpha = -2.0 * np.maximum(alpha_min - alpha, 0.0) / n
    return -diff, diff, d_alpha


def range_loss(u_s, u_min, u_max) -> float:
    u_s = np.asarray(u_s)
    excess = u_s - np.clip(u_s, u_min, u_max)
    per = np.sum(excess ** 2, axis=-1)
    return float(np.mean(per))


def range_loss_grad(u_s, u_min, u_max) -> np.ndarray:
    u_s = np.asarray(u_s)
    n = max(1, int(np.prod(u_s.shape[:-1])))
    return 2.0 * (u_s - np.clip(u_s, u_min, u_max)) / n


def ppo_surrogate(logp_new, logp_old, advantages, clip: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Clipped surrogate (negated for minimisation); returns (loss, dL/dlogp_new, ratios)."""
    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantages
    n = len(advantages)
    loss = -float(np.mean(np.minimum(unclipped, clipped)))
    takes_unclipped = unclipped <= clipped
    d_logp = np.where(takes_unclipped, -advantages * ratio / n, 0.0)
    return loss, d_logp, ratio


def gae(rewards, values, dones, last_value, gamma: float, lam: float):
    """Generalised advantage estimates over a (T, N) rollout.

    ``dones[t]`` cuts the bootstrap after step ``t``; time-limit bootstraps are
    expected to be folded into ``rewards`` by the caller.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    T = len(rewards)
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    for t in reversed(range(T)):
        next_v = last_value if t == T - 1 else values[t + 1]
        live = 1.0 - np.asarray(dones[t], dtype=np.float64)
        delta = rewards[t] + gamma * next_v * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + values


def smooth_loss(net: ActorCritic, params, obs, hist, next_obs, next_hist, beta, lambda_pi: float,
                lambda_v: float, *, want_grads: bool = True):
    """Lipschitz penalty between ``x_t`` and ``x_t + beta (x_{t+1} - x_t)``.

    Interpolation is done on the raw network inputs (observation and history),
    so the penalty reaches the encoder as well. Returns (loss, grads or None).
    """
    beta = np.asarray(beta, dtype=np.float64)
    if len(obs) == 0:
        return 0.0, ({k: np.zeros_like(v) for k, v in params.items()} if want_grads else None)
    obs_bar = obs + beta[:, None] * (next_obs - obs)
    hist_bar = hist + beta[:, None, None] * (next_hist - hist)
    out, tape = net.forward(params, obs, hist)
    out_bar, tape_bar = net.forward(params, obs_bar, hist_bar)
    dm = out.mean - out_bar.mean
    dv = out.value - out_bar.value
    loss = lambda_pi * float(np.mean(dm ** 2)) + lambda_v * float(np.mean(dv ** 2))
    if not want_grads:
        return loss, None
    g_m = 2.0 * lambda_pi * dm / dm.size
    g_v = 2.0 * lambda_v * dv / dv.size
    grads = net.backward(params, tape, d_mean=g_m, d_value=g_v)
    grads_bar = net.backward(params, tape_bar, d_mean=-g_m, d_value=-g_v)
    return loss, {k: grads[k] + grads_bar[k] for k in grads}
