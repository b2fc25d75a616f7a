"""Differentiable log-sum-exp barrier shield for body-velocity commands.

The per-ray residues are fused into one smooth margin, and the nominal command
is pushed along the fused gradient by a damped closed-form half-space
projection. Every function broadcasts over leading batch axes: a single
instance is just a batch of shape ().

Command vectors are ordered ``(v_x, v_y, omega_z)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import NUM_RAYS, RAY_ANGLES, LidarScan

SINGULAR_EPS = 1e-3

# incremented on every call to project_damped; ablation runs assert it stays at 0
PROJECT_CALLS = 0


class SingularGradientError(ValueError):
    pass


@dataclass(frozen=True)
class ShieldParams:
    d_safe: float = 0.45
    k: float = 10.0
    eps_d: float = 1.0
    alpha_min: float = 0.1

    def __post_init__(self):
        for name in ("d_safe", "k", "eps_d", "alpha_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ShieldParams.{name} must be strictly positive")


@dataclass(frozen=True)
class ConstraintSet:
    residues: np.ndarray  # (..., N)
    gradients: np.ndarray  # (..., N, 3)


@dataclass(frozen=True)
class FusedBarrier:
    h: np.ndarray  # (...)
    grad: np.ndarray  # (..., 3)
    weights: np.ndarray  # (..., N)
    k: float


@dataclass(frozen=True)
class ShieldOutput:
    u_s: np.ndarray  # (..., 3)
    eta: np.ndarray  # (...)
    active: np.ndarray  # (...) bool
    jac_u: np.ndarray  # (..., 3, 3)
    jac_alpha: np.ndarray  # (..., 3)
    margin: np.ndarray  # b = <grad h, u_nom> + alpha h


def ray_gradients(angles: np.ndarray = RAY_ANGLES) -> np.ndarray:
    """Command-space gradient of each ray residue; the yaw-rate column is zero."""
    g = np.zeros(np.shape(angles) + (3,))
    g[..., 0] = -np.cos(angles)
    g[..., 1] = -np.sin(angles)
    return g


_RAY_GRADIENTS = ray_gradients()


def build_constraints(scan: LidarScan | np.ndarray, params: ShieldParams) -> ConstraintSet:
    """Residues ``rho_i - d_safe`` with gradients ``(-cos, -sin, 0)`` of each bearing.

    Accepts a :class:`LidarScan` or a raw ``(..., 41)`` range array.
    """
    if isinstance(scan, LidarScan):
        ranges = np.asarray(scan.ranges, dtype=np.float64)
        grads = ray_gradients(np.asarray(scan.ray_angles))
    else:
        ranges = np.asarray(scan, dtype=np.float64)
        if ranges.shape[-1] != NUM_RAYS:
            raise ValueError(f"expected {NUM_RAYS} ranges, got {ranges.shape[-1]}")
        grads = _RAY_GRADIENTS
    residues = ranges - params.d_safe
    grads = np.broadcast_to(grads, residues.shape + (3,))
    return ConstraintSet(residues, grads)


def fuse_lse(cs: ConstraintSet, k: float) -> FusedBarrier:
    """Smooth minimum ``-(1/k) log sum exp(-k h_i)`` and its softmin-weighted gradient."""
    if not k > 0:
        raise ValueError("k must be positive")
    h = np.asarray(cs.residues, dtype=np.float64)
    m = h.min(axis=-1, keepdims=True)
    z = np.exp(-k * (h - m))
    s = z.sum(axis=-1, keepdims=True)
    fused = m[..., 0] - np.log(s[..., 0]) / k
    w = z / s
    grad = np.einsum("...n,...nj->...j", w, cs.gradients)
    return FusedBarrier(fused, grad, w, k)


def project_damped(u_nom, fb: FusedBarrier, alpha, eps_d: float) -> ShieldOutput:
    """Damped closed-form projection of ``u_nom`` onto the barrier half-space.

    ``eta = max(0, -(<g, u> + alpha h) / (|g|^2 + eps_d))`` and ``u_s = u + eta g``.
    The Jacobians are taken with ``g`` and ``h`` held fixed; on the switching
    surface ``b = 0`` the inactive branch is used.
    """
    global PROJECT_CALLS
    PROJECT_CALLS += 1
    u = np.asarray(u_nom, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    g = np.asarray(fb.grad, dtype=np.float64)
    h = np.asarray(fb.h, dtype=np.float64)
    b = np.einsum("...j,...j->...", g, u) + alpha * h
    denom = np.einsum("...j,...j->...", g, g) + eps_d
    active = b < 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = np.where(active & (denom > 0), -b / denom, 0.0)
    u_s = np.where(active[..., None], u + eta[..., None] * g, u)

    eye = np.broadcast_to(np.eye(3), g.shape[:-1] + (3, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(denom > 0, 1.0 / denom, 0.0)
    outer = g[..., :, None] * g[..., None, :]
    jac_u = np.where(active[..., None, None], eye - inv[..., None, None] * outer, eye)
    jac_alpha = np.where(active[..., None], -(h * inv)[..., None] * g, 0.0)
    return ShieldOutput(u_s, eta, active, jac_u, jac_alpha, b)


def shield_backward(out: ShieldOutput, upstream_grad) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product: returns (dL/du_nom, dL/dalpha)."""
    up = np.asarray(upstream_grad, dtype=np.float64)
    grad_u = np.einsum("...ij,...i->...j", out.jac_u, up)
    grad_alpha = np.einsum("...i,...i->...", out.jac_alpha, up)
    return grad_u, grad_alpha


def solve_qp_oracle(u_nom, fb: FusedBarrier, alpha) -> np.ndarray:
    """Exact minimiser of ``0.5 |u - u_nom|^2`` s.t. ``<g, u> + alpha h >= 0`` (test oracle).

    Solved geometrically: a violated command is mapped to the nearest point of the
    boundary hyperplane ``{u : <n, u> = -alpha h / |g|}`` with ``n = g / |g|``.
    """
    u = np.asarray(u_nom, dtype=np.float64)
    g = np.asarray(fb.grad, dtype=np.float64)
    h = np.asarray(fb.h, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    norm = np.linalg.norm(g, axis=-1)
    if np.any(norm <= SINGULAR_EPS):
        raise SingularGradientError(f"barrier gradient norm {norm.min():.3g} <= {SINGULAR_EPS}")
    n = g / norm[..., None]
    offset = -alpha * h / norm  # hyperplane: <n, u> = offset
    signed = np.einsum("...j,...j->...", n, u) - offset
    feasible = signed >= 0.0
    base = offset[..., None] * n
    tangential = (u - base) - np.einsum("...j,...j->...", n, u - base)[..., None] * n
    projected = base + tangential
    return np.where(feasible[..., None], u, projected)


def shield_command(ranges, u_nom, alpha, params: ShieldParams) -> tuple[ShieldOutput, FusedBarrier]:
    """Full pipeline ranges -> residues -> fused barrier -> projected command."""
    fb = fuse_lse(build_constraints(ranges, params), params.k)
    return project_damped(u_nom, fb, alpha, params.eps_d), fb
