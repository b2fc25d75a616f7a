"""Actor-critic MLP stack with a hand-written reverse pass.

Parameters live in a flat ``dict[str, ndarray]`` so the optimiser, checkpoint
writer and finite-difference checks can treat them uniformly. ``forward``
returns a :class:`Tape` that ``backward`` consumes; gradients that arrive at
the nominal command or the gain through the shield are injected by the caller
as plain upstream gradients.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

OBS_DIM = 52
HISTORY_LEN = 10
ACTION_DIM = 3
LOG_STD_MIN, LOG_STD_MAX = -4.0, 1.0
# softplus^-1(1.0): the gain head starts out at alpha ~ 1
ALPHA_BIAS_INIT = float(np.log(np.e - 1.0))

CHECKPOINT_MAGIC = b"SNAVCKPT"
CHECKPOINT_VERSION = 1


class NonFiniteActivation(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetworkSizes:
    encoder: tuple[int, ...] = (128, 32)
    backbone: tuple[int, ...] = (256, 128)
    nav_head: tuple[int, ...] = (64,)
    alpha_head: tuple[int, ...] = (32,)
    critic: tuple[int, ...] = (256, 128)
    obs_dim: int = OBS_DIM
    history: int = HISTORY_LEN
    log_std_init: float = -0.7

    @classmethod
    def tiny(cls, width: int = 8) -> "NetworkSizes":
        return cls(encoder=(width, width), backbone=(width, width), nav_head=(width,),
                   alpha_head=(width,), critic=(width, width))

    @property
    def latent_dim(self) -> int:
        return self.encoder[-1]

    @property
    def joint_dim(self) -> int:
        return self.obs_dim + self.latent_dim


@dataclass(frozen=True)
class PolicyOutput:
    mean: np.ndarray  # (B, 3) nominal command
    log_std: np.ndarray  # (3,)
    alpha: np.ndarray  # (B,)
    value: np.ndarray  # (B,)
    alpha_raw: np.ndarray  # (B,) pre-softplus


@dataclass
class Tape:
    caches: dict = field(default_factory=dict)
    log_std_raw: np.ndarray | None = None
    batch: int = 0


# ---------------------------------------------------------------------------
# elementwise pieces


def elu(x):
    return np.maximum(x, 0.0) + np.expm1(np.minimum(x, 0.0))


def elu_grad_from_output(y):
    # for x <= 0, d/dx (e^x - 1) = y + 1
    return np.minimum(y, 0.0) + 1.0


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# MLP blocks


def _layer_dims(in_dim: int, hidden: tuple[int, ...], out_dim: int | None) -> list[tuple[int, int]]:
    dims = [in_dim, *hidden] + ([out_dim] if out_dim is not None else [])
    return list(zip(dims[:-1], dims[1:]))


def _blocks(sizes: NetworkSizes) -> dict[str, tuple[list[tuple[int, int]], bool]]:
    """name -> (layer dims, whether the last layer is activated)."""
    enc_in = sizes.history * sizes.obs_dim
    return {
        "encoder": (_layer_dims(enc_in, sizes.encoder, None), False),
        "backbone": (_layer_dims(sizes.joint_dim, sizes.backbone, None), True),
        "nav": (_layer_dims(sizes.backbone[-1], sizes.nav_head, ACTION_DIM), False),
        "alpha": (_layer_dims(sizes.backbone[-1], sizes.alpha_head, 1), False),
        "critic": (_layer_dims(sizes.joint_dim, sizes.critic, 1), False),
    }


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    tall = n_in >= n_out
    a = rng.standard_normal((n_in, n_out) if tall else (n_out, n_in))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return gain * (q if tall else q.T)


def mlp_forward(params, name, x, layers, act_last, tape: Tape):
    caches = []
    n = len(layers)
    for i in range(n):
        W, b = params[f"{name}.{i}.W"], params[f"{name}.{i}.b"]
        pre = x @ W + b
        activated = i < n - 1 or act_last
        y = elu(pre) if activated else pre
        if not np.all(np.isfinite(y)):
            bad = int(np.sum(~np.isfinite(y)))
            raise NonFiniteActivation(
                f"non-finite activation in {name}.{i}: {bad} entries; "
                f"|x|max={np.nanmax(np.abs(x)):.3g} |W|max={np.abs(W).max():.3g}")
        caches.append((x, y, activated))
        x = y
    tape.caches[name] = caches
    return x


def mlp_backward(params, name, dy, tape: Tape, grads: dict):
    for i in reversed(range(len(tape.caches[name]))):
        x, y, activated = tape.caches[name][i]
        if activated:
            dy = dy * elu_grad_from_output(y)
        grads[f"{name}.{i}.W"] = grads.get(f"{name}.{i}.W", 0.0) + x.T @ dy
        grads[f"{name}.{i}.b"] = grads.get(f"{name}.{i}.b", 0.0) + dy.sum(axis=0)
        dy = dy @ params[f"{name}.{i}.W"].T
    return dy


# ---------------------------------------------------------------------------
# actor-critic


class ActorCritic:
    """Encoder, shared backbone, nominal-command head, softplus gain head and critic."""

    def __init__(self, sizes: NetworkSizes | None = None, dtype=np.float64):
        self.sizes = sizes or NetworkSizes()
        self.blocks = _blocks(self.sizes)
        # hidden layers may run in float32; everything leaving the network is float64
        self.dtype = np.dtype(dtype)

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for name, (layers, _) in self.blocks.items():
            for i, (n_in, n_out) in enumerate(layers):
                gain = 1.0
                if name == "nav" and i == len(layers) - 1:
                    gain = 0.01
                params[f"{name}.{i}.W"] = orthogonal(rng, n_in, n_out, gain)
                params[f"{name}.{i}.b"] = np.zeros(n_out)
        params[f"alpha.{len(self.blocks['alpha'][0]) - 1}.b"][:] = ALPHA_BIAS_INIT
        params["log_std"] = np.full(ACTION_DIM, self.sizes.log_std_init)
        return {k: v.astype(self.dtype) for k, v in params.items()}

    def shield_param_names(self, params) -> list[str]:
        return [k for k in params if k.startswith("alpha.")]

    def encode_history(self, params, history: np.ndarray, tape: Tape | None = None) -> np.ndarray:
        tape = tape if tape is not None else Tape()
        flat = history.reshape(history.shape[0], -1)
        return mlp_forward(params, "encoder", flat, self.blocks["encoder"][0], False, tape)

    def forward(self, params, obs: np.ndarray, history: np.ndarray) -> tuple[PolicyOutput, Tape]:
        """obs (B, 52), history (B, H, 52) -> outputs and the tape for ``backward``."""
        obs = np.asarray(obs, dtype=self.dtype)
        history = np.asarray(history, dtype=self.dtype)
        tape = Tape(batch=obs.shape[0])
        z = self.encode_history(params, history, tape)
        x = np.concatenate([obs, z], axis=1)
        f = mlp_forward(params, "backbone", x, *self.blocks["backbone"], tape)
        mean = mlp_forward(params, "nav", f, *self.blocks["nav"], tape)
        raw = mlp_forward(params, "alpha", f, *self.blocks["alpha"], tape)[:, 0]
        value = mlp_forward(params, "critic", x, *self.blocks["critic"], tape)[:, 0]
        tape.caches["alpha_raw"] = raw
        tape.log_std_raw = params["log_std"]
        f64 = np.float64
        log_std = np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX).astype(f64)
        raw64 = raw.astype(f64)
        return PolicyOutput(mean.astype(f64), log_std, softplus(raw64), value.astype(f64), raw64), tape

    def backward(self, params, tape: Tape, d_mean=None, d_log_std=None, d_alpha=None,
                 d_value=None) -> dict[str, np.ndarray]:
        """Reverse pass from output gradients to parameter gradients.

        Any output gradient may be omitted (treated as zero).
        """
        B = tape.batch
        dt = self.dtype
        grads: dict[str, np.ndarray] = {}
        n_latent = self.sizes.latent_dim
        dx = np.zeros((B, self.sizes.joint_dim), dtype=dt)
        df = np.zeros((B, self.sizes.backbone[-1]), dtype=dt)
        if d_mean is not None:
            if np.shape(d_mean) != (B, ACTION_DIM):
                raise ValueError(f"d_mean shape {np.shape(d_mean)} does not match tape batch {B}")
            df += mlp_backward(params, "nav", np.asarray(d_mean, dtype=dt), tape, grads)
        if d_alpha is not None:
            d_raw = np.asarray(d_alpha, dtype=np.float64).reshape(B) * sigmoid(tape.caches["alpha_raw"].astype(np.float64))
            df += mlp_backward(params, "alpha", d_raw[:, None].astype(dt), tape, grads)
        if d_mean is not None or d_alpha is not None:
            dx += mlp_backward(params, "backbone", df, tape, grads)
        if d_value is not None:
            dv = np.asarray(d_value, dtype=dt).reshape(B, 1)
            dx += mlp_backward(params, "critic", dv, tape, grads)
        dz = dx[:, self.sizes.obs_dim:self.sizes.obs_dim + n_latent]
        if np.any(dz):
            mlp_backward(params, "encoder", dz, tape, grads)
        g_ls = np.zeros(ACTION_DIM)
        if d_log_std is not None:
            inside = (tape.log_std_raw >= LOG_STD_MIN) & (tape.log_std_raw <= LOG_STD_MAX)
            g_ls = np.where(inside, np.asarray(d_log_std, dtype=np.float64).reshape(-1, ACTION_DIM).sum(0), 0.0)
        grads["log_std"] = g_ls.astype(dt)
        for k, v in params.items():
            if k not in grads:
                grads[k] = np.zeros_like(v)
            elif np.ndim(grads[k]) == 0:
                grads[k] = np.zeros_like(v) + grads[k]
            grads[k] = grads[k].astype(dt, copy=False)
        return grads


# ---------------------------------------------------------------------------
# diagonal Gaussian head


def gaussian_log_prob(actions, mean, log_std) -> np.ndarray:
    std = np.exp(log_std)
    z = (actions - mean) / std
    return np.sum(-0.5 * z * z - log_std - 0.5 * np.log(2.0 * np.pi), axis=-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std + 0.5 * np.log(2.0 * np.pi * np.e)))


def sample_action(out: PolicyOutput, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    noise = rng.standard_normal(out.mean.shape)
    actions = out.mean + np.exp(out.log_std) * noise
    return actions, gaussian_log_prob(actions, out.mean, out.log_std)


# ---------------------------------------------------------------------------
# observation history


class HistoryBuffer:
    """Per-environment ring of the last ``H`` observations, oldest first, zero before warm-up."""

    def __init__(self, n_envs: int, length: int = HISTORY_LEN, obs_dim: int = OBS_DIM):
        self.data = np.zeros((n_envs, length, obs_dim))

    def push(self, obs: np.ndarray) -> None:
        self.data[:, :-1] = self.data[:, 1:]
        self.data[:, -1] = obs

    def reset(self, mask=None) -> None:
        if mask is None:
            self.data[:] = 0.0
        else:
            self.data[np.asarray(mask)] = 0.0

    def snapshot(self) -> np.ndarray:
        return self.data.copy()


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, params: dict[str, np.ndarray], sizes: NetworkSizes, *,
                    config: dict | None = None, step: int = 0) -> None:
    """Binary blob (shape header, float64 row-major body) plus a JSON sidecar."""
    path = Path(path)
    names = sorted(params)
    header = bytearray(CHECKPOINT_MAGIC)
    header += struct.pack("<II", CHECKPOINT_VERSION, len(names))
    for name in names:
        enc = name.encode()
        arr = np.asarray(params[name])
        header += struct.pack("<H", len(enc)) + enc
        header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    path.write_bytes(bytes(header) + body)
    sidecar = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash(config or {}),
        "step": int(step),
        "sizes": asdict(sizes),
        "config": config or {},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    shapes = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        shapes.append((name, shape))
    params = {}
    for name, shape in shapes:
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(blob):
        raise ValueError(f"checkpoint {path} has {len(blob) - off} trailing bytes")
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    return params, sidecar


def sizes_from_dict(d: dict) -> NetworkSizes:
    return NetworkSizes(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
