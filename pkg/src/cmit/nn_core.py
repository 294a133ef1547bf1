"""Dense numpy building blocks for a small encoder-only transformer.

Every layer has an explicit forward that returns its output together with a
cache, and a backward that consumes the cache. Tensors are float64 numpy
arrays laid out as ``[batch, seq, features]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cloud_model import EPSILON, reverse_stats


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{name}: {bad} non-finite value(s)")
    return arr


# --------------------------------------------------------------------------
# parameters


class Params:
    """Ordered named parameter arrays with matching gradient buffers."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> str:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        self.values[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.values[name])
        return name

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def count(self) -> int:
        return sum(v.size for v in self.values.values())

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for k, v in snap.items():
            self.values[k][...] = v


# --------------------------------------------------------------------------
# elementwise / small ops


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    r = pred - target
    return float(np.mean(r**2)), 2.0 * r / r.size


def sinusoidal_encoding(seq_len: int, d: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# --------------------------------------------------------------------------
# functional layers


def linear_forward(x, w, b):
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w + b, x


def linear_backward(dy, x, w):
    d_in, d_out = w.shape
    dw = x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
    db = dy.reshape(-1, d_out).sum(axis=0)
    return dy @ w.T, dw, db


def layer_norm_forward(x, gamma, beta, eps: float = 1e-5):
    """Standard layer normalization over the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


@dataclass(frozen=True)
class CloudNormConfig:
    noise_divisor: float = 100.0
    train_stochastic: bool = True
    eval_stochastic: bool = False
    epsilon: float = EPSILON
    affine: bool = False
    per_group_noise: bool = False

    def __post_init__(self):
        if not self.noise_divisor > 0:
            raise ValueError("noise_divisor must be > 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


_TINY = np.finfo(np.float64).tiny


@dataclass
class CloudNormCache:
    x: np.ndarray
    ex: np.ndarray
    en_prime: np.ndarray
    u: np.ndarray


def cloud_norm_forward(x: np.ndarray, cfg: CloudNormConfig, rng_seed=None,
                       stochastic: bool = False, noise: np.ndarray | None = None):
    """Replace each feature vector by its cloud membership degrees.

    Statistics ``(ex, en, he)`` come from the reverse generator over the last
    axis. When stochastic, each entry gets its own entropy draw
    ``en' ~ N(en, (he / noise_divisor)^2)`` (one per vector with
    ``per_group_noise``); otherwise ``en' = en``. ``noise`` may supply the
    standard-normal draws explicitly, which freezes them for gradient checks.
    """
    if x.shape[-1] < 2:
        raise ValueError("cloud normalization needs at least 2 features per position")
    ex, en, he = reverse_stats(x, axis=-1)
    if stochastic or noise is not None:
        if noise is None:
            rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
            shape = x.shape[:-1] + (1,) if cfg.per_group_noise else x.shape
            noise = rng.standard_normal(shape)
        en_prime = en + (he / cfg.noise_divisor) * noise
    else:
        en_prime = np.broadcast_to(en, x.shape)
    en_prime = np.maximum(en_prime, cfg.epsilon)
    # keep the output in (0, 1] when exp underflows
    u = np.maximum(np.exp(-((x - ex) ** 2) / (2.0 * en_prime**2)), _TINY)
    en_prime = np.broadcast_to(en_prime, x.shape)
    return u, CloudNormCache(x, ex, en_prime, u)


def cloud_norm_fixed(x: np.ndarray, ex: np.ndarray, en_prime: np.ndarray) -> np.ndarray:
    """Membership with the statistics held fixed; the function cloud_norm_backward differentiates."""
    return np.exp(-((x - ex) ** 2) / (2.0 * en_prime**2))


def cloud_norm_backward(dy: np.ndarray, cache: CloudNormCache | None) -> np.ndarray:
    # Statistics are treated as constants with respect to x.
    if cache is None:
        raise UsageError("cloud_norm_backward called without a cached forward pass")
    return dy * cache.u * (-(cache.x - cache.ex) / cache.en_prime**2)


# --------------------------------------------------------------------------
# stateful layers


def _xavier(rng, d_in, d_out):
    lim = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-lim, lim, size=(d_in, d_out))


class Linear:
    def __init__(self, params: Params, name: str, d_in: int, d_out: int, rng):
        self.p = params
        self.w = params.add(f"{name}.weight", _xavier(rng, d_in, d_out))
        self.b = params.add(f"{name}.bias", np.zeros(d_out))
        self._x = None

    def forward(self, x):
        y, self._x = linear_forward(x, self.p.values[self.w], self.p.values[self.b])
        return y

    def backward(self, dy):
        if self._x is None:
            raise UsageError("Linear.backward before forward")
        dx, dw, db = linear_backward(dy, self._x, self.p.values[self.w])
        self.p.grads[self.w] += dw
        self.p.grads[self.b] += db
        return dx


class LayerNorm:
    def __init__(self, params: Params, name: str, d: int, affine: bool = True, eps: float = 1e-5):
        self.p = params
        self.d = d
        self.eps = eps
        self.affine = affine
        if affine:
            self.gamma = params.add(f"{name}.gamma", np.ones(d))
            self.beta = params.add(f"{name}.beta", np.zeros(d))
        self._cache = None

    def forward(self, x, training: bool = False):
        if self.affine:
            g, b = self.p.values[self.gamma], self.p.values[self.beta]
        else:
            g, b = np.ones(self.d), np.zeros(self.d)
        y, self._cache = layer_norm_forward(x, g, b, self.eps)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise UsageError("LayerNorm.backward before forward")
        dx, dg, db = layer_norm_backward(dy, self._cache)
        if self.affine:
            self.p.grads[self.gamma] += dg
            self.p.grads[self.beta] += db
        return dx


class CloudNorm:
    """Cloud-membership normalization with an owned noise generator."""

    def __init__(self, params: Params, name: str, d: int, cfg: CloudNormConfig, rng: np.random.Generator):
        if d < 2:
            raise ValueError("cloud normalization needs d >= 2")
        self.p = params
        self.cfg = cfg
        self.d = d
        self.rng = rng
        if cfg.affine:
            self.gamma = params.add(f"{name}.gamma", np.ones(d))
            self.beta = params.add(f"{name}.beta", np.zeros(d))
        self._cache = None
        self._u = None

    def forward(self, x, training: bool = False):
        stochastic = self.cfg.train_stochastic if training else self.cfg.eval_stochastic
        u, self._cache = cloud_norm_forward(x, self.cfg, self.rng if stochastic else None, stochastic=stochastic)
        if self.cfg.affine:
            self._u = u
            return u * self.p.values[self.gamma] + self.p.values[self.beta]
        return u

    def backward(self, dy):
        if self._cache is None:
            raise UsageError("CloudNorm.backward before forward")
        if self.cfg.affine:
            d = self.d
            self.p.grads[self.gamma] += (dy * self._u).reshape(-1, d).sum(axis=0)
            self.p.grads[self.beta] += dy.reshape(-1, d).sum(axis=0)
            dy = dy * self.p.values[self.gamma]
        return cloud_norm_backward(dy, self._cache)


class MultiHeadAttention:
    def __init__(self, params: Params, name: str, d: int, n_heads: int, rng):
        if d % n_heads:
            raise ValueError(f"d_model {d} not divisible by n_heads {n_heads}")
        self.h = n_heads
        self.dh = d // n_heads
        self.q = Linear(params, f"{name}.q", d, d, rng)
        self.k = Linear(params, f"{name}.k", d, d, rng)
        self.v = Linear(params, f"{name}.v", d, d, rng)
        self.o = Linear(params, f"{name}.o", d, d, rng)
        self._cache = None

    def _split(self, t):
        b, s, _ = t.shape
        return t.reshape(b, s, self.h, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, t):
        b, h, s, dh = t.shape
        return t.transpose(0, 2, 1, 3).reshape(b, s, h * dh)

    def forward(self, x):
        if x.ndim != 3:
            raise ShapeError(f"attention expects [batch, seq, d], got {x.shape}")
        q = self._split(self.q.forward(x))
        k = self._split(self.k.forward(x))
        v = self._split(self.v.forward(x))
        scale = 1.0 / math.sqrt(self.dh)
        a = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
        self._cache = (q, k, v, a, scale)
        return self.o.forward(self._merge(a @ v))

    def backward(self, dy):
        if self._cache is None:
            raise UsageError("MultiHeadAttention.backward before forward")
        q, k, v, a, scale = self._cache
        dctx = self._split(self.o.backward(dy))
        da = dctx @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ dctx
        ds = softmax_backward(da, a) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        return (self.q.backward(self._merge(dq)) + self.k.backward(self._merge(dk))
                + self.v.backward(self._merge(dv)))


class FeedForward:
    def __init__(self, params: Params, name: str, d: int, hidden: int, rng):
        self.l1 = Linear(params, f"{name}.fc1", d, hidden, rng)
        self.l2 = Linear(params, f"{name}.fc2", hidden, d, rng)
        self._h = None

    def forward(self, x):
        self._h = self.l1.forward(x)
        return self.l2.forward(gelu(self._h))

    def backward(self, dy):
        if self._h is None:
            raise UsageError("FeedForward.backward before forward")
        return self.l1.backward(gelu_backward(self.l2.backward(dy), self._h))


# --------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction. ``step`` increments the internal step index."""

    def __init__(self, params: Params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.values.items()}
        self.t = 0

    def step(self):
        self.t += 1
        adam_step(self.params, self.m, self.v, self.t, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: Params, m: dict, v: dict, t: int, lr: float = 0.001,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r} at step {t}")
    for name, g in params.grads.items():
        m[name] = beta1 * m[name] + (1 - beta1) * g
        v[name] = beta2 * v[name] + (1 - beta2) * g * g
        mhat = m[name] / (1 - beta1**t)
        vhat = v[name] / (1 - beta2**t)
        params.values[name] -= lr * mhat / (np.sqrt(vhat) + eps)


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(params: Params, config) -> dict:
    cfg = asdict(config) if hasattr(config, "__dataclass_fields__") else dict(config)
    return {
        "config": cfg,
        "params": [
            {"name": k, "shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
            for k, v in params.values.items()
        ],
    }


def save_checkpoint(path, params: Params, config, extra: dict | None = None):
    doc = checkpoint_dict(params, config)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n")


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    doc["arrays"] = {
        rec["name"]: np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        for rec in doc["params"]
    }
    return doc
