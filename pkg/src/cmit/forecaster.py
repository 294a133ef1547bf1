"""Encoder-only transformer for one-step-ahead daily load forecasting.

``norm_kind="layer"`` gives the standard model (F1); ``norm_kind="cloud"``
swaps every normalization node for cloud membership normalization (F2).
Everything else, including the initial weights for a given seed, is shared.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data_pipeline import StandardScaler, WindowedDataset
from .nn_core import (
    Adam, CloudNorm, CloudNormConfig, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    NonFiniteError, Params, mse_loss, save_checkpoint, sinusoidal_encoding,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDivergedError(NonFiniteError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    lookback: int = 14
    horizon: int = 1
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    ffn_dim: int = 64
    norm_kind: str = "layer"
    layer_norm_affine: bool = True
    cloud: CloudNormConfig = field(default_factory=CloudNormConfig)
    lr: float = 0.001
    max_epochs: int = 200
    batch_size: int = 32
    patience: int = 20
    weight_decay: float = 0.0
    target_mse: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.norm_kind not in ("layer", "cloud"):
            raise ConfigError(f"norm_kind must be 'layer' or 'cloud', got {self.norm_kind!r}")
        if self.horizon != 1:
            raise ConfigError("only horizon=1 is supported")
        if self.lookback < 2:
            raise ConfigError("lookback must be >= 2")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.norm_kind == "cloud" and self.d_model < 2:
            raise ConfigError("cloud normalization needs d_model >= 2")
        if self.n_layers < 1 or self.ffn_dim < 1:
            raise ConfigError("n_layers and ffn_dim must be >= 1")
        if self.max_epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("max_epochs >= 0, batch_size >= 1, patience >= 1 required")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("cloud"), dict):
            d["cloud"] = CloudNormConfig(**d["cloud"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderBlock:
    """attention -> add -> norm -> feed-forward -> add -> norm"""

    def __init__(self, params: Params, name: str, cfg: ModelConfig, rng, noise_rng):
        d = cfg.d_model
        self.attn = MultiHeadAttention(params, f"{name}.attn", d, cfg.n_heads, rng)
        self.ff = FeedForward(params, f"{name}.ff", d, cfg.ffn_dim, rng)
        self.norm1 = _make_norm(params, f"{name}.norm1", cfg, noise_rng)
        self.norm2 = _make_norm(params, f"{name}.norm2", cfg, noise_rng)

    def forward(self, x, training):
        h = self.norm1.forward(x + self.attn.forward(x), training)
        return self.norm2.forward(h + self.ff.forward(h), training)

    def backward(self, dy):
        dh = self.norm2.backward(dy)
        dh = dh + self.ff.backward(dh)
        dx = self.norm1.backward(dh)
        return dx + self.attn.backward(dx)


def _make_norm(params, name, cfg: ModelConfig, noise_rng):
    if cfg.norm_kind == "layer":
        return LayerNorm(params, name, cfg.d_model, affine=cfg.layer_norm_affine)
    return CloudNorm(params, name, cfg.d_model, cfg.cloud, noise_rng)


class TransformerForecaster:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params = Params()
        rng = np.random.default_rng(cfg.seed)
        self.noise_rng = np.random.default_rng([cfg.seed, 1])
        self.embed = Linear(self.params, "embed", 1, cfg.d_model, rng)
        self.pos = sinusoidal_encoding(cfg.lookback, cfg.d_model)
        self.blocks = [EncoderBlock(self.params, f"block{i}", cfg, rng, self.noise_rng)
                       for i in range(cfg.n_layers)]
        self.head = Linear(self.params, "head", cfg.d_model, 1, rng)
        # zero head: the untrained model predicts the standardized mean
        self.params.values[self.head.w][...] = 0.0
        self._seq = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.cfg.lookback:
            raise ValueError(f"expected inputs [batch, {self.cfg.lookback}], got {x.shape}")
        h = self.embed.forward(x[:, :, None]) + self.pos
        for blk in self.blocks:
            h = blk.forward(h, training)
        self._seq = h.shape
        return self.head.forward(h[:, -1, :])

    def backward(self, dout: np.ndarray):
        dlast = self.head.backward(dout)
        dh = np.zeros(self._seq)
        dh[:, -1, :] = dlast
        for blk in reversed(self.blocks):
            dh = blk.backward(dh)
        self.embed.backward(dh)


def build_model(cfg: ModelConfig) -> TransformerForecaster:
    return TransformerForecaster(cfg)


@dataclass
class TrainedModel:
    config: ModelConfig
    model: TransformerForecaster
    scaler: StandardScaler
    loss_trace: list[tuple[int, float, float]]
    best_epoch: int
    best_val_loss: float

    def save(self, path, **extra):
        save_checkpoint(path, self.model.params, self.config.to_dict(), {
            "scaler": {"mean": self.scaler.mean, "scale": self.scaler.scale},
            "best_epoch": self.best_epoch,
            **extra,
        })

    def write_loss_trace(self, path):
        with Path(path).open("w") as fh:
            fh.write("epoch,train_mse,val_mse\n")
            for ep, tr, va in self.loss_trace:
                fh.write(f"{ep},{tr!r},{va!r}\n")


def evaluate_mse(model: TransformerForecaster, windows: WindowedDataset, batch_size: int = 512) -> float:
    preds = _forward_batched(model, windows.inputs, batch_size)
    return mse_loss(preds, windows.targets)[0]


def _forward_batched(model, inputs, batch_size=512):
    out = [model.forward(inputs[i:i + batch_size], training=False)[:, 0]
           for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def train(model: TransformerForecaster, windows: WindowedDataset,
          val_windows: WindowedDataset | None = None,
          scaler: StandardScaler | None = None) -> TrainedModel:
    """Minimise MSE with Adam and keep the best-validation checkpoint.

    Epoch 0 in the trace is the untrained model. Without ``val_windows`` the
    training windows are used for checkpoint selection.
    """
    cfg = model.cfg
    if len(windows) == 0:
        raise ValueError("no training windows")
    if windows.lookback != cfg.lookback:
        raise ValueError(f"windows have lookback {windows.lookback}, model expects {cfg.lookback}")
    val = val_windows if val_windows is not None and len(val_windows) else windows
    scaler = scaler or StandardScaler(0.0, 1.0)
    opt = Adam(model.params, lr=cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])

    def record(epoch):
        tr = evaluate_mse(model, windows)
        va = tr if val is windows else evaluate_mse(model, val)
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}: train={tr} val={va}")
        trace.append((epoch, tr, va))
        return va

    trace: list[tuple[int, float, float]] = []
    best_val = record(0)
    best = model.params.snapshot()
    best_epoch, stale = 0, 0
    n = len(windows)
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            model.params.zero_grad()
            pred = model.forward(windows.inputs[idx], training=True)
            loss, grad = mse_loss(pred[:, 0], windows.targets[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite batch loss at epoch {epoch}")
            model.backward(grad[:, None])
            if cfg.weight_decay:
                for k, v in model.params.values.items():
                    model.params.grads[k] += cfg.weight_decay * v
            opt.step()
        va = record(epoch)
        if va < best_val:
            best_val, best, best_epoch, stale = va, model.params.snapshot(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
        if trace[-1][1] <= cfg.target_mse:
            break
    model.params.restore(best)
    return TrainedModel(cfg, model, scaler, trace, best_epoch, best_val)


def predict(trained: TrainedModel, windows) -> np.ndarray:
    """Forecasts in original load units.

    ``windows`` is either a :class:`WindowedDataset` already scaled with the
    model's scaler, or a raw ``[n, p]`` matrix of loads.
    """
    if isinstance(windows, WindowedDataset):
        inputs = windows.inputs
    else:
        inputs = trained.scaler.transform(np.atleast_2d(np.asarray(windows, dtype=float)))
    if inputs.shape[1] != trained.config.lookback:
        raise ValueError(f"window length {inputs.shape[1]} != lookback {trained.config.lookback}")
    return trained.scaler.inverse(_forward_batched(trained.model, inputs))


def with_norm(cfg: ModelConfig, norm_kind: str) -> ModelConfig:
    return replace(cfg, norm_kind=norm_kind)
