"""Simplex-constrained particle swarm fit of model-combination weights.

The swarm minimises ``||Y - X w||`` over weights ``w`` on the probability
simplex, where the columns of ``X`` are per-time-step predictions of the
individual models and ``Y`` holds the observations.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class EnsembleTrainingSet:
    X: np.ndarray   # [n, m] model predictions
    Y: np.ndarray   # [n] observations

    @property
    def a(self) -> np.ndarray:
        return self.X[:, 0]

    @property
    def b(self) -> np.ndarray:
        return self.X[:, 1]

    @property
    def r(self) -> np.ndarray:
        return self.Y

    def __len__(self):
        return len(self.Y)


def build_ensemble_set(*preds_and_truths: Sequence[float]) -> EnsembleTrainingSet:
    """``build_ensemble_set(f1_preds, f2_preds, ..., truths)``.

    The last argument holds the observations; every other argument is one
    model's predictions and becomes a column of ``X``.
    """
    if len(preds_and_truths) < 3:
        raise ValueError("need at least two prediction lists and the truths")
    *cols, truths = [np.asarray(v, dtype=float).ravel() for v in preds_and_truths]
    n = len(truths)
    if n == 0:
        raise ValueError("ensemble training set is empty")
    if any(len(c) != n for c in cols):
        raise ValueError(f"length mismatch: {[len(c) for c in cols]} vs {n} truths")
    X = np.column_stack(cols)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(truths))):
        raise ValueError("ensemble inputs must be finite")
    if np.any(truths <= 0):
        raise ValueError("observed loads must be strictly positive")
    return EnsembleTrainingSet(X, truths)


def objective(ts: EnsembleTrainingSet, w) -> float:
    """Euclidean norm of the residual ``Y - X w``."""
    return float(np.linalg.norm(ts.Y - ts.X @ np.asarray(w, dtype=float)))


def combine(preds, w) -> float | np.ndarray:
    """Weighted sum of per-model predictions; ``preds`` is ``[m]`` or ``[n, m]``."""
    return np.asarray(preds, dtype=float) @ np.asarray(w, dtype=float)


def combine_pair(f1_pred, f2_pred, w):
    return w[0] * np.asarray(f1_pred, dtype=float) + w[1] * np.asarray(f2_pred, dtype=float)


def project_to_simplex(w: np.ndarray) -> np.ndarray:
    """Clip each row to [0, 1] and renormalise; an all-zero row becomes uniform."""
    w = np.clip(w, 0.0, 1.0)
    s = w.sum(axis=-1, keepdims=True)
    m = w.shape[-1]
    return np.where(s > 0, w / np.where(s > 0, s, 1.0), 1.0 / m)


@dataclass(frozen=True)
class SwarmConfig:
    q: int = 30
    iters: int = 100
    omega: float = 0.7
    c1: float = 1.5
    c2: float = 1.5
    r_distribution: str = "standard_normal"
    position_update: str = "damped"
    seed: int = 0

    def __post_init__(self):
        if self.q < 2:
            raise ValueError("q must be >= 2")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if not 0 < self.omega <= 1:
            raise ValueError("omega must be in (0, 1]")
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("c1 and c2 must be > 0")
        if self.r_distribution not in ("standard_normal", "uniform01"):
            raise ValueError(f"unknown r_distribution {self.r_distribution!r}")
        if self.position_update not in ("damped", "standard"):
            raise ValueError(f"unknown position_update {self.position_update!r}")


@dataclass
class Swarm:
    w: np.ndarray
    v: np.ndarray
    pbest_w: np.ndarray
    pbest_f: np.ndarray
    gbest_w: np.ndarray
    gbest_f: float

    def check(self):
        assert np.all(np.abs(self.w.sum(axis=1) - 1.0) <= SIMPLEX_TOL)
        assert np.all((self.w >= 0) & (self.w <= 1))
        assert np.all((self.v >= -1) & (self.v <= 1))


@dataclass
class PSOResult:
    w: np.ndarray
    f: float
    trace: list[float]
    config: SwarmConfig
    corner_f: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "w": [float(x) for x in self.w],
            "f_opt": self.f,
            "corner_f": self.corner_f,
            "config": asdict(self.config),
            "seed": self.config.seed,
            "trace": self.trace,
        }

    def save(self, path, **extra):
        Path(path).write_text(json.dumps({**self.to_dict(), **extra}, indent=1) + "\n")


def init_swarm(ts: EnsembleTrainingSet, cfg: SwarmConfig, rng: np.random.Generator) -> Swarm:
    m = ts.X.shape[1]
    w = rng.dirichlet(np.ones(m), size=cfg.q)
    k = min(m, cfg.q)
    w[:k] = np.eye(m)[:k]            # corner seeding
    w = project_to_simplex(w)
    v = rng.uniform(-1.0, 1.0, size=(cfg.q, m))
    f = np.array([objective(ts, wi) for wi in w])
    g = int(np.argmin(f))
    return Swarm(w, v, w.copy(), f.copy(), w[g].copy(), float(f[g]))


def pso_step(ts: EnsembleTrainingSet, sw: Swarm, cfg: SwarmConfig, rng: np.random.Generator):
    """One velocity/position update followed by the best-position updates."""
    q = len(sw.w)
    if cfg.r_distribution == "standard_normal":
        r1, r2 = rng.standard_normal((2, q, 1))
    else:
        r1, r2 = rng.random((2, q, 1))
    v = cfg.omega * sw.v + cfg.c1 * r1 * (sw.pbest_w - sw.w) + cfg.c2 * r2 * (sw.gbest_w - sw.w)
    sw.v = np.clip(v, -1.0, 1.0)
    inertia = cfg.omega if cfg.position_update == "damped" else 1.0
    sw.w = project_to_simplex(inertia * sw.w + sw.v)
    for i in range(q):
        f = objective(ts, sw.w[i])
        if f < sw.pbest_f[i]:
            sw.pbest_f[i] = f
            sw.pbest_w[i] = sw.w[i]
        if sw.pbest_f[i] < sw.gbest_f:
            sw.gbest_f = float(sw.pbest_f[i])
            sw.gbest_w = sw.pbest_w[i].copy()


def pso_fit(ts: EnsembleTrainingSet, cfg: SwarmConfig = SwarmConfig()) -> PSOResult:
    """Fit simplex weights; returns the global best after ``cfg.iters`` iterations.

    ``trace[0]`` is the best objective of the initial swarm, followed by one
    entry per iteration.
    """
    rng = np.random.default_rng(cfg.seed)
    sw = init_swarm(ts, cfg, rng)
    trace = [sw.gbest_f]
    for _ in range(cfg.iters):
        pso_step(ts, sw, cfg, rng)
        trace.append(sw.gbest_f)
    m = ts.X.shape[1]
    corners = [objective(ts, e) for e in np.eye(m)]
    return PSOResult(sw.gbest_w.copy(), sw.gbest_f, trace, cfg, corners)
