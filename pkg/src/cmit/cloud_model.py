"""Normal cloud model.

A cloud describes a qualitative concept by three numbers: the expectation
``ex``, the entropy ``en`` (spread) and the hyper-entropy ``he`` (spread of
the spread). The forward generator turns a descriptor into random drops that
carry a certainty degree; the reverse generator estimates a descriptor from
samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EPSILON = 1e-8


class CloudDomainError(ValueError):
    """Raised when a membership is requested with a nonpositive entropy."""


@dataclass(frozen=True)
class CloudDescriptor:
    ex: float
    en: float
    he: float

    def __post_init__(self):
        if not math.isfinite(self.ex):
            raise ValueError(f"ex must be finite, got {self.ex}")
        if not (math.isfinite(self.en) and self.en >= 0):
            raise ValueError(f"en must be finite and >= 0, got {self.en}")
        if not (math.isfinite(self.he) and self.he >= 0):
            raise ValueError(f"he must be finite and >= 0, got {self.he}")


@dataclass(frozen=True)
class CloudDrop:
    x: float
    u: float
    en_prime: float


def membership(x, ex, en_prime):
    """Certainty degree ``exp(-(x - ex)^2 / (2 en_prime^2))``.

    Works elementwise on arrays. ``en_prime`` must be strictly positive;
    callers that may see a degenerate entropy apply :data:`EPSILON` first.
    """
    en_prime = np.asarray(en_prime, dtype=float)
    if np.any(~(en_prime > 0)):
        raise CloudDomainError("en_prime must be > 0; floor it at EPSILON first")
    x = np.asarray(x, dtype=float)
    u = np.exp(-((x - ex) ** 2) / (2.0 * en_prime**2))
    return float(u) if u.ndim == 0 else u


def sample_en_prime(rng: np.random.Generator, en: float, he: float, size: int) -> np.ndarray:
    """Draw ``size`` entropy realizations from N(en, he^2), resampling nonpositive ones."""
    out = rng.normal(en, he, size=size)
    bad = out <= 0
    # He == 0 with En == 0 would never yield a positive draw.
    if en <= 0 and he == 0:
        return np.full(size, EPSILON)
    while np.any(bad):
        out[bad] = rng.normal(en, he, size=int(bad.sum()))
        bad = out <= 0
    return out


def forward_generate_arrays(desc: CloudDescriptor, n: int, rng_seed: int):
    """Vectorised forward generator returning ``(x, u, en_prime)`` arrays."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(rng_seed)
    en_prime = sample_en_prime(rng, desc.en, desc.he, n)
    x = desc.ex + en_prime * rng.standard_normal(n)
    u = np.exp(-((x - desc.ex) ** 2) / (2.0 * np.maximum(en_prime, EPSILON) ** 2))
    return x, u, en_prime


def forward_generate(desc: CloudDescriptor, n: int, rng_seed: int) -> list[CloudDrop]:
    """Generate ``n`` cloud drops from ``desc``, deterministically for a given seed."""
    x, u, en_prime = forward_generate_arrays(desc, n, rng_seed)
    return [CloudDrop(float(a), float(b), float(c)) for a, b, c in zip(x, u, en_prime)]


def reverse_generate(samples: Sequence[float], variance_mode: str = "population") -> CloudDescriptor:
    """Estimate a cloud descriptor from samples.

    ``ex`` is the sample mean, ``en = sqrt(pi/2) * mean|x - ex|`` and
    ``he = sqrt(|S^2 - en^2|)`` where ``S^2`` is the population variance
    (``variance_mode="population"``) or the unbiased one (``"sample"``).
    """
    xs = np.asarray(samples, dtype=float).ravel()
    if xs.size < 2:
        raise ValueError("reverse_generate needs at least 2 samples")
    if not np.all(np.isfinite(xs)):
        raise ValueError("reverse_generate got non-finite samples")
    if variance_mode not in ("population", "sample"):
        raise ValueError(f"unknown variance_mode {variance_mode!r}")
    ex = float(xs.mean())
    en = math.sqrt(math.pi / 2.0) * float(np.abs(xs - ex).mean())
    s2 = float(xs.var(ddof=0 if variance_mode == "population" else 1))
    he = math.sqrt(abs(s2 - en * en))
    return CloudDescriptor(ex, en, he)


def reverse_stats(x: np.ndarray, axis: int = -1, variance_mode: str = "population"):
    """Batched reverse generator along ``axis``; returns ``(ex, en, he)`` with keepdims."""
    n = x.shape[axis]
    if n < 2:
        raise ValueError("reduction axis must have at least 2 entries")
    ex = x.mean(axis=axis, keepdims=True)
    en = math.sqrt(math.pi / 2.0) * np.abs(x - ex).mean(axis=axis, keepdims=True)
    s2 = x.var(axis=axis, keepdims=True, ddof=0 if variance_mode == "population" else 1)
    he = np.sqrt(np.abs(s2 - en**2))
    return ex, en, he
