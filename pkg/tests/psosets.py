"""Random two-model ensemble sets and the 1e-4 grid-search oracle."""
import numpy as np

from cmit.ensemble_pso import build_ensemble_set


def random_set(seed, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(5, 80))
    truth = rng.uniform(50, 150, n)
    f1 = truth * (1 + rng.normal(rng.uniform(-0.1, 0.1), rng.uniform(0.01, 0.2), n))
    f2 = truth * (1 + rng.normal(rng.uniform(-0.1, 0.1), rng.uniform(0.01, 0.2), n))
    return build_ensemble_set(f1, f2, truth)


def grid_oracle(ts, step=1e-4):
    """Best first weight on a regular grid over [0, 1] (second weight is 1 - w1)."""
    w1 = np.linspace(0.0, 1.0, int(round(1 / step)) + 1)
    resid = ts.Y[:, None] - (ts.a[:, None] * w1 + ts.b[:, None] * (1 - w1))
    f = np.sqrt((resid**2).sum(0))
    i = int(np.argmin(f))
    return float(w1[i]), float(f[i])
