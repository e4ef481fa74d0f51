"""Central finite-difference oracles shared by the gradient tests."""

from __future__ import annotations

import numpy as np

STEP = 1e-6


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Coordinate-wise central differences of scalar ``f`` at ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def directional(f, params: dict[str, np.ndarray], direction: dict[str, np.ndarray], h: float = STEP) -> float:
    """Central difference of ``f(params)`` along ``direction``."""
    plus = {k: v + h * direction.get(k, 0.0) for k, v in params.items()}
    minus = {k: v - h * direction.get(k, 0.0) for k, v in params.items()}
    return (f(plus) - f(minus)) / (2 * h)


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-3) -> np.ndarray:
    """Normal draws pushed at least ``margin`` away from 0 (keeps ReLU kinks out of reach)."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def distinct_values(rng: np.random.Generator, shape, gap: float = 1e-3) -> np.ndarray:
    """Entries with pairwise gaps of at least ``gap`` (keeps max-pool ties out of reach)."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * gap * 4 + rng.uniform(-gap, gap, n)
    return rng.permutation(vals).reshape(shape)
