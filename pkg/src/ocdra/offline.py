"""Hindsight optimum estimates for max f(x) s.t. sum_{a in A_j} x_a <= 1, x >= 0.

``frank_wolfe`` gives a feasible lower bound for any instance;
``grid_brute_force`` is an exhaustive oracle for tiny ones.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DimensionTooLarge
from .instances import Instance

GRID_STEPS = (0.05, 0.1, 0.25)
MAX_GRID_DIM = 6


@dataclass
class OptEstimate:
    lower_bound: float  # f(x_star)
    iterations: int
    converged: bool
    x_star: np.ndarray
    gap: float  # last duality-gap estimate <grad f(x), s - x>


def _blocks(instance: Instance):
    cols = [np.array(sorted(a.options), dtype=np.int64) for a in instance.arrivals]
    if not cols:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    flat = np.concatenate(cols)
    starts = np.cumsum([0] + [c.size for c in cols[:-1]])
    return flat, starts


def frank_wolfe(instance: Instance, max_iters: int = 5000, tol: float = 1e-5) -> OptEstimate:
    """Conditional-gradient ascent over the product of capped simplices.

    The linear oracle puts unit mass on the best option of each arrival
    (lowest id on ties).  It does so even when that gradient is zero:
    f is monotone, so the vertex is no worse, and stopping at zero
    gradients can leave the iterate stuck on a plateau.  Each oracle vertex
    is itself feasible and is scored too; the best point seen is returned.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    f = instance.valuation
    d = instance.dim
    flat, starts = _blocks(instance)
    x = np.zeros(d)
    if flat.size == 0:
        return OptEstimate(0.0, 0, True, x, 0.0)
    best_x, best = x.copy(), f.value(x)
    gap = np.inf
    k = 0
    for k in range(max_iters):
        g = f.grad(x, flat)
        top = np.maximum.reduceat(g, starts)
        # first option attaining the block maximum
        hit = g == np.repeat(top, np.diff(np.append(starts, flat.size)))
        first = np.minimum.reduceat(np.where(hit, np.arange(flat.size), flat.size), starts)
        s = np.zeros(d)
        s[flat[first]] = 1.0
        gap = float(g @ (s[flat] - x[flat]))
        fs = f.value(s)
        if fs > best:
            best, best_x = fs, s.copy()
        if gap < tol:
            break
        x += 2.0 / (k + 2) * (s - x)
        fx = f.value(x)
        if fx > best:
            best, best_x = fx, x.copy()
    return OptEstimate(float(best), k + 1, bool(gap < tol), best_x, float(gap))


def _simplex_grid(size: int, steps: int) -> np.ndarray:
    """Integer points with ``size`` coordinates summing to at most ``steps``."""
    pts = [c for c in itertools.product(range(steps + 1), repeat=size) if sum(c) <= steps]
    return np.array(pts, dtype=np.int64).reshape(-1, size)


def grid_brute_force(instance: Instance, grid_step: float = 0.1, chunk: int = 100_000) -> float:
    """Maximum of f over the feasible points whose coordinates are multiples of ``grid_step``."""
    if not any(abs(grid_step - s) < 1e-12 for s in GRID_STEPS):
        raise ValueError(f"grid_step must be one of {GRID_STEPS}")
    blocks = [sorted(a.options) for a in instance.arrivals]
    used = sum(len(b) for b in blocks)
    if used > MAX_GRID_DIM:
        raise DimensionTooLarge(f"grid search needs at most {MAX_GRID_DIM} options, got {used}")
    f = instance.valuation
    if not blocks:
        return 0.0
    steps = round(1.0 / grid_step)
    grids = [_simplex_grid(len(b), steps) for b in blocks]
    cols = np.concatenate([np.array(b, dtype=np.int64) for b in blocks])
    # index the product of per-block grids, then evaluate in chunks
    sizes = [g.shape[0] for g in grids]
    total = int(np.prod(sizes))
    best = 0.0
    for lo in range(0, total, chunk):
        ids = np.arange(lo, min(lo + chunk, total))
        parts = []
        for g, m in zip(reversed(grids), reversed(sizes)):
            parts.append(g[ids % m])
            ids = ids // m
        Z = np.concatenate(parts[::-1], axis=1) * grid_step
        X = np.zeros((Z.shape[0], instance.dim))
        X[:, cols] = Z
        best = max(best, float(f.value_batch(X).max()))
    return best
