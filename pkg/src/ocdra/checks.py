"""Randomized verification of the CDR properties.

``check_cdr`` samples points and asserts, up to ``tol``:

* f(0) == 0,
* monotonicity of f and antitonicity of grad f on sampled pairs x <= y,
* concavity along sampled segments,
* agreement of grad f with finite differences away from kinks.

A coordinate is treated as a kink when the left and right difference
quotients still disagree after the step has been shrunk twice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import PropertyViolation


@dataclass
class CDRReport:
    n_samples: int
    f_at_zero: float
    max_value_decrease: float
    max_grad_increase: float
    max_concavity_gap: float
    max_fd_rel_err: float
    n_fd_checked: int
    n_kinks_skipped: int

    def __str__(self):
        return (f"CDR ok: {self.n_samples} samples, |f(0)|={abs(self.f_at_zero):.1e}, "
                f"grad increase {self.max_grad_increase:.1e}, concavity gap {self.max_concavity_gap:.1e}, "
                f"fd rel err {self.max_fd_rel_err:.1e} ({self.n_fd_checked} checked, "
                f"{self.n_kinks_skipped} kinks skipped)")


def default_sampler(rng: np.random.Generator, n: int, dim: int, scale: float = 1.0) -> np.ndarray:
    """Sparse nonnegative points with magnitudes spread over several decades."""
    mag = scale * np.exp(rng.uniform(np.log(1e-3), np.log(2.0), size=(n, 1)))
    X = mag * rng.uniform(0, 1, size=(n, dim)) * (rng.uniform(size=(n, dim)) < 0.7)
    return X


def _fd_point(f, x, i, g, h0, thr):
    """Return (error, is_kink) for coordinate i at x."""
    L = R = None
    for h in (h0, h0 / 10, h0 / 100):
        e = np.zeros_like(x)
        e[i] = h
        two_sided = x[i] >= h
        v = f.value_batch(np.stack([x + e, x, x - e if two_sided else x + 2 * e]))
        R = (v[0] - v[1]) / h
        if two_sided:
            L = (v[1] - v[2]) / h
            fd = 0.5 * (L + R)
        else:
            L = None
            fd = (4 * v[0] - 3 * v[1] - v[2]) / (2 * h)  # second-order forward
        err = abs(fd - g)
        if err <= thr:
            return err, False
    if L is not None and abs(L - R) > thr:
        return 0.0, True
    return err, False


def check_cdr(f, sampler: Callable | None = None, n_samples: int = 1000, tol: float = 1e-6,
              seed: int = 0, fd_coords: int = 8, fd_samples: int | None = None,
              scale: float = 1.0) -> CDRReport:
    """Sample-based check of the CDR properties of ``f``.

    Parameters
    ----------
    f : ValuationExpr
        Anything with ``dim``, ``value_batch`` and ``grad_batch``.
    sampler : callable, optional
        ``sampler(rng, n, dim) -> (n, dim)`` array of nonnegative points.
    n_samples : int
        Number of (x, y) pairs for the order and concavity checks.
    tol : float
        Absolute tolerance; gradient checks scale it by ``max(1, |grad|_inf)``.
    fd_coords : int
        Coordinates probed by finite differences per point.
    fd_samples : int, optional
        Points used for finite differences (defaults to ``min(n_samples, 200)``).

    Raises
    ------
    PropertyViolation
        With ``witness`` holding the offending point(s).
    """
    if n_samples < 1 or not tol > 0:
        raise ValueError("need n_samples >= 1 and tol > 0")
    rng = np.random.default_rng(seed)
    d = max(int(f.dim), 1)
    draw = sampler or (lambda r, n, k: default_sampler(r, n, k, scale))
    cols = np.arange(d)

    f0 = float(f.value_batch(np.zeros((1, d)))[0])
    if abs(f0) > tol:
        raise PropertyViolation("zero", f"f(0) = {f0}", np.zeros(d))

    X = np.asarray(draw(rng, n_samples, d), dtype=float)
    Y = X + np.asarray(draw(rng, n_samples, d), dtype=float) * (rng.uniform(size=(n_samples, 1)) < 0.9)
    fx, fy = f.value_batch(X), f.value_batch(Y)
    gx, gy = f.grad_batch(X, cols), f.grad_batch(Y, cols)
    gscale = np.maximum(1.0, np.abs(gx).max(axis=1))

    dec = fx - fy
    k = int(np.argmax(dec))
    if dec[k] > tol * (1 + abs(fx[k])):
        raise PropertyViolation("monotone", f"f(y) < f(x) by {dec[k]:.3g} with x <= y", (X[k], Y[k]))

    inc = ((gy - gx) / gscale[:, None]).max(axis=1)
    k = int(np.argmax(inc))
    if inc[k] > tol:
        i = int(np.argmax(gy[k] - gx[k]))
        raise PropertyViolation("gradient", f"grad_{i} increases by {gy[k, i] - gx[k, i]:.3g} from x to y >= x",
                                (X[k], Y[k]))

    lam = rng.uniform(size=n_samples)
    Z = lam[:, None] * X + (1 - lam[:, None]) * Y
    # also compare unordered pairs, which exercise other directions
    Y2 = np.roll(Y, 1, axis=0)
    Z2 = lam[:, None] * X + (1 - lam[:, None]) * Y2
    fz, fz2, fy2 = f.value_batch(Z), f.value_batch(Z2), np.roll(fy, 1)
    gap = np.maximum(lam * fx + (1 - lam) * fy - fz, lam * fx + (1 - lam) * fy2 - fz2)
    k = int(np.argmax(gap))
    if gap[k] > tol * (1 + abs(fx[k]) + abs(fy[k])):
        raise PropertyViolation("concave", f"chord exceeds f by {gap[k]:.3g}", (X[k], Y[k], lam[k]))

    n_fd = min(n_samples, 200) if fd_samples is None else fd_samples
    worst = 0.0
    checked = kinks = 0
    for k in range(n_fd):
        x = X[k]
        probe = rng.choice(d, size=min(fd_coords, d), replace=False)
        g = gx[k]
        h0 = 1e-6 * (1 + np.abs(x).max())
        thr = max(tol, tol * np.abs(g).max())
        for i in probe:
            err, kink = _fd_point(f, x, int(i), g[i], h0, thr)
            if kink:
                kinks += 1
                continue
            checked += 1
            worst = max(worst, err / max(1.0, np.abs(g).max()))
            if err > thr:
                raise PropertyViolation("fd", f"grad_{i} = {g[i]:.6g} but finite differences give "
                                        f"an error of {err:.3g}", x)

    return CDRReport(n_samples, f0, max(0.0, float(dec.max())), max(0.0, float(inc.max())),
                     max(0.0, float(gap.max())), worst, checked, kinks)
