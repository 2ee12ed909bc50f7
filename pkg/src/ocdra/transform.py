"""The auxiliary function U and the dual quantities built from it.

    U(x)      = 1/(e-1) * int_0^1 e^t * t * f(x/t) dt
    grad U(x) = 1/(e-1) * int_0^1 e^t * grad f(x/t) dt

``fhat(alpha) = sup_x f(x) - <alpha, x>`` is the conjugate-style dual of f.
At a gradient it has the closed form ``f(x) - <grad f(x), x>``; at ``grad U``
we only have the convexity upper bound

    fhat(grad U(x)) <= 1/(e-1) * int_0^1 e^t * (f(x/t) - <grad f(x/t), x/t>) dt

which is what certificates use.
"""

from __future__ import annotations

import math

import numpy as np

from .quadrature import QuadratureScheme
from .valuation import ValuationExpr, _as_cols, _as_point

E1 = math.e - 1.0
GAMMA = 1.0 - 1.0 / math.e


def _rule(f: ValuationExpr, scheme: QuadratureScheme, x: np.ndarray, cols=None):
    kinks = f.ray_kinks(x, 1.0, 1.0 / scheme.t_min, cols)
    t, w = scheme.nodes(1.0 / kinks if kinks.size else ())
    return t, w / E1


class UTransform(ValuationExpr):
    """U as a valuation in its own right (so the CDR checks apply to it)."""

    kind = "u_transform"

    def __init__(self, f: ValuationExpr, scheme: QuadratureScheme | None = None):
        self.f = f
        self.scheme = scheme or QuadratureScheme()
        self.dim = f.dim

    def value_batch(self, X):
        return np.array([self._value(row) for row in X])

    def grad_batch(self, X, cols):
        return np.stack([self._grad(row, cols) for row in X]) if len(X) else np.zeros((0, cols.size))

    def _value(self, x):
        t, w = _rule(self.f, self.scheme, x)
        return float(np.sum(w * t * self.f.value_ray(x, 1.0 / t)))

    def _grad(self, x, cols):
        t, w = _rule(self.f, self.scheme, x, cols)
        return self.f.grad_ray_w(x, 1.0 / t, w, cols)

    def _fhat_upper(self, x):
        t, w = _rule(self.f, self.scheme, x)
        s = 1.0 / t
        return float(np.sum(w * (self.f.value_ray(x, s) - s * self.f.dir_ray(x, s))))

    def coords(self):
        return self.f.coords()

    def restrict(self, S):
        return UTransform(self.f.restrict(S), self.scheme)

    def to_json(self):
        raise TypeError("U-transforms are not serializable; serialize the base valuation")

    def _key(self):
        return (self.f._key(), self.scheme)

    @property
    def gmax(self):
        return self.f.gmax


def _point(T, x):
    return _as_point(x, T.dim)


def u_eval(T: UTransform, x) -> float:
    return T._value(_point(T, x))


def u_grad(T: UTransform, x, cols=None) -> np.ndarray:
    x = _point(T, x)
    return T._grad(x, _as_cols(cols, x.size))


def fhat_at_fgrad(f: ValuationExpr, x) -> float:
    """fhat(grad f(x)) = f(x) - <grad f(x), x>."""
    x = _as_point(x, f.dim)
    return f.value(x) - float(f.grad(x) @ x)


def fhat_upper_at_ugrad(T: UTransform, x) -> float:
    """Quadrature of the convexity upper bound on fhat(grad U(x))."""
    return T._fhat_upper(_point(T, x))


def fhat_numeric(f: ValuationExpr, alpha, R: float = 10.0, iters: int = 2000) -> float:
    """Lower bound on fhat(alpha) by projected supergradient ascent on [0, R]^d.

    Steps decay geometrically from R to about 1e-8 R, so the iterate can cross
    the box many times early on and still settles onto a kink.
    """
    if not R > 0:
        raise ValueError("box radius must be positive")
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    d = max(f.dim, alpha.size)
    alpha = np.concatenate([alpha, np.zeros(d - alpha.size)])
    x = np.zeros(d)
    best = 0.0  # value at x = 0
    q = 1e-8 ** (1.0 / max(iters, 1))
    step = R
    for _ in range(iters):
        g = f.grad(x) - alpha
        norm = np.linalg.norm(g)
        if norm == 0:
            break
        x = np.clip(x + step * g / norm, 0.0, R)
        best = max(best, f.value(x) - float(alpha @ x))
        step *= q
    return best


def balanced_check(T: UTransform, x, gamma: float = GAMMA) -> float:
    """Slack of f(x)/gamma >= U(x) + fhat(grad U(x)), using the upper bound."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    x = _point(T, x)
    return T.f.value(x) / gamma - T._value(x) - T._fhat_upper(x)
