"""Expression algebra for concave diminishing-returns (CDR) valuations.

A valuation is an immutable tree of nodes over a dense coordinate space
``0..dim-1``.  Every node supports batched evaluation (rows of ``X`` are
points) plus *ray* evaluation, i.e. evaluation at the points ``s_k * x`` for a
vector of scales ``s``.  The ray form is what the auxiliary-function
quadrature needs (it integrates ``f(x / t)`` over ``t``) and nodes built on
linear forms implement it in O(nnz + K) instead of O(K * nnz).

Gradients follow the upward (right-derivative) convention at kinks.

Nodes
-----
Linear, BudgetAdditive, ConcaveScalar, Sum, LinTransform, Compose, Polymatroid.
``RawValuation`` wraps arbitrary callables for property checking and is
deliberately unvalidated.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from . import polymatroid as pm
from .errors import (
    ArityMismatch,
    ExprError,
    NegativeInput,
    NegativeWeight,
    UnboundedGradient,
    UnknownCoord,
)

__all__ = [
    "ScalarConcave", "Cap", "Log1p", "ExpSat", "PiecewiseLinear", "Pow",
    "ValuationExpr", "Linear", "BudgetAdditive", "ConcaveScalar", "Sum",
    "LinTransform", "Compose", "Polymatroid", "RawValuation",
    "construct", "evaluate", "gradient", "restrict", "from_json", "to_json",
]

_MIX = np.random.default_rng(0x0CD7A).integers(1, 2**61, size=4096, dtype=np.int64) | 1


def _nonneg(value, what):
    value = float(value)
    if not value >= 0 or math.isinf(value):
        raise NegativeWeight(f"{what} must be a finite nonnegative number, got {value}")
    return value


# --------------------------------------------------------------------------
# scalar concave functions M: R+ -> R+
# --------------------------------------------------------------------------

class ScalarConcave:
    name: str = ""

    def value(self, s):
        raise NotImplementedError

    def deriv(self, s):
        """Right derivative."""
        raise NotImplementedError

    def breakpoints(self) -> np.ndarray:
        return np.empty(0)

    def params(self) -> list[float]:
        raise NotImplementedError

    def to_json(self) -> dict:
        return {"name": self.name, "params": [float(p) for p in self.params()]}

    def __eq__(self, other):
        return type(self) is type(other) and self.params() == other.params()

    def __hash__(self):
        return hash((self.name, tuple(self.params())))

    def __repr__(self):
        return f"{type(self).__name__}({', '.join(map(repr, self.params()))})"


class PiecewiseLinear(ScalarConcave):
    """Concave piecewise-linear M with M(0) = 0.

    ``slopes[k]`` applies on ``[breaks[k-1], breaks[k])`` with ``breaks[-1] = 0``;
    the last slope continues to infinity.  JSON params interleave them as
    ``[slope0, b1, slope1, b2, slope2, ...]``.
    """

    name = "pwl"

    def __init__(self, breaks: Sequence[float], slopes: Sequence[float]):
        breaks = [float(b) for b in breaks]
        slopes = [float(a) for a in slopes]
        if len(slopes) != len(breaks) + 1:
            raise ExprError("piecewise-linear needs one more slope than breakpoints")
        if any(not math.isfinite(a) for a in slopes):
            raise UnboundedGradient("piecewise-linear slopes must be finite")
        if any(a < 0 for a in slopes):
            raise NegativeWeight("piecewise-linear slopes must be nonnegative")
        if any(b2 <= b1 for b1, b2 in zip(breaks, breaks[1:])) or any(b < 0 for b in breaks):
            raise ExprError("breakpoints must be nonnegative and strictly increasing")
        if any(a2 > a1 for a1, a2 in zip(slopes, slopes[1:])):
            raise ExprError("slopes must be nonincreasing (concavity)")
        self.breaks = np.asarray(breaks)
        self.slopes = np.asarray(slopes)
        # value at each breakpoint
        widths = np.diff(np.concatenate([[0.0], self.breaks]))
        self.knots = np.concatenate([[0.0], np.cumsum(widths * self.slopes[:-1])])

    @classmethod
    def from_params(cls, params):
        params = list(params)
        if len(params) % 2 == 0:
            raise ExprError("pwl params must be [slope0, b1, slope1, ...]")
        return cls(params[1::2], params[0::2])

    def params(self):
        out = [float(self.slopes[0])]
        for b, a in zip(self.breaks, self.slopes[1:]):
            out += [float(b), float(a)]
        return out

    def segment(self, s):
        return np.searchsorted(self.breaks, s, side="right")

    def value(self, s):
        s = np.asarray(s, dtype=float)
        k = self.segment(s)
        start = np.concatenate([[0.0], self.breaks])[k]
        return self.knots[k] + self.slopes[k] * (s - start)

    def deriv(self, s):
        return self.slopes[self.segment(np.asarray(s, dtype=float))]

    def breakpoints(self):
        return self.breaks


class Cap(PiecewiseLinear):
    """s -> min(s, B)."""

    name = "cap"

    def __init__(self, B: float):
        self.B = _nonneg(B, "cap")
        super().__init__([self.B], [1.0, 0.0])

    def params(self):
        return [self.B]


class _Identity(PiecewiseLinear):
    name = "identity"

    def __init__(self):
        super().__init__([], [1.0])

    def params(self):
        return []


class Log1p(ScalarConcave):
    """s -> log(1 + c s)."""

    name = "log1p"

    def __init__(self, c: float):
        self.c = _nonneg(c, "log1p rate")

    def value(self, s):
        return np.log1p(self.c * np.asarray(s, dtype=float))

    def deriv(self, s):
        return self.c / (1.0 + self.c * np.asarray(s, dtype=float))

    def params(self):
        return [self.c]


class ExpSat(ScalarConcave):
    """s -> 1 - exp(-c s)."""

    name = "exp_sat"

    def __init__(self, c: float):
        self.c = _nonneg(c, "exp_sat rate")

    def value(self, s):
        return -np.expm1(-self.c * np.asarray(s, dtype=float))

    def deriv(self, s):
        return self.c * np.exp(-self.c * np.asarray(s, dtype=float))

    def params(self):
        return [self.c]


class Pow(PiecewiseLinear):
    """s -> s**p.  Only p == 1 has a finite slope at 0 and is concave, so
    every other exponent is rejected; kept so that specs using it fail loudly."""

    name = "pow"

    def __init__(self, p: float):
        p = float(p)
        if 0 < p < 1:
            raise UnboundedGradient(f"s**{p} has infinite slope at 0")
        if p != 1:
            raise ExprError(f"s**{p} is not a concave nondecreasing function with M(0)=0")
        self.p = p
        super().__init__([], [1.0])

    def params(self):
        return [self.p]


_SCALARS = {
    "cap": lambda p: Cap(*p),
    "log1p": lambda p: Log1p(*p),
    "exp_sat": lambda p: ExpSat(*p),
    "pwl": PiecewiseLinear.from_params,
    "pow": lambda p: Pow(*p),
}


def scalar_from_json(d: Mapping) -> ScalarConcave:
    name = d.get("name")
    if name not in _SCALARS:
        raise ExprError(f"unknown scalar function {name!r}")
    try:
        return _SCALARS[name](list(d.get("params", [])))
    except TypeError as exc:
        raise ExprError(f"bad params for {name}: {exc}") from None


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _weights(w: Mapping | Sequence, what="weight") -> dict[int, float]:
    if not isinstance(w, Mapping):
        w = dict(enumerate(w))
    out = {}
    for k, v in w.items():
        k = int(k)
        if k < 0:
            raise UnknownCoord(f"negative coordinate id {k}")
        out[k] = _nonneg(v, what)
    return out


def _as_point(x, dim: int) -> np.ndarray:
    if isinstance(x, Mapping):
        size = max([dim] + [int(k) + 1 for k in x])
        v = np.zeros(size)
        for k, val in x.items():
            v[int(k)] = val
        x = v
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("a point must be a 1-D vector")
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise NegativeInput("valuations are defined on the nonnegative orthant")
    if x.size < dim:
        x = np.concatenate([x, np.zeros(dim - x.size)])
    return x


def _as_cols(cols, width):
    if cols is None:
        return np.arange(width)
    return np.asarray(cols, dtype=np.int64).reshape(-1)


def _mix(codes: Iterable[np.ndarray]) -> np.ndarray:
    out = None
    for i, c in enumerate(codes):
        c = np.asarray(c, dtype=np.int64) * _MIX[i % len(_MIX)]
        out = c if out is None else (out * np.int64(1000003)) ^ c
    return out


class _Block:
    """Vectorized sum of ``coeff_r * M_r(<w_r, x>)`` terms.

    This is the workhorse behind Linear, BudgetAdditive, ConcaveScalar over a
    linear form, and the separable part of Sum.
    """

    def __init__(self, terms, width):
        # terms: list of (coeff, ScalarConcave, {coord: w})
        self.T = len(terms)
        self.width = width
        rows, cols, vals = [], [], []
        for r, (_, _, w) in enumerate(terms):
            for k, v in w.items():
                if v != 0:
                    rows.append(r)
                    cols.append(k)
                    vals.append(v)
        self.W = sp.csr_matrix((vals, (rows, cols)), shape=(self.T, width))
        self.Wc = self.W.tocsc()
        self.coeff = np.array([c for c, _, _ in terms], dtype=float)
        fns = [fn for _, fn, _ in terms]
        self.kind = np.array([0 if isinstance(fn, PiecewiseLinear) else 1 if isinstance(fn, Log1p) else 2
                              for fn in fns])
        self.rate = np.array([getattr(fn, "c", 0.0) for fn in fns])
        kmax = max([len(fn.breakpoints()) for fn in fns if isinstance(fn, PiecewiseLinear)], default=0)
        self.breaks = np.full((self.T, kmax), np.inf)
        self.slopes = np.zeros((self.T, kmax + 1))
        self.knots = np.zeros((self.T, kmax + 1))
        self.starts = np.zeros((self.T, kmax + 1))
        for r, fn in enumerate(fns):
            if isinstance(fn, PiecewiseLinear):
                nb = len(fn.breaks)
                self.breaks[r, :nb] = fn.breaks
                self.slopes[r, :nb + 1] = fn.slopes
                self.slopes[r, nb + 1:] = fn.slopes[-1]
                self.knots[r, :nb + 1] = fn.knots
                self.starts[r, 1:nb + 1] = fn.breaks
                self.knots[r, nb + 1:] = np.inf  # never selected
        self._col_cache: dict[bytes, tuple] = {}

        self.all_pw = bool(np.all(self.kind == 0))
        self._slopes_flat = self.slopes.ravel()
        self._knots_flat = self.knots.ravel()
        self._starts_flat = self.starts.ravel()

    # rows -> (K, len(rows)) evaluations of M and M'
    def _segments(self, Z, rows):
        if self.breaks.shape[1] == 0:
            return np.zeros(Z.shape, dtype=np.int64)
        if self.breaks.shape[1] == 1:
            return (Z >= self.breaks[rows, 0]).astype(np.int64)
        return (Z[..., None] >= self.breaks[rows][None]).sum(axis=-1)

    def _pw(self, z, r, deriv):
        idx = self._segments(z, r) + r * self.slopes.shape[1]
        slope = self._slopes_flat[idx]
        if deriv:
            return slope
        # knot + slope * offset keeps values on a flat piece exact
        return self._knots_flat[idx] + slope * (z - self._starts_flat[idx])

    def _apply(self, Z, rows, deriv):
        if self.all_pw:
            return self._pw(Z, rows, deriv)
        out = np.empty_like(Z)
        kind = self.kind[rows]
        for code in np.unique(kind):
            sel = np.flatnonzero(kind == code)
            r = rows[sel]
            z = Z[:, sel]
            if code == 0:
                out[:, sel] = self._pw(z, r, deriv)
            elif code == 1:
                c = self.rate[r]
                out[:, sel] = c / (1.0 + c * z) if deriv else np.log1p(c * z)
            else:
                c = self.rate[r]
                out[:, sel] = c * np.exp(-c * z) if deriv else -np.expm1(-c * z)
        return out

    def _cols(self, cols):
        """(rows touching cols, W[rows, cols].T, W[rows]) for a column set."""
        key = cols.tobytes()
        hit = self._col_cache.get(key)
        if hit is None:
            valid = cols < self.width
            if not valid.any():
                rows = np.empty(0, dtype=np.int64)
                hit = (rows, sp.csr_matrix((cols.size, 0)), self.W[rows])
            else:
                sub = self.Wc[:, np.where(valid, cols, 0)]
                if not valid.all():
                    sub = sub @ sp.diags(valid.astype(float))
                sub = sub.tocsr()
                rows = np.flatnonzero(np.diff(sub.indptr) > 0)
                hit = (rows, sub[rows].T.tocsr(), self.W[rows])
            if len(self._col_cache) > 256:
                self._col_cache.clear()
            self._col_cache[key] = hit
        return hit

    def loads(self, X):
        return np.asarray((self.W @ X[:, :self.width].T).T)

    def value_batch(self, X):
        L = self.loads(X)
        rows = np.arange(self.T)
        return self._apply(L, rows, False) @ self.coeff

    def grad_batch(self, X, cols):
        rows, WT, WR = self._cols(cols)
        if rows.size == 0:
            return np.zeros((X.shape[0], cols.size))
        L = np.asarray((WR @ X[:, :self.width].T).T)
        G = self._apply(L, rows, True) * self.coeff[rows]
        return np.asarray((WT @ G.T).T)

    def value_ray(self, x, s):
        L = self.W @ x[:self.width]
        Z = s[:, None] * L[None, :]
        return self._apply(Z, np.arange(self.T), False) @ self.coeff

    def grad_ray(self, x, s, cols):
        rows, WT, WR = self._cols(cols)
        if rows.size == 0:
            return np.zeros((s.size, cols.size))
        L = WR @ x[:self.width]
        G = self._apply(s[:, None] * L[None, :], rows, True) * self.coeff[rows]
        return np.asarray((WT @ G.T).T)

    def grad_ray_w(self, x, s, w, cols):
        rows, WT, WR = self._cols(cols)
        if rows.size == 0:
            return np.zeros(cols.size)
        L = WR @ x[:self.width]
        v = (w @ self._apply(s[:, None] * L[None, :], rows, True)) * self.coeff[rows]
        return WT @ v

    def dir_ray(self, x, s):
        L = self.W @ x[:self.width]
        live = np.flatnonzero(L > 0)
        if live.size == 0:
            return np.zeros(s.size)
        G = self._apply(s[:, None] * L[live][None, :], live, True)
        return G @ (self.coeff[live] * L[live])

    def kinks(self, x, s_lo, s_hi, cols=None):
        if self.breaks.shape[1] == 0:
            return np.empty(0)
        if cols is None:
            rows, L = np.arange(self.T), self.W @ x[:self.width]
        else:
            rows, _, WR = self._cols(cols)
            L = WR @ x[:self.width]
        live = L > 0
        if not live.any():
            return np.empty(0)
        s = self.breaks[rows][live] / L[live][:, None]
        s = s[np.isfinite(s)]
        return s[(s > s_lo) & (s < s_hi)]

    def regime_batch(self, X):
        if self.breaks.shape[1] == 0:
            return np.zeros(X.shape[0], dtype=np.int64)
        L = self.loads(X)
        seg = self._segments(L, np.arange(self.T)).astype(np.int64)
        return _mix(seg.T)


# --------------------------------------------------------------------------
# nodes
# --------------------------------------------------------------------------

class ValuationExpr:
    """Base class.  Subclasses are immutable after construction."""

    kind: str = ""
    dim: int = 0

    # -- batched primitives (X has at least ``dim`` columns) --
    def value_batch(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_batch(self, X: np.ndarray, cols: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- ray primitives: evaluation at s_k * x --
    def value_ray(self, x, s):
        return self.value_batch(s[:, None] * x[None, :])

    def grad_ray(self, x, s, cols):
        return self.grad_batch(s[:, None] * x[None, :], cols)

    def grad_ray_w(self, x, s, w, cols):
        """sum_k w_k * grad f(s_k x)[cols]."""
        return w @ self.grad_ray(x, s, cols)

    def dir_ray(self, x, s):
        """<grad f(s_k x), x> for each k."""
        sup = np.flatnonzero(x > 0)
        if sup.size == 0:
            return np.zeros(s.size)
        return self.grad_ray(x, s, sup) @ x[sup]

    def ray_kinks(self, x, s_lo, s_hi, cols=None) -> np.ndarray:
        """Scales in (s_lo, s_hi) where f or grad f may be nonsmooth along s*x.

        With ``cols`` given, only kinks that can affect those gradient
        coordinates need to be reported.
        """
        return np.empty(0)

    def regime_batch(self, X) -> np.ndarray:
        """Integer code per row identifying the smooth piece containing it."""
        return np.zeros(X.shape[0], dtype=np.int64)

    # -- structure --
    def coords(self) -> frozenset[int]:
        raise NotImplementedError

    def restrict(self, S: Iterable[int]) -> "ValuationExpr":
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError

    # -- convenience point API --
    def value(self, x) -> float:
        x = _as_point(x, self.dim)
        return float(self.value_batch(x[None, :])[0])

    def grad(self, x, cols=None) -> np.ndarray:
        x = _as_point(x, self.dim)
        return self.grad_batch(x[None, :], _as_cols(cols, x.size))[0]

    @property
    def gmax(self) -> float:
        """Largest coordinate of grad f(0), which bounds grad f everywhere."""
        if self.dim == 0:
            return 0.0
        return float(np.max(self.grad_batch(np.zeros((1, self.dim)), np.arange(self.dim)), initial=0.0))

    def __call__(self, x):
        return self.value(x)

    def __eq__(self, other):
        return type(self) is type(other) and self._key() == other._key()

    def __hash__(self):
        return hash(repr(self._key()))

    def _key(self):
        return self.to_json()

    def __repr__(self):
        return f"{type(self).__name__}({self.to_json()!r})"


class _SeparableExpr(ValuationExpr):
    """Node that is a single ``M(<w, x>)`` term."""

    def _init_block(self, fn, weights):
        self.weights = weights
        self.dim = max(weights, default=-1) + 1
        self._fn = fn
        self._block = _Block([(1.0, fn, weights)], self.dim)

    def _terms(self):
        return [(1.0, self._fn, self.weights)]

    def value_batch(self, X):
        return self._block.value_batch(X)

    def grad_batch(self, X, cols):
        return self._block.grad_batch(X, cols)

    def value_ray(self, x, s):
        return self._block.value_ray(x, s)

    def grad_ray(self, x, s, cols):
        return self._block.grad_ray(x, s, cols)

    def grad_ray_w(self, x, s, w, cols):
        return self._block.grad_ray_w(x, s, w, cols)

    def dir_ray(self, x, s):
        return self._block.dir_ray(x, s)

    def ray_kinks(self, x, s_lo, s_hi, cols=None):
        return self._block.kinks(x, s_lo, s_hi, cols)

    def regime_batch(self, X):
        return self._block.regime_batch(X)

    def coords(self):
        return frozenset(k for k, v in self.weights.items())

    def _restricted_weights(self, S):
        S = set(S)
        return {k: v for k, v in self.weights.items() if k in S}


class Linear(_SeparableExpr):
    kind = "linear"

    def __init__(self, weights):
        self._init_block(_Identity(), _weights(weights))

    def restrict(self, S):
        return Linear(self._restricted_weights(S))

    def to_json(self):
        return {"kind": "linear", "weights": {str(k): v for k, v in self.weights.items()}}


class BudgetAdditive(_SeparableExpr):
    kind = "budget_additive"

    def __init__(self, weights, budget):
        self.budget = _nonneg(budget, "budget")
        self._init_block(Cap(self.budget), _weights(weights))

    def restrict(self, S):
        return BudgetAdditive(self._restricted_weights(S), self.budget)

    def to_json(self):
        return {"kind": "budget_additive", "weights": {str(k): v for k, v in self.weights.items()},
                "budget": self.budget}


class ConcaveScalar(ValuationExpr):
    """M(inner(x)) for a scalar concave M."""

    kind = "concave_scalar"

    def __init__(self, fn: ScalarConcave, inner: ValuationExpr):
        if not isinstance(fn, ScalarConcave):
            raise ExprError("ConcaveScalar needs a ScalarConcave function")
        self.fn = fn
        self.inner = inner
        self.dim = inner.dim
        self._sep = None
        if isinstance(inner, Linear):
            self._sep = _Block([(1.0, fn, inner.weights)], self.dim)

    def _terms(self):
        if isinstance(self.inner, Linear):
            return [(1.0, self.fn, self.inner.weights)]
        return None

    def value_batch(self, X):
        if self._sep is not None:
            return self._sep.value_batch(X)
        return self.fn.value(self.inner.value_batch(X))

    def grad_batch(self, X, cols):
        if self._sep is not None:
            return self._sep.grad_batch(X, cols)
        outer = self.fn.deriv(self.inner.value_batch(X))
        return outer[:, None] * self.inner.grad_batch(X, cols)

    def value_ray(self, x, s):
        if self._sep is not None:
            return self._sep.value_ray(x, s)
        return self.fn.value(self.inner.value_ray(x, s))

    def grad_ray(self, x, s, cols):
        if self._sep is not None:
            return self._sep.grad_ray(x, s, cols)
        outer = self.fn.deriv(self.inner.value_ray(x, s))
        return outer[:, None] * self.inner.grad_ray(x, s, cols)

    def grad_ray_w(self, x, s, w, cols):
        if self._sep is not None:
            return self._sep.grad_ray_w(x, s, w, cols)
        return self.inner.grad_ray_w(x, s, w * self.fn.deriv(self.inner.value_ray(x, s)), cols)

    def dir_ray(self, x, s):
        if self._sep is not None:
            return self._sep.dir_ray(x, s)
        return self.fn.deriv(self.inner.value_ray(x, s)) * self.inner.dir_ray(x, s)

    def ray_kinks(self, x, s_lo, s_hi, cols=None):
        if self._sep is not None:
            return self._sep.kinks(x, s_lo, s_hi, cols)
        out = [self.inner.ray_kinks(x, s_lo, s_hi, cols)]
        bps = self.fn.breakpoints()
        if bps.size:
            # inner value along the ray is nondecreasing in s
            def g(s):
                return float(self.inner.value_ray(x, np.array([s]))[0])
            lo_val, hi_val = g(s_lo), g(s_hi)
            for b in bps:
                if lo_val < b <= hi_val:
                    out.append(np.array([_first_crossing(g, b, s_lo, s_hi)]))
        return np.concatenate(out)

    def regime_batch(self, X):
        inner = self.inner.value_batch(X)
        seg = np.searchsorted(self.fn.breakpoints(), inner, side="right")
        return _mix([seg, self.inner.regime_batch(X)])

    def coords(self):
        return self.inner.coords()

    def restrict(self, S):
        return ConcaveScalar(self.fn, self.inner.restrict(S))

    def to_json(self):
        return {"kind": "concave_scalar", "fn": self.fn.to_json(), "inner": self.inner.to_json()}


def _first_crossing(g, level, lo, hi):
    """Smallest s in [lo, hi] with g(s) >= level, for nondecreasing g.

    The bracketed function is shifted by a tiny positive amount once the level
    is reached, so a plateau sitting exactly at ``level`` resolves to its left
    end instead of an arbitrary point inside it.
    """
    def h(s):
        v = g(s) - level
        return v if v < 0 else v + 1e-300
    return brentq(h, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=400)


def _locate_change(codes, lo, hi, c_lo, rounds=40, width=16):
    """Where the batched ``codes(s)`` first leaves c_lo, by multi-section."""
    for _ in range(rounds):
        grid = np.linspace(lo, hi, width + 2)[1:-1]
        c = codes(grid)
        off = np.flatnonzero(c != c_lo)
        if off.size:
            k = off[0]
            hi = grid[k]
            if k:
                lo = grid[k - 1]
        else:
            lo = grid[-1]
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    return hi


class Sum(ValuationExpr):
    """sum_i coeff_i * f_i(x); terms that are a scalar of a linear form are
    folded into one vectorized block."""

    kind = "sum"

    def __init__(self, terms: Sequence[tuple[float, ValuationExpr]]):
        self.terms = tuple((_nonneg(c, "sum coefficient"), e) for c, e in terms)
        for _, e in self.terms:
            if not isinstance(e, ValuationExpr):
                raise ExprError("Sum terms must be valuation expressions")
        self.dim = max((e.dim for _, e in self.terms), default=0)
        sep, general = [], []
        self._flatten(1.0, sep, general)
        self._block = _Block(sep, self.dim) if sep else None
        self._general = tuple(general)

    def _flatten(self, scale, sep, general):
        for c, e in self.terms:
            c = c * scale
            if c == 0:
                continue
            if isinstance(e, Sum):
                e._flatten(c, sep, general)
                continue
            terms = e._terms() if hasattr(e, "_terms") else None
            if terms is not None:
                sep.extend((c * c0, fn, w) for c0, fn, w in terms)
            else:
                general.append((c, e))

    def _parts(self, fn_block, fn_general, K):
        out = fn_block(self._block) if self._block is not None else 0.0
        for c, e in self._general:
            out = out + c * fn_general(e)
        if np.isscalar(out):
            return np.zeros(K)
        return out

    def value_batch(self, X):
        return self._parts(lambda b: b.value_batch(X), lambda e: e.value_batch(X), X.shape[0])

    def grad_batch(self, X, cols):
        out = self._block.grad_batch(X, cols) if self._block is not None else np.zeros((X.shape[0], cols.size))
        for c, e in self._general:
            out = out + c * e.grad_batch(X, cols)
        return out

    def value_ray(self, x, s):
        return self._parts(lambda b: b.value_ray(x, s), lambda e: e.value_ray(x, s), s.size)

    def grad_ray(self, x, s, cols):
        out = self._block.grad_ray(x, s, cols) if self._block is not None else np.zeros((s.size, cols.size))
        for c, e in self._general:
            out = out + c * e.grad_ray(x, s, cols)
        return out

    def grad_ray_w(self, x, s, w, cols):
        out = self._block.grad_ray_w(x, s, w, cols) if self._block is not None else np.zeros(cols.size)
        for c, e in self._general:
            out = out + c * e.grad_ray_w(x, s, w, cols)
        return out

    def dir_ray(self, x, s):
        return self._parts(lambda b: b.dir_ray(x, s), lambda e: e.dir_ray(x, s), s.size)

    def ray_kinks(self, x, s_lo, s_hi, cols=None):
        out = [self._block.kinks(x, s_lo, s_hi, cols)] if self._block is not None else []
        out += [e.ray_kinks(x, s_lo, s_hi, cols) for _, e in self._general]
        return np.concatenate(out) if out else np.empty(0)

    def regime_batch(self, X):
        codes = [self._block.regime_batch(X)] if self._block is not None else []
        codes += [e.regime_batch(X) for _, e in self._general]
        return _mix(codes) if codes else np.zeros(X.shape[0], dtype=np.int64)

    def coords(self):
        return frozenset().union(*(e.coords() for _, e in self.terms))

    def restrict(self, S):
        S = frozenset(S)
        return Sum([(c, e.restrict(S)) for c, e in self.terms])

    def to_json(self):
        return {"kind": "sum", "terms": [{"coeff": c, "expr": e.to_json()} for c, e in self.terms]}


class LinTransform(ValuationExpr):
    """inner(A x) where row i of A feeds synthetic coordinate i of ``inner``."""

    kind = "lin_transform"

    def __init__(self, rows: Sequence[Mapping], inner: ValuationExpr):
        self.rows = tuple(_weights(r, "matrix entry") for r in rows)
        if inner.dim > len(self.rows):
            raise ArityMismatch(f"inner expression uses {inner.dim} coordinates, matrix has {len(self.rows)} rows")
        self.inner = inner
        self.dim = max((max(r, default=-1) + 1 for r in self.rows), default=0)
        k = len(self.rows)
        ii, jj, vv = [], [], []
        for i, r in enumerate(self.rows):
            for j, v in r.items():
                if v != 0:
                    ii.append(i)
                    jj.append(j)
                    vv.append(v)
        self.A = sp.csr_matrix((vv, (ii, jj)), shape=(k, self.dim))
        self._Ac = self.A.tocsc()
        self._syn = np.arange(k)
        self._col_cache: dict[bytes, tuple] = {}

    def _y(self, X):
        return np.asarray((self.A @ X[:, :self.dim].T).T)

    def _cols(self, cols):
        key = cols.tobytes()
        hit = self._col_cache.get(key)
        if hit is None:
            valid = cols < self.dim
            sub = self._Ac[:, np.where(valid, cols, 0)]
            if not valid.all():
                sub = sub @ sp.diags(valid.astype(float))
            sub = sub.tocsr()
            syn = np.flatnonzero(np.diff(sub.indptr) > 0)
            hit = (syn, sub[syn].T.tocsr())
            if len(self._col_cache) > 64:
                self._col_cache.clear()
            self._col_cache[key] = hit
        return hit

    def value_batch(self, X):
        return self.inner.value_batch(self._y(X))

    def grad_batch(self, X, cols):
        syn, AT = self._cols(cols)
        if syn.size == 0:
            return np.zeros((X.shape[0], cols.size))
        G = self.inner.grad_batch(self._y(X), syn)
        return np.asarray((AT @ G.T).T)

    def value_ray(self, x, s):
        return self.inner.value_ray(self.A @ x[:self.dim], s)

    def grad_ray(self, x, s, cols):
        syn, AT = self._cols(cols)
        if syn.size == 0:
            return np.zeros((s.size, cols.size))
        G = self.inner.grad_ray(self.A @ x[:self.dim], s, syn)
        return np.asarray((AT @ G.T).T)

    def grad_ray_w(self, x, s, w, cols):
        syn, AT = self._cols(cols)
        if syn.size == 0:
            return np.zeros(cols.size)
        return AT @ self.inner.grad_ray_w(self.A @ x[:self.dim], s, w, syn)

    def dir_ray(self, x, s):
        return self.inner.dir_ray(self.A @ x[:self.dim], s)

    def ray_kinks(self, x, s_lo, s_hi, cols=None):
        syn = None if cols is None else self._cols(cols)[0]
        return self.inner.ray_kinks(self.A @ x[:self.dim], s_lo, s_hi, syn)

    def regime_batch(self, X):
        return self.inner.regime_batch(self._y(X))

    def coords(self):
        return frozenset(k for r in self.rows for k in r)

    def restrict(self, S):
        S = set(S)
        return LinTransform([{k: v for k, v in r.items() if k in S} for r in self.rows], self.inner)

    def to_json(self):
        return {"kind": "lin_transform", "rows": [{str(k): v for k, v in r.items()} for r in self.rows],
                "inner": self.inner.to_json()}


class Compose(ValuationExpr):
    """outer(g_1(x), ..., g_k(x))."""

    kind = "compose"
    #: probe count used to locate kinks of ``outer`` along the inner curve
    n_probe = 96

    def __init__(self, outer: ValuationExpr, inners: Sequence[ValuationExpr]):
        self.outer = outer
        self.inners = tuple(inners)
        if outer.dim > len(self.inners):
            raise ArityMismatch(f"outer expression uses {outer.dim} coordinates, got {len(self.inners)} inners")
        self.dim = max((g.dim for g in self.inners), default=0)
        self._k = np.arange(len(self.inners))

    def _G(self, X):
        if not self.inners:
            return np.zeros((X.shape[0], 0))
        return np.stack([g.value_batch(X) for g in self.inners], axis=1)

    def _Gray(self, x, s):
        if not self.inners:
            return np.zeros((s.size, 0))
        return np.stack([g.value_ray(x, s) for g in self.inners], axis=1)

    def value_batch(self, X):
        return self.outer.value_batch(self._G(X))

    def grad_batch(self, X, cols):
        og = self.outer.grad_batch(self._G(X), self._k)
        out = np.zeros((X.shape[0], cols.size))
        for i, g in enumerate(self.inners):
            if np.any(og[:, i]):
                out += og[:, i:i + 1] * g.grad_batch(X, cols)
        return out

    def value_ray(self, x, s):
        return self.outer.value_batch(self._Gray(x, s))

    def grad_ray(self, x, s, cols):
        og = self.outer.grad_batch(self._Gray(x, s), self._k)
        out = np.zeros((s.size, cols.size))
        for i, g in enumerate(self.inners):
            if np.any(og[:, i]):
                out += og[:, i:i + 1] * g.grad_ray(x, s, cols)
        return out

    def grad_ray_w(self, x, s, w, cols):
        og = self.outer.grad_batch(self._Gray(x, s), self._k)
        out = np.zeros(cols.size)
        for i, g in enumerate(self.inners):
            if np.any(og[:, i]):
                out += g.grad_ray_w(x, s, w * og[:, i], cols)
        return out

    def dir_ray(self, x, s):
        og = self.outer.grad_batch(self._Gray(x, s), self._k)
        out = np.zeros(s.size)
        for i, g in enumerate(self.inners):
            if np.any(og[:, i]):
                out += og[:, i] * g.dir_ray(x, s)
        return out

    def ray_kinks(self, x, s_lo, s_hi, cols=None):
        out = [g.ray_kinks(x, s_lo, s_hi, cols) for g in self.inners]
        # kinks of the outer along the (nonlinear) inner curve: probe its regime
        t = np.unique(np.concatenate([np.linspace(1.0 / s_hi, 1.0 / s_lo, self.n_probe),
                                      np.geomspace(1.0 / s_hi, 1.0 / s_lo, self.n_probe // 2)]))
        probe = np.sort(1.0 / t)
        probe = probe[(probe >= s_lo) & (probe <= s_hi)]

        def code(s):
            return self.outer.regime_batch(self._Gray(x, s))

        codes = code(probe)
        found = [_locate_change(code, probe[i], probe[i + 1], codes[i])
                 for i in np.flatnonzero(codes[1:] != codes[:-1])]
        out.append(np.asarray(found, dtype=float))
        return np.concatenate(out)

    def regime_batch(self, X):
        return _mix([self.outer.regime_batch(self._G(X))] + [g.regime_batch(X) for g in self.inners])

    def coords(self):
        return frozenset().union(*(g.coords() for g in self.inners))

    def restrict(self, S):
        S = frozenset(S)
        return Compose(self.outer, [g.restrict(S) for g in self.inners])

    def to_json(self):
        return {"kind": "compose", "outer": self.outer.to_json(), "inners": [g.to_json() for g in self.inners]}


class Polymatroid(ValuationExpr):
    """pm_value(r, (b_i * x_{c_i})_i) with ground element i bound to coordinate c_i.

    ``scale`` maps coordinates to b.  Ground element i of the rank oracle is
    the i-th smallest coordinate in ``scale``, so the encoding does not depend
    on key order.
    """

    kind = "polymatroid"

    def __init__(self, rank: pm.RankOracle, scale):
        if isinstance(scale, Mapping):
            scale = list(scale.items())
        self.scale = tuple(sorted((int(c), _nonneg(b, "polymatroid scale")) for c, b in scale))
        cs = [c for c, _ in self.scale]
        if any(c < 0 for c in cs):
            raise UnknownCoord("negative coordinate id")
        if len(set(cs)) != len(cs):
            raise ExprError("polymatroid coordinates must be distinct")
        m = len(cs)
        if m > pm.MAX_GROUND:
            raise pm.GroundSetTooLarge(f"polymatroid ground set {m} exceeds {pm.MAX_GROUND}")
        if rank.m is not None and rank.m < m:
            raise ArityMismatch(f"rank oracle has ground set {rank.m}, scale lists {m}")
        self.rank = rank
        self.idx = np.array(cs, dtype=np.int64)
        self.b = np.array([b for _, b in self.scale])
        self.dim = int(self.idx.max()) + 1 if m else 0
        rank.table(m)  # validates size early

    def _Y(self, X):
        return X[:, self.idx] * self.b

    def value_batch(self, X):
        return pm.pm_value_batch(self.rank, self._Y(X))

    def _scatter(self, G, cols):
        pos = {int(c): i for i, c in enumerate(self.idx)}
        out = np.zeros((G.shape[0], cols.size))
        for j, c in enumerate(cols):
            i = pos.get(int(c))
            if i is not None:
                out[:, j] = G[:, i] * self.b[i]
        return out

    def grad_batch(self, X, cols):
        if not np.isin(cols, self.idx).any():
            return np.zeros((X.shape[0], cols.size))
        return self._scatter(pm.pm_grad_batch(self.rank, self._Y(X)), cols)

    # Along a ray the maximal minimizer is piecewise constant, so evaluating
    # the envelope once replaces a 2^m enumeration per quadrature node.
    def _envelope(self, x):
        y = x[self.idx] * self.b
        key = y.tobytes()
        hit = self.__dict__.get("_env_cache")
        if hit is None or hit[0] != key:
            hit = (key, pm.ray_envelope(self.rank, y))
            self._env_cache = hit
        return hit[1]

    def _pieces(self, x, s):
        starts, masks, consts, slopes = self._envelope(x)
        k = np.searchsorted(starts, s, side="right") - 1
        # a node within rounding of a breakpoint takes the piece starting there:
        # at the breakpoint every tied set is a minimizer and their union is
        # that piece's set
        if starts.size > 1:
            nxt = np.minimum(k + 1, starts.size - 1)
            k = np.where((nxt > k) & (starts[nxt] - s <= 1e-12 * s), nxt, k)
        return k, masks, consts, slopes

    def value_ray(self, x, s):
        if self.idx.size == 0:
            return np.zeros(s.size)
        k, _, consts, slopes = self._pieces(x, s)
        return consts[k] + s * slopes[k]

    def grad_ray(self, x, s, cols):
        if self.idx.size == 0 or not np.isin(cols, self.idx).any():
            return np.zeros((s.size, cols.size))
        k, masks, _, _ = self._pieces(x, s)
        G = 1.0 - pm._member_matrix(masks[k], self.idx.size).astype(float)
        return self._scatter(G, cols)

    def dir_ray(self, x, s):
        return self.grad_ray(x, s, self.idx) @ x[self.idx]

    def ray_kinks(self, x, s_lo, s_hi, cols=None):
        if self.idx.size == 0 or not np.any(x[self.idx] * self.b > 0):
            return np.empty(0)
        starts = self._envelope(x)[0][1:]
        return starts[(starts > s_lo) & (starts < s_hi)]

    def regime_batch(self, X):
        return pm.tight_set_batch(self.rank, self._Y(X))

    def coords(self):
        return frozenset(int(c) for c in self.idx)

    def restrict(self, S):
        S = set(S)
        return Polymatroid(self.rank, [(c, b if c in S else 0.0) for c, b in self.scale])

    def to_json(self):
        return {"kind": "polymatroid", "rank": self.rank.to_json(),
                "scale": {str(c): b for c, b in self.scale}}


class RawValuation(ValuationExpr):
    """Unvalidated wrapper around point callables (for property checks only)."""

    kind = "raw"

    def __init__(self, value_fn: Callable, grad_fn: Callable, dim: int, name: str = "raw"):
        self._v, self._g = value_fn, grad_fn
        self.dim = dim
        self.name = name

    def value_batch(self, X):
        return np.array([self._v(row[:self.dim]) for row in X], dtype=float)

    def grad_batch(self, X, cols):
        out = np.zeros((X.shape[0], cols.size))
        ok = cols < self.dim
        for k, row in enumerate(X):
            g = np.asarray(self._g(row[:self.dim]), dtype=float)
            out[k, ok] = g[cols[ok]]
        return out

    def coords(self):
        return frozenset(range(self.dim))

    def restrict(self, S):
        mask = np.zeros(self.dim)
        mask[[i for i in S if i < self.dim]] = 1.0
        return RawValuation(lambda x: self._v(x * mask), lambda x: np.asarray(self._g(x * mask)) * mask,
                            self.dim, self.name)

    def to_json(self):
        raise TypeError("raw valuations are not serializable")

    def _key(self):
        return (self.name, id(self._v), id(self._g))


# --------------------------------------------------------------------------
# functional API and JSON
# --------------------------------------------------------------------------

def from_json(d: Mapping) -> ValuationExpr:
    try:
        kind = d["kind"]
        if kind == "linear":
            return Linear(d["weights"])
        if kind == "budget_additive":
            return BudgetAdditive(d["weights"], d["budget"])
        if kind == "concave_scalar":
            return ConcaveScalar(scalar_from_json(d["fn"]), from_json(d["inner"]))
        if kind == "sum":
            return Sum([(t["coeff"], from_json(t["expr"])) for t in d["terms"]])
        if kind == "lin_transform":
            return LinTransform(d["rows"], from_json(d["inner"]))
        if kind == "compose":
            return Compose(from_json(d["outer"]), [from_json(g) for g in d["inners"]])
        if kind == "polymatroid":
            return Polymatroid(pm.rank_from_json(d["rank"]), list(d["scale"].items()))
    except (KeyError, TypeError, AttributeError) as exc:
        raise ExprError(f"malformed expression: {exc!r}") from None
    raise ExprError(f"unknown expression kind {kind!r}")


def to_json(f: ValuationExpr) -> dict:
    return f.to_json()


def construct(spec: Mapping | ValuationExpr, coords: Iterable[int] | None = None) -> ValuationExpr:
    """Build and validate an expression from its JSON description.

    ``coords`` is the declared coordinate universe; leaves referring to
    anything else raise UnknownCoord.
    """
    f = spec if isinstance(spec, ValuationExpr) else from_json(spec)
    if coords is not None:
        extra = f.coords() - set(int(c) for c in coords)
        if extra:
            raise UnknownCoord(f"expression references undeclared coordinates {sorted(extra)[:10]}")
    if not math.isfinite(f.gmax):
        raise UnboundedGradient("gradient at 0 is not finite")
    return f


def evaluate(f: ValuationExpr, x) -> float:
    return f.value(x)


def gradient(f: ValuationExpr, x, cols=None) -> np.ndarray:
    return f.grad(x, cols)


def restrict(f: ValuationExpr, S: Iterable[int]) -> ValuationExpr:
    """f with every coordinate outside S zeroed out."""
    return f.restrict(frozenset(int(i) for i in S))
