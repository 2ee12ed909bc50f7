"""Kink-aware composite Simpson rule on [t_min, 1].

The integrands met here (``t f(x/t)``, ``grad f(x/t)``, ...) are smooth except
at finitely many known kinks and may vary like ``log t`` near 0.  The base
mesh is therefore logarithmic on ``[t_min, t_split]`` and uniform on
``[t_split, 1]``; known kinks are inserted as extra panel boundaries, and each
piece gets a three-point Simpson rule.  Endpoints sitting on a kink are
evaluated as one-sided limits so the rule never straddles a jump.

The rule is specialised to the weight ``e^t`` that appears in every integral
of this package: the Simpson weights of each panel are reweighted so that
``e^t`` times any affine function of ``t`` is integrated exactly.  For
piecewise-linear valuations ``t f(x/t)`` and ``grad f(x/t)`` are piecewise
affine in ``t`` with breaks at the known kinks, so U and grad U are then exact
up to rounding; smooth valuations keep the Simpson error.

Below ``t_min`` the integrand is extended by its value at ``t_min``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ONE_SIDED = 1e-9


def _exp_moments(a, b):
    """Integrals of e^t and of e^t (t - a) / (b - a) over [a, b]."""
    L = b - a
    m0 = np.exp(a) * np.expm1(L)
    small = L < 1e-3
    Ls = np.where(small, 1.0, L)
    # L e^L - expm1(L), with a series where it cancels
    g = np.where(small, L * L * (0.5 + L * (1 / 3 + L * (1 / 8 + L / 30))),
                 Ls * np.exp(Ls) - np.expm1(Ls))
    return m0, np.exp(a) * g / np.where(L > 0, L, 1.0)


def _fit_moments(raw, t, a, b):
    """Reweight raw[k] * (c0 + c1 tau_k) per panel to match both moments."""
    L = np.where(b > a, b - a, 1.0)
    tau = (t - a) / L
    m0, m1 = _exp_moments(a, b)
    s0, s1, s2 = raw.sum(0), (raw * tau).sum(0), (raw * tau * tau).sum(0)
    det = s0 * s2 - s1 * s1
    ok = det > 1e-300
    det = np.where(ok, det, 1.0)
    c0 = np.where(ok, (m0 * s2 - m1 * s1) / det, m0 / np.where(s0 > 0, s0, 1.0))
    c1 = np.where(ok, (s0 * m1 - s1 * m0) / det, 0.0)
    return raw * (c0 + c1 * tau)


@dataclass(frozen=True)
class QuadratureScheme:
    """Composite Simpson with ``n_nodes`` base nodes (odd, >= 33).

    Attributes
    ----------
    n_nodes : int
        Node count of the base mesh, i.e. ``2 * panels + 1``.
    t_min : float
        Lower cutoff in (0, 1e-4].
    t_split : float
        Boundary between the logarithmic and the uniform part of the mesh.
    """

    n_nodes: int = 257
    t_min: float = 1e-6
    t_split: float = 0.05
    rule: str = "composite_simpson"
    _base: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.n_nodes
        if int(n) != n or n < 33 or n % 2 == 0:
            raise ValueError(f"n_nodes must be an odd integer >= 33, got {n}")
        if not 0 < self.t_min <= 1e-4:
            raise ValueError(f"t_min must lie in (0, 1e-4], got {self.t_min}")
        if not self.t_min < self.t_split < 1:
            raise ValueError("t_split must lie in (t_min, 1)")
        if self.rule != "composite_simpson":
            raise ValueError(f"unknown rule {self.rule!r}")
        edges = self._boundaries()
        none = np.zeros(edges.size - 1, bool)
        t3, w3 = self._panels(edges[:-1], edges[1:], none, none)
        # base nodes are the panel edges and midpoints: t[2p], t[2p+1], t[2p+2]
        t = np.empty(2 * (edges.size - 1) + 1)
        t[0::2], t[1::2] = edges, t3[1]
        idx = 2 * np.arange(edges.size - 1) + np.arange(3)[:, None]
        object.__setattr__(self, "_base", (edges, t, idx, w3))

    def _boundaries(self):
        panels = (self.n_nodes - 1) // 2
        log_len = np.log(self.t_split / self.t_min)
        lin_len = (1.0 - self.t_split) / self.t_split
        n_log = max(1, min(panels - 1, int(round(panels * log_len / (log_len + lin_len)))))
        n_lin = panels - n_log
        b_log = np.exp(np.linspace(np.log(self.t_min), np.log(self.t_split), n_log + 1))
        b_lin = np.linspace(self.t_split, 1.0, n_lin + 1)
        b_log[0], b_log[-1] = self.t_min, self.t_split
        return np.concatenate([b_log, b_lin[1:]])

    def _panels(self, a, b, ka, kb):
        """Three-point rules on panels [a, b]; endpoints flagged as kinks are
        evaluated as one-sided limits.  Returns (3, P) nodes and weights."""
        log_part = b <= self.t_split * (1 + 1e-12)
        mid = np.where(log_part, np.sqrt(a * b), 0.5 * (a + b))
        du = np.where(log_part, np.log(b / a), b - a)
        ta = np.where(ka, a * (1 + _ONE_SIDED), a)
        tb = np.where(kb, b * (1 - _ONE_SIDED), b)
        # Simpson in u; the Jacobian dt/du is t on the log part, 1 on the uniform part
        jac = lambda t: np.where(log_part, t, 1.0)
        raw = np.stack([du / 6 * jac(a) * np.exp(ta),
                        4 * du / 6 * jac(mid) * np.exp(mid),
                        du / 6 * jac(b) * np.exp(tb)])
        t = np.stack([ta, mid, tb])
        return t, _fit_moments(raw, t, a, b)

    def nodes(self, kinks=()):
        """Nodes and weights of the rule, with ``kinks`` (values of t) as breaks.

        Returns
        -------
        t, w : ndarray
            ``sum(w * h(t))`` approximates the integral of ``e^t h(t)`` over
            [0, 1], with ``h`` held at ``h(t_min)`` below ``t_min``.  Each
            panel integrates ``e^t`` times an affine function exactly.
        """
        edges, t_base, idx, w3 = self._base
        k = np.asarray(kinks, dtype=float).reshape(-1)
        k = np.unique(k[(k > self.t_min) & (k < 1.0)])
        if k.size > 1:
            # kinks reported by different terms may differ in the last bits
            k = k[np.concatenate([[True], np.diff(k) > 1e-12 * k[1:]])]
        n_pan = edges.size - 1
        hit = np.zeros(n_pan, bool)
        if k.size:
            # a kink sitting on an edge splits both neighbouring panels
            hit[np.clip(np.searchsorted(edges, k, side="right") - 1, 0, n_pan - 1)] = True
            hit[np.clip(np.searchsorted(edges, k, side="left") - 1, 0, n_pan - 1)] = True
        keep = ~hit
        w = np.bincount(idx[:, keep].ravel(), weights=w3[:, keep].ravel(), minlength=t_base.size)
        w[0] += np.expm1(self.t_min)  # constant extension below t_min
        if not k.size:
            return t_base, w

        p = np.flatnonzero(hit)
        pts = np.concatenate([edges[p], edges[p + 1], k])
        flag = np.concatenate([np.zeros(2 * p.size, bool), np.ones(k.size, bool)])
        pts, inv = np.unique(pts, return_inverse=True)
        is_kink = np.zeros(pts.size, bool)
        np.logical_or.at(is_kink, inv, flag)  # a kink on a mesh point stays a kink
        a, b = pts[:-1], pts[1:]
        inside = hit[np.clip(np.searchsorted(edges, 0.5 * (a + b), side="right") - 1, 0, n_pan - 1)]
        t3, s3 = self._panels(a[inside], b[inside], is_kink[:-1][inside], is_kink[1:][inside])
        return np.concatenate([t_base, t3.ravel()]), np.concatenate([w, s3.ravel()])
