"""Discretized continuous greedy with online dual bookkeeping.

Within arrival j the algorithm takes ``1/delta`` steps; each step moves
``delta`` of mass to the option with the largest partial derivative of the
guiding function (U for ``balanced``, f itself for ``plain_greedy``) and adds
``g * delta`` to beta_j.  At the end alpha is the guiding gradient at the final
allocation, giving a dual solution (alpha, beta) whose value
``fhat_upper + sum(beta)`` upper-bounds OPT by weak duality.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InfeasibleDual, InvalidStepSize, MalformedInstance, RatioShortfall, ValidationError
from .instances import Instance
from .quadrature import QuadratureScheme
from .transform import GAMMA, UTransform, fhat_at_fgrad

POLICIES = ("balanced", "plain_greedy")
#: slack constant C in the discretization tolerance C * delta * n * G_max
DISC_C = 2.0


@dataclass
class AllocationState:
    x: np.ndarray
    revealed: frozenset
    used: np.ndarray  # sum of x over A_j, per arrival
    alpha_trace: list = field(default_factory=list)  # optional per-arrival snapshots


@dataclass
class DualCertificate:
    alpha: np.ndarray
    beta: np.ndarray
    options: list
    fhat_upper: float
    dual_value: float
    primal_value: float
    delta: float
    n: int
    gmax: float
    policy: str


@dataclass
class Verdict:
    feasible_slack: float  # min_j beta_j - max_{a in A_j} alpha_a
    ratio_slack: float  # primal - gamma * dual + tol_disc
    tol_disc: float
    ok: bool


@dataclass
class RunReport:
    primal: float
    dual: float
    certified_ratio: float | None
    opt_lower_bound: float | None
    policy: str
    delta: float
    quad_nodes: int
    n_arrivals: int
    wall_ms: float
    per_arrival_beta: list

    @property
    def empirical_ratio(self) -> float | None:
        if self.opt_lower_bound is None:
            return None
        return self.primal / self.opt_lower_bound if self.opt_lower_bound > 0 else 1.0

    def to_json(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_ms")
        return d

    def __eq__(self, other):  # wall-clock time is not part of the result
        return isinstance(other, RunReport) and self.to_json(False) == other.to_json(False)


def _steps(delta: float) -> int:
    if not 0 < delta <= 0.1:
        raise InvalidStepSize(f"delta must lie in (0, 0.1], got {delta}")
    k = round(1.0 / delta)
    if abs(k * delta - 1.0) > 1e-9:
        raise InvalidStepSize(f"1/delta must be an integer, got 1/{delta} = {1 / delta}")
    return k


def _guide(f, policy, scheme):
    if policy == "balanced":
        T = UTransform(f, scheme)
        return lambda x, cols: T._grad(x, cols)
    return lambda x, cols: f.grad_batch(x[None, :], cols)[0]


def run_online(instance: Instance, policy: str = "balanced", delta: float = 1e-3,
               scheme: QuadratureScheme | None = None, compute_opt: bool = False,
               opt_kwargs: dict | None = None, trace: bool = False):
    """Run the online algorithm on ``instance``.

    Returns
    -------
    state : AllocationState
    cert : DualCertificate
    report : RunReport
    """
    t0 = time.perf_counter()
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    steps = _steps(delta)
    scheme = scheme or QuadratureScheme()
    try:
        instance.validate()
    except ValidationError as exc:
        raise MalformedInstance(str(exc)) from None

    f = instance.valuation
    x = np.zeros(instance.dim)
    n = instance.n
    beta = np.zeros(n)
    used = np.zeros(n)
    revealed: list[int] = []
    options = []
    alpha_trace = []

    for j, arr in enumerate(instance.arrivals):
        revealed.extend(arr.options)
        # the algorithm only ever sees f restricted to what has been revealed
        f_seen = f.restrict(revealed)
        grad = _guide(f_seen, policy, scheme)
        cols = np.array(sorted(arr.options), dtype=np.int64)
        options.append(cols)
        b = 0.0
        for _ in range(steps):
            g = grad(x, cols)
            k = int(np.argmax(g))  # first maximum = lowest CoordId
            if g[k] <= 0:
                break  # gradients only fall as x grows; leave the rest unallocated
            x[cols[k]] += delta
            b += g[k] * delta
        beta[j] = b
        used[j] = x[cols].sum()
        if trace:
            seen = np.array(sorted(revealed), dtype=np.int64)
            alpha_trace.append((seen, grad(x, seen)))

    every = np.arange(instance.dim)
    f_all = f.restrict(revealed)
    primal = f.value(x)
    if policy == "balanced":
        T = UTransform(f_all, scheme)
        alpha = T._grad(x, every) if n else np.zeros(instance.dim)
        fhat = T._fhat_upper(x) if n else 0.0
    else:
        alpha = f_all.grad(x, every)
        fhat = fhat_at_fgrad(f_all, x)
    fhat = max(fhat, 0.0)
    dual = fhat + float(np.sum(beta))
    cert = DualCertificate(alpha, beta, options, fhat, dual, primal, delta, n, f.gmax, policy)

    opt = None
    if compute_opt:
        from .offline import frank_wolfe
        # the online allocation is feasible too, so it also bounds OPT from below
        opt = max(frank_wolfe(instance, **(opt_kwargs or {})).lower_bound, primal)
    ratio = primal / dual if dual > 0 else None
    report = RunReport(primal, dual, ratio, opt, policy, delta, scheme.n_nodes, n,
                       1e3 * (time.perf_counter() - t0), [float(v) for v in beta])
    state = AllocationState(x, frozenset(revealed), used, alpha_trace)
    return state, cert, report


def verify_certificate(cert: DualCertificate, gamma: float = GAMMA, C: float = DISC_C,
                       tol: float = 1e-9, strict: bool = True) -> Verdict:
    """Check dual feasibility and primal >= gamma * dual - C * delta * n * G_max.

    With ``strict`` the first failing check raises (InfeasibleDual, then
    RatioShortfall); otherwise the verdict reports it in ``ok``.
    """
    feas = min((cert.beta[j] - float(cert.alpha[o].max()) for j, o in enumerate(cert.options) if o.size),
               default=0.0)
    tol_disc = C * cert.delta * cert.n * cert.gmax
    ratio_slack = cert.primal_value - gamma * cert.dual_value + tol_disc
    ok = feas >= -tol and ratio_slack >= -tol
    if strict:
        if feas < -tol:
            raise InfeasibleDual(f"beta_j falls short of max alpha on A_j by {-feas:.3g}")
        if ratio_slack < -tol:
            raise RatioShortfall(f"primal {cert.primal_value:.6g} < {gamma:.4f} * dual {cert.dual_value:.6g} "
                                 f"- {tol_disc:.3g}")
    return Verdict(float(feas), float(ratio_slack), float(tol_disc), bool(ok))


def dual_upper_bound(cert: DualCertificate, tol: float = 1e-9) -> float:
    """Weak-duality upper bound on OPT carried by a feasible certificate."""
    verify_certificate(cert, gamma=0.0, tol=tol)
    return cert.dual_value
