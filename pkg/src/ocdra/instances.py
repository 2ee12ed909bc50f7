"""Problem instances: arrivals with disjoint option sets plus a valuation.

Generators are deterministic in ``(family, params, seed)``.  Files are UTF-8
JSON carrying the valuation inline::

    {"coords": [...], "arrivals": [{"j": 0, "options": [...]}, ...],
     "valuation": {...}, "meta": {"family": ..., "params": {...}, "seed": ...}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import polymatroid as pm
from .checks import check_cdr
from .errors import BadParams, ExprError, ParseError, PropertyViolation, ValidationError
from .valuation import (
    BudgetAdditive, Cap, Compose, ConcaveScalar, ExpSat, LinTransform, Linear, Log1p,
    PiecewiseLinear, Polymatroid, Sum, ValuationExpr, construct,
)

__all__ = ["Arrival", "Instance", "generate", "save", "load", "dumps", "loads", "FAMILIES",
           "sample_valuation"]


@dataclass(frozen=True)
class Arrival:
    j: int
    options: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Instance:
    coords: tuple[int, ...]
    arrivals: tuple[Arrival, ...]
    valuation: ValuationExpr
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.arrivals)

    @property
    def dim(self) -> int:
        return max([self.valuation.dim] + [c + 1 for c in self.coords])

    def validate(self) -> None:
        """Structural checks: declared, nonempty and pairwise disjoint option sets."""
        declared = set(self.coords)
        if len(declared) != len(self.coords):
            raise ValidationError("duplicate coordinate ids in coords")
        seen: dict[int, int] = {}
        for i, arr in enumerate(self.arrivals):
            if not arr.options:
                raise ValidationError("empty option set", arrival=i)
            for a in arr.options:
                if a not in declared:
                    raise ValidationError(f"option {a} is not a declared coordinate", arrival=i)
                if a in seen:
                    raise ValidationError(f"option {a} already offered by arrival {seen[a]}", arrival=i)
                seen[a] = i
        extra = self.valuation.coords() - declared
        if extra:
            raise ValidationError(f"valuation uses undeclared coordinates {sorted(extra)[:10]}")

    def to_json(self) -> dict:
        return {"coords": list(self.coords),
                "arrivals": [{"j": a.j, "options": list(a.options)} for a in self.arrivals],
                "valuation": self.valuation.to_json(),
                "meta": self.meta}

    def __eq__(self, other):
        return isinstance(other, Instance) and self.to_json() == other.to_json()


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------

def _need(params, key, default=None, lo=1):
    v = params.get(key, default)
    if v is None:
        raise BadParams(f"missing parameter {key!r}")
    if isinstance(v, float) and v.is_integer():
        v = int(v)
    if not isinstance(v, (int, np.integer)) or v < lo:
        raise BadParams(f"{key} must be an integer >= {lo}, got {v!r}")
    return int(v)


def _arrivals(groups: Sequence[Sequence[int]]) -> tuple[Arrival, ...]:
    return tuple(Arrival(j, tuple(int(a) for a in g)) for j, g in enumerate(groups))


def _instance(groups, f, family, params, seed):
    coords = tuple(sorted(a for g in groups for a in g))
    return Instance(coords, _arrivals(groups), f, {"family": family, "params": dict(params), "seed": seed})


def triangular(n: int):
    """Arrival j offers one unit-weight option to every agent i >= j; unit budgets.

    OPT = n (send item j to agent j).
    """
    groups, weights = [], [dict() for _ in range(n)]
    c = 0
    for j in range(n):
        g = []
        for i in range(j, n):
            weights[i][c] = 1.0
            g.append(c)
            c += 1
        groups.append(g)
    f = Sum([(1.0, BudgetAdditive(w, 1.0)) for w in weights])
    return groups, f


def two_agent_tie():
    """Item 0 can go to agent A (coord 0) or B (coord 1); item 1 only to A (coord 2).

    Both agents have budget 1, so OPT = 2 (item 0 to B, item 1 to A).
    """
    f = Sum([(1.0, BudgetAdditive({0: 1.0, 2: 1.0}, 1.0)), (1.0, BudgetAdditive({1: 1.0}, 1.0))])
    return [[0, 1], [2]], f


def _random_scalar(kind: str, rng: np.random.Generator, scale: float):
    if kind == "mixed":
        kind = ["log1p", "exp_sat", "cap", "pwl"][rng.integers(4)]
    if kind == "log1p":
        return Log1p(rng.uniform(0.5, 3.0) / scale)
    if kind == "exp_sat":
        return ExpSat(rng.uniform(0.5, 3.0) / scale)
    if kind == "cap":
        return Cap(scale * rng.uniform(0.3, 1.0))
    if kind == "pwl":
        k = int(rng.integers(1, 4))
        breaks = np.cumsum(rng.uniform(0.2, 1.0, size=k)) * scale / k
        slopes = np.sort(rng.uniform(0.0, 1.0, size=k + 1))[::-1]
        slopes[0] = 1.0
        return PiecewiseLinear(breaks, slopes)
    raise BadParams(f"unknown concave kind {kind!r}")


def concave_returns(n: int, m: int, kind: str, rng):
    """sum_i M_i(sum_j b_ij x_ij): every arrival offers each of the m agents."""
    groups, weights = [], [dict() for _ in range(m)]
    c = 0
    for _ in range(n):
        g = []
        for i in range(m):
            weights[i][c] = float(rng.uniform(0.1, 1.0))
            g.append(c)
            c += 1
        groups.append(g)
    load = 0.55 * n / m  # typical load per agent
    f = Sum([(1.0, ConcaveScalar(_random_scalar(kind, rng, max(load, 0.5)), Linear(w))) for w in weights])
    return groups, f


def _level_split(ratios: dict[int, float]):
    """Distinct levels l_1 > ... > l_K and coefficient l_k - l_{k+1} per level."""
    levels = sorted(set(ratios.values()), reverse=True)
    nxt = levels[1:] + [0.0]
    return [(lv, lv - lo) for lv, lo in zip(levels, nxt) if lv > 0]


def whole_page(n: int, m: int, k: int, levels: int, rng):
    """Each arrival offers k configurations; configuration a uses budget b_ia of
    a few agents and earns w_ia.  Agent i solves a fractional knapsack, which
    splits exactly into budget-additive terms over reward/cost levels."""
    groups, cfg = [], []
    c = 0
    for _ in range(n):
        g = []
        for _ in range(k):
            agents = rng.choice(m, size=int(rng.integers(1, min(3, m) + 1)), replace=False)
            cfg.append({int(i): float(rng.uniform(0.2, 1.0)) for i in agents})
            g.append(c)
            c += 1
        groups.append(g)
    grid = np.linspace(1.0, 0.25, levels) if levels > 1 else np.array([1.0])
    budgets = rng.uniform(0.5, 1.0, size=m) * max(1.0, 0.5 * n * k / m)
    rows, terms, ratios = [], [], []
    for i in range(m):
        ratio = {a: float(grid[rng.integers(levels)]) for a, use in enumerate(cfg) if i in use}
        ratios.append({str(a): r for a, r in ratio.items()})
        for lv, coeff in _level_split(ratio):
            rows.append({a: cfg[a][i] for a, r in ratio.items() if r >= lv})
            terms.append((coeff, BudgetAdditive({len(rows) - 1: 1.0}, float(budgets[i]))))
    f = LinTransform(rows, Sum(terms))
    # the knapsack data the valuation was built from: cost of option a to agent i,
    # reward per unit cost, and budgets
    data = {"cost": [{str(i): v for i, v in c.items()} for c in cfg], "ratio": ratios,
            "budget": [float(v) for v in budgets]}
    return groups, f, data


def _random_rank(kind: str, m: int, owner: np.ndarray, n_agents: int, rng):
    if kind == "partition":
        blocks = [tuple(int(a) for a in np.flatnonzero(owner == i)) for i in range(n_agents)]
        caps = [float(rng.integers(1, 3)) for _ in range(n_agents)]
        return pm.PartitionRank(tuple(blocks), tuple(caps), float(rng.uniform(0.5, 1.5)))
    if kind == "coverage":
        n_items = max(2, m)
        covers = tuple(tuple(int(u) for u in rng.choice(n_items, size=min(int(rng.integers(1, 4)), n_items), replace=False))
                       for _ in range(m))
        return pm.WeightedCoverage(tuple(float(w) for w in rng.uniform(0.2, 1.0, size=n_items)), covers)
    if kind == "cardinality":
        return pm.CardinalityCap(float(rng.integers(1, max(2, m // 2) + 1)))
    raise BadParams(f"unknown rank kind {kind!r}")


def polymatroid_assignment(n: int, k: int, agents: int, rank: str, uniform: bool, rng):
    """max sum w_a z_a s.t. sum_{a in S} b_a z_a <= r(S), z <= x.

    Written exactly as a sum over the distinct bang-per-buck levels w_a / b_a of
    (l_k - l_{k+1}) * pm_value(r, b x restricted to {a : w_a / b_a >= l_k}).
    """
    m = n * k
    if m > pm.MAX_GROUND:
        raise BadParams(f"polymatroid families need n*k <= {pm.MAX_GROUND} options, got {m}")
    groups = [list(range(j * k, (j + 1) * k)) for j in range(n)]
    owner = rng.integers(agents, size=m)
    r = _random_rank(rank, m, owner, agents, rng)
    b = rng.uniform(0.3, 1.0, size=m)
    w = b.copy() if uniform else b * rng.choice([0.5, 1.0, 1.5], size=m)
    ratio = {a: float(w[a] / b[a]) for a in range(m)}
    terms = []
    for lv, coeff in _level_split(ratio):
        scale = {a: (float(b[a]) if ratio[a] >= lv else 0.0) for a in range(m)}
        terms.append((coeff, Polymatroid(r, scale)))
    if len(terms) == 1 and terms[0][0] == 1.0:
        f = terms[0][1]
    else:
        f = Sum(terms)
    return groups, f, {"b": [float(v) for v in b], "w": [float(v) for v in w]}


def random_mixture(n: int, m: int, k: int, rng):
    """Agents with assorted valuations, plus a composed term mixing them."""
    groups, per_agent = [], [dict() for _ in range(m)]
    c = 0
    for _ in range(n):
        g = []
        for i in rng.choice(m, size=min(k, m), replace=False):
            per_agent[int(i)][c] = float(rng.uniform(0.2, 1.0))
            g.append(c)
            c += 1
        groups.append(sorted(g))
    load = max(0.5, 0.6 * n * min(k, m) / m)
    terms = []
    for i, wts in enumerate(per_agent):
        pick = i % 3
        if pick == 0:
            terms.append((1.0, BudgetAdditive(wts, float(load * rng.uniform(0.4, 1.0)))))
        elif pick == 1:
            terms.append((1.0, ConcaveScalar(_random_scalar("mixed", rng, load), Linear(wts))))
        else:
            terms.append((float(rng.uniform(0.5, 1.5)), ConcaveScalar(Log1p(1.0 / load), Linear(wts))))
    # a composed bonus: saturating reward on two pooled budget-additive loads
    half = m // 2 or 1
    pool_a = {a: v for i in range(half) for a, v in per_agent[i].items()}
    pool_b = {a: v for i in range(half, m) for a, v in per_agent[i].items()}
    inners = [BudgetAdditive(pool_a, 2 * load), BudgetAdditive(pool_b, 2 * load)]
    outer = ConcaveScalar(ExpSat(1.0 / load), Linear({0: 1.0, 1: 0.5}))
    terms.append((0.5, Compose(outer, inners)))
    return groups, Sum(terms)


FAMILIES = ("triangular", "concave_returns", "whole_page", "polymatroid_assignment",
            "two_agent_tie", "random_mixture")


def generate(family: str, params: dict | None = None, seed: int = 0) -> Instance:
    """Build a seeded instance of ``family``.

    Parameters (defaults in brackets)
    ---------------------------------
    triangular : n
    concave_returns : n, m [3], kind [mixed]
    whole_page : n, m [3], k [3], levels [1]
    polymatroid_assignment : n, k [2], agents [2], rank [partition], uniform [false]
    two_agent_tie : none
    random_mixture : n, m [4], k [2]
    """
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    extra = {}
    try:
        if family == "triangular":
            groups, f = triangular(_need(params, "n"))
        elif family == "two_agent_tie":
            groups, f = two_agent_tie()
        elif family == "concave_returns":
            groups, f = concave_returns(_need(params, "n"), _need(params, "m", 3),
                                        params.setdefault("kind", "mixed"), rng)
        elif family == "whole_page":
            groups, f, extra = whole_page(_need(params, "n"), _need(params, "m", 3), _need(params, "k", 3),
                                   _need(params, "levels", 1), rng)
        elif family == "polymatroid_assignment":
            if "m" in params:  # total ground-set size given directly
                m = _need(params, "m")
                if m > pm.MAX_GROUND:
                    raise BadParams(f"polymatroid families need m <= {pm.MAX_GROUND}, got {m}")
                params.setdefault("k", 1)
                params.setdefault("n", m // _need(params, "k"))
            groups, f, extra = polymatroid_assignment(
                _need(params, "n"), _need(params, "k", 2), _need(params, "agents", 2),
                params.setdefault("rank", "partition"), bool(params.setdefault("uniform", False)), rng)
        elif family == "random_mixture":
            groups, f = random_mixture(_need(params, "n"), _need(params, "m", 4), _need(params, "k", 2), rng)
        else:
            raise BadParams(f"unknown family {family!r}; choose from {', '.join(FAMILIES)}")
    except (ExprError, ValueError) as exc:
        if isinstance(exc, BadParams):
            raise
        raise BadParams(str(exc)) from exc
    inst = _instance(groups, f, family, params, seed)
    if extra:
        inst.meta["data"] = extra
    inst.validate()
    return inst


def sample_valuation(kind: str, dim: int, rng: np.random.Generator) -> ValuationExpr:
    """Random valuation of one family over coordinates 0..dim-1 (test helper)."""
    coords = np.arange(dim)
    w = lambda: {int(a): float(rng.uniform(0.1, 1.5)) for a in coords if rng.uniform() < 0.8} or {0: 1.0}
    if kind == "linear":
        return Linear(w())
    if kind == "budget_additive":
        return Sum([(float(rng.uniform(0.5, 1.5)), BudgetAdditive(w(), float(rng.uniform(0.2, 1.5))))
                    for _ in range(int(rng.integers(1, 4)))])
    if kind == "concave_of_linear":
        return Sum([(1.0, ConcaveScalar(_random_scalar("mixed", rng, 1.0), Linear(w())))
                    for _ in range(int(rng.integers(1, 4)))])
    if kind == "whole_page":
        m = int(rng.integers(1, 4))
        _, f, _ = whole_page(1, m, dim, int(rng.integers(1, 4)), rng)
        return f
    if kind == "polymatroid":
        m = min(dim, 6)
        _, f, _ = polymatroid_assignment(1, m, 2, ["partition", "coverage", "cardinality"][rng.integers(3)],
                                         bool(rng.integers(2)), rng)
        return f
    if kind == "compose":
        inners = [BudgetAdditive(w(), float(rng.uniform(0.3, 1.5))), ConcaveScalar(Log1p(2.0), Linear(w()))]
        return Compose(Sum([(1.0, BudgetAdditive({0: 1.0, 1: 1.0}, 1.0)),
                            (0.5, ConcaveScalar(ExpSat(1.0), Linear({1: 1.0})))]), inners)
    raise ValueError(f"unknown valuation kind {kind!r}")


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def dumps(inst: Instance) -> str:
    return json.dumps(inst.to_json(), indent=1, ensure_ascii=False) + "\n"


def save(inst: Instance, path) -> None:
    Path(path).write_text(dumps(inst), encoding="utf-8")


def _int_list(v, what, arrival=None):
    if not isinstance(v, list) or not all(isinstance(a, int) and not isinstance(a, bool) for a in v):
        raise ParseError(f"{'arrival ' + str(arrival) + ': ' if arrival is not None else ''}"
                         f"{what} must be a list of integer ids")
    return tuple(v)


def loads(text: str, smoke_samples: int = 100) -> Instance:
    """Parse and validate an instance; see module docstring for the format."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(d, dict) or not {"coords", "arrivals", "valuation"} <= d.keys():
        raise ParseError("instance needs keys coords, arrivals, valuation")
    coords = _int_list(d["coords"], "coords")
    if not isinstance(d["arrivals"], list):
        raise ParseError("arrivals must be a list")
    arrivals = []
    for i, a in enumerate(d["arrivals"]):
        if not isinstance(a, dict) or "options" not in a:
            raise ParseError(f"arrival {i}: missing options")
        arrivals.append(Arrival(int(a.get("j", i)), _int_list(a["options"], "options", i)))
    try:
        f = construct(d["valuation"], coords)
    except (ExprError, ValueError) as exc:
        raise ValidationError(f"valuation rejected: {exc}") from None
    inst = Instance(coords, tuple(arrivals), f, d.get("meta", {}) or {})
    inst.validate()
    if smoke_samples:
        try:
            check_cdr(f, n_samples=smoke_samples, fd_samples=min(smoke_samples, 20), fd_coords=4)
        except PropertyViolation as exc:
            raise ValidationError(f"valuation failed the CDR smoke test: {exc}") from None
    return inst


def load(path, smoke_samples: int = 100) -> Instance:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    return loads(text, smoke_samples)
