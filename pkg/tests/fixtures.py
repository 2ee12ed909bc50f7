"""Shared test fixtures and independent oracles."""

import numpy as np
from scipy.optimize import linprog

from ocdra import polymatroid as pm


def random_rank(rng, m):
    """A random monotone submodular rank on [m], cycling through the oracle kinds."""
    kind = int(rng.integers(4))
    if kind == 0:
        return pm.CardinalityCap(float(rng.uniform(0.5, m)))
    if kind == 1:
        n_items = int(rng.integers(2, 7))
        covers = [tuple(np.flatnonzero(rng.uniform(size=n_items) < 0.4)) for _ in range(m)]
        return pm.WeightedCoverage(tuple(rng.uniform(0.2, 1.5, n_items)), tuple(covers))
    if kind == 2:
        cut = int(rng.integers(1, m)) if m > 1 else 1
        blocks = [tuple(range(cut)), tuple(range(cut, m))] if m > 1 else [(0,)]
        return pm.PartitionRank(tuple(blocks), tuple(rng.uniform(0.3, 2.0, len(blocks))),
                                float(rng.uniform(0.5, 2)))
    # explicit table: concave of modular plus a coverage term, both submodular
    w = rng.uniform(0.1, 1.0, m)
    cap = rng.uniform(0.5, 2.0)
    masks = np.arange(1 << m)
    member = (masks[:, None] >> np.arange(m)) & 1
    cov = pm.WeightedCoverage((1.0, 0.5), tuple(tuple(int(u) for u in np.flatnonzero(rng.uniform(size=2) < 0.5))
                                                 for _ in range(m)))
    table = np.minimum(member @ w, cap) + cov.table(m)
    return pm.ExplicitTable(m, tuple(table))


def lp_value(r, x):
    """max sum(z) s.t. 0 <= z <= x, z(S) <= r(S) for every S; solved by HiGHS."""
    m = len(x)
    masks = np.arange(1, 1 << m)
    A = ((masks[:, None] >> np.arange(m)) & 1).astype(float)
    b = np.array([r.rank(int(s)) for s in masks])
    res = linprog(-np.ones(m), A_ub=A, b_ub=b, bounds=list(zip([0.0] * m, x)), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    assert res.status == 0
    return -res.fun
