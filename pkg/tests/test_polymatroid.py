import numpy as np
import pytest
from hypothesis import given, strategies as st

from ocdra import polymatroid as pm
from ocdra.errors import GroundSetTooLarge, OutOfRange
from ocdra.valuation import Polymatroid

from fixtures import lp_value, random_rank

cap1 = pm.CardinalityCap(1)
unit_box = pm.ExplicitTable(2, (0, 1, 1, 2))  # r(S) = |S|


def test_rank_examples():
    assert pm.rank(cap1, {0, 1}) == 1
    assert pm.rank(cap1, set()) == 0
    t = pm.ExplicitTable(3, (0, 1, 1, 2, 1, 1.5, 2, 2.5))
    assert pm.rank(t, {0, 2}) == 1.5


def test_rank_out_of_range():
    t = pm.ExplicitTable(2, (0, 1, 1, 1))
    with pytest.raises(OutOfRange):
        pm.rank(t, {2})
    with pytest.raises(OutOfRange):
        pm.rank(t, {-1})


def test_ground_set_limit():
    with pytest.raises(GroundSetTooLarge):
        pm.pm_value(cap1, np.ones(21))
    with pytest.raises(GroundSetTooLarge):
        Polymatroid(cap1, {i: 1.0 for i in range(21)})


def test_value_examples():
    assert pm.pm_value(cap1, [0.3, 0.4]) == pytest.approx(0.7, abs=1e-15)
    assert pm.pm_value(cap1, [0.6, 0.7]) == 1.0
    assert pm.pm_value(cap1, [0.0, 0.0]) == 0.0


def test_tight_set_examples():
    assert pm.tight_set(cap1, [0.3, 0.4]) == frozenset()
    assert pm.tight_set(cap1, [0.6, 0.7]) == frozenset({0, 1})
    assert pm.tight_set(cap1, [1.0, 0.0]) == frozenset({0, 1})


def test_grad_examples():
    np.testing.assert_array_equal(pm.pm_grad(cap1, [0.3, 0.4]), [1, 1])
    np.testing.assert_array_equal(pm.pm_grad(cap1, [0.6, 0.7]), [0, 0])
    np.testing.assert_array_equal(pm.pm_grad(unit_box, [0.5, 1.2]), [1, 0])


def test_lovasz_examples():
    assert pm.lovasz(cap1, [1, 1]) == 1
    assert pm.lovasz(cap1, [0, 0]) == 0
    assert pm.lovasz(unit_box, [0.5, 0.2]) == pytest.approx(0.7)


def test_lovasz_of_indicator_is_rank(rng):
    for _ in range(20):
        m = int(rng.integers(1, 6))
        r = random_rank(rng, m)
        S = rng.uniform(size=m) < 0.5
        assert pm.lovasz(r, S.astype(float)) == pytest.approx(r.rank(np.flatnonzero(S)), abs=1e-12)


@pytest.mark.parametrize("m", [1, 4, 8, 12])
def test_shipped_oracles_are_submodular(m, rng):
    oracles = [pm.CardinalityCap(2.5),
               pm.PartitionRank(((0, 1), tuple(range(2, m))), (1.0, 2.0)),
               pm.WeightedCoverage((1.0, 2.0, 0.5), tuple((i % 3, (i + 1) % 3) for i in range(m)))]
    oracles += [random_rank(rng, m) for _ in range(4)]
    for r in oracles:
        pm.check_rank(r, m)


def test_check_rank_catches_supermodular():
    bad = pm.ExplicitTable(2, (0, 1, 1, 3))
    with pytest.raises(ValueError, match="submodular"):
        pm.check_rank(bad, 2)
    with pytest.raises(ValueError, match="monotone"):
        pm.check_rank(pm.ExplicitTable(2, (0, 1, 1, 0.5)), 2)


def test_value_matches_lp(rng):
    for _ in range(30):
        m = int(rng.integers(1, 7))
        r = random_rank(rng, m)
        x = rng.uniform(0, 1.5, m) * (rng.uniform(size=m) < 0.8)
        assert pm.pm_value(r, x) == pytest.approx(lp_value(r, x), abs=1e-9)


def test_integrated_gradient_identity(rng):
    """f(x) = int_0^1 x(complement of tight set at s x) ds, summed exactly over the
    slope changes along the ray; links value, gradient and breakpoints."""
    for _ in range(40):
        m = int(rng.integers(1, 5))
        r = random_rank(rng, m)
        x = rng.uniform(0, 1.5, m)
        s = np.concatenate([[0.0], pm.ray_breakpoints(r, x, 0.0, 1.0), [1.0]])
        mids = 0.5 * (s[:-1] + s[1:])
        slopes = np.array([pm.pm_grad(r, c * x) @ x for c in mids])
        assert float(slopes @ np.diff(s)) == pytest.approx(pm.pm_value(r, x), abs=1e-9)


def test_grad_matches_one_sided_fd(rng):
    for _ in range(10):
        m = int(rng.integers(1, 7))
        r = random_rank(rng, m)
        X = rng.uniform(0, 1.5, size=(200, m))
        G = pm.pm_grad_batch(r, X)
        h = 1e-7
        base = pm.pm_value_batch(r, X)
        for i in range(m):
            Xh = X.copy()
            Xh[:, i] += h
            fd = (pm.pm_value_batch(r, Xh) - base) / h
            np.testing.assert_allclose(fd, G[:, i], atol=1e-6)


@given(x=st.lists(st.floats(0, 2), min_size=4, max_size=4),
       dx=st.lists(st.floats(0, 1), min_size=4, max_size=4),
       seed=st.integers(0, 1000))
def test_grad_antitone(x, dx, seed):
    r = random_rank(np.random.default_rng(seed), 4)
    x = np.array(x)
    y = x + np.array(dx)
    assert np.all(pm.pm_grad(r, y) <= pm.pm_grad(r, x))
    assert pm.pm_value(r, y) >= pm.pm_value(r, x) - 1e-12


@given(x=st.lists(st.floats(0, 2), min_size=3, max_size=3), seed=st.integers(0, 1000))
def test_tight_set_is_maximal_minimizer(x, seed):
    r = random_rank(np.random.default_rng(seed), 3)
    x = np.array(x)
    masks = np.arange(8)
    vals = np.array([r.rank(int(S)) + sum(x[i] for i in range(3) if not S >> i & 1) for S in masks])
    union = 0
    for S in masks[vals <= vals.min() + 1e-12 * (1 + vals.min())]:
        union |= int(S)
    T = pm.tight_set(r, x)
    assert T == frozenset(i for i in range(3) if union >> i & 1)


def test_rank_json_round_trip(rng):
    for _ in range(10):
        r = random_rank(rng, 4)
        assert pm.rank_from_json(r.to_json()) == r


def test_polymatroid_node_scales_and_orders_ground():
    # ground element i is bound to the i-th smallest coordinate id
    f = Polymatroid(pm.ExplicitTable(2, (0, 1, 0.5, 1.2)), {7: 2.0, 3: 1.0})
    x = np.zeros(8)
    x[3], x[7] = 0.4, 0.1
    assert f.value(x) == pytest.approx(pm.pm_value(pm.ExplicitTable(2, (0, 1, 0.5, 1.2)), [0.4, 0.2]))


def _separable_ranks(rng, m):
    ids = [int(i) for i in rng.permutation(m)]
    blocks = []
    while ids:
        k = int(rng.integers(1, 4))
        blocks.append(tuple(ids[:k]))
        ids = ids[k:]
    if len(blocks) > 1:
        blocks = blocks[:-1]  # leave some loops
    part = pm.PartitionRank(tuple(blocks), tuple(float(c) for c in rng.choice([0.5, 1, 2], len(blocks))), 1.3)
    items = int(rng.integers(2, 12))
    cov = pm.WeightedCoverage(tuple(rng.uniform(0, 2, items)),
                              tuple(tuple(int(u) for u in rng.choice(items, int(rng.integers(0, 3)), replace=False))
                                    for _ in range(m)))
    return part, cov


def test_split_min_form_matches_full_enumeration(rng):
    """Partition and coverage ranks split into independent parts; the per-part
    min-form must agree with enumerating all of [m]."""
    for _ in range(40):
        m = int(rng.integers(1, 10))
        for r in _separable_ranks(rng, m):
            X = rng.uniform(0, 1.5, (30, m)) * (rng.uniform(size=(30, m)) < 0.8)
            best, tight = pm._minform(r, X, True)
            best0, tight0 = pm._minform_enum(r, X, True)
            np.testing.assert_allclose(best, best0, rtol=0, atol=1e-12)
            np.testing.assert_array_equal(tight, tight0)


def test_ray_envelope_matches_pointwise(rng):
    """Value and tight set read off the envelope agree with direct evaluation,
    including exactly at and just around every breakpoint."""
    for _ in range(40):
        m = int(rng.integers(1, 8))
        for r in (random_rank(rng, m),) + _separable_ranks(rng, m):
            y = rng.uniform(0, 1.5, m) * (rng.uniform(size=m) < 0.8)
            f = Polymatroid(r, {i: 1.0 for i in range(m)})
            kinks = f.ray_kinks(y, 1e-3, 1e6)
            s = np.concatenate([np.geomspace(1e-3, 1e6, 80), kinks, kinks * (1 + 1e-9), kinks * (1 - 1e-9)])
            X = s[:, None] * y[None, :]
            np.testing.assert_allclose(f.value_ray(y, s), pm.pm_value_batch(r, X), rtol=1e-13, atol=1e-13)
            np.testing.assert_array_equal(f.grad_ray(y, s, np.arange(m)), pm.pm_grad_batch(r, X))
