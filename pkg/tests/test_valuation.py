import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ocdra import polymatroid as pm
from ocdra.checks import check_cdr
from ocdra.errors import (ArityMismatch, ExprError, NegativeInput, NegativeWeight, PropertyViolation,
                          UnboundedGradient, UnknownCoord)
from ocdra.instances import sample_valuation
from ocdra.valuation import (BudgetAdditive, Cap, Compose, ConcaveScalar, ExpSat, LinTransform, Linear,
                             Log1p, PiecewiseLinear, Polymatroid, RawValuation, Sum, construct, evaluate,
                             from_json, gradient, restrict)


def every_kind():
    """One instance of each node kind, plus closure operations over mixed children."""
    ba = BudgetAdditive({0: 1.0, 1: 0.5, 2: 2.0}, 1.0)
    pmx = Polymatroid(pm.CardinalityCap(1.5), {1: 1.0, 2: 0.7, 3: 1.2})
    return {
        "linear": Linear({0: 2.0, 1: 3.0, 3: 0.5}),
        "budget_additive": ba,
        "cap_of_linear": ConcaveScalar(Cap(0.8), Linear({0: 1.0, 2: 1.0})),
        "log1p_of_linear": ConcaveScalar(Log1p(2.0), Linear({0: 1.0, 1: 0.3})),
        "exp_sat_of_linear": ConcaveScalar(ExpSat(1.5), Linear({2: 1.0, 3: 2.0})),
        "pwl_of_linear": ConcaveScalar(PiecewiseLinear([0.5, 1.2], [2.0, 1.0, 0.2]), Linear({0: 1.0, 3: 1.0})),
        "polymatroid": pmx,
        "sum": Sum([(0.7, ba), (1.3, pmx), (0.5, Linear({3: 1.0}))]),
        "lin_transform": LinTransform([{0: 1.0, 1: 2.0}, {2: 0.5, 3: 1.0}],
                                      Sum([(1.0, BudgetAdditive({0: 1.0}, 1.0)),
                                           (2.0, ConcaveScalar(Log1p(1.0), Linear({1: 1.0})))])),
        "compose": Compose(Sum([(1.0, BudgetAdditive({0: 1.0, 1: 1.0}, 1.2)),
                                (0.5, ConcaveScalar(ExpSat(1.0), Linear({1: 1.0})))]),
                           [ba, ConcaveScalar(Log1p(2.0), Linear({3: 1.0, 0: 0.5}))]),
        "concave_of_sum": ConcaveScalar(PiecewiseLinear([1.0], [1.0, 0.25]), Sum([(1.0, ba), (1.0, pmx)])),
    }


KINDS = every_kind()


# ---- spec examples --------------------------------------------------------

def test_linear_value_and_grad():
    f = construct({"kind": "linear", "weights": {"0": 2, "1": 3}})
    assert evaluate(f, [1, 0.5]) == pytest.approx(3.5, abs=1e-15)
    for x in ([0, 0], [1, 0.5], [10, 3]):
        np.testing.assert_array_equal(gradient(f, x), [2.0, 3.0])


def test_budget_additive_examples():
    f = construct({"kind": "budget_additive", "weights": {"0": 1, "1": 1}, "budget": 1})
    assert evaluate(f, [0.7, 0.6]) == 1.0
    np.testing.assert_array_equal(gradient(f, [0.7, 0.6]), [0.0, 0.0])
    np.testing.assert_array_equal(gradient(f, [0.2, 0.3]), [1.0, 1.0])
    # exactly at the budget the right derivative is 0
    np.testing.assert_array_equal(gradient(f, [0.5, 0.5]), [0.0, 0.0])


def test_log1p_of_linear():
    f = construct({"kind": "concave_scalar", "fn": {"name": "log1p", "params": [1]},
                   "inner": {"kind": "linear", "weights": {"0": 1}}})
    assert evaluate(f, [1.0]) == pytest.approx(math.log(2), abs=1e-15)


def test_compose_chain_rule():
    f = Compose(Linear({0: 1.0, 1: 2.0}), [Linear({0: 1.0}), Linear({1: 3.0})])
    for x in ([0, 0], [0.3, 2.0], [5, 1]):
        np.testing.assert_allclose(gradient(f, x), [1.0, 6.0], rtol=0, atol=1e-15)


def test_restrict_examples():
    f = Linear({0: 2.0, 1: 3.0})
    assert evaluate(restrict(f, {0}), [5, 7]) == 10.0
    assert evaluate(restrict(f, set()), [5, 7]) == 0.0
    ba = BudgetAdditive({0: 1.0, 1: 1.0}, 1.0)
    assert evaluate(restrict(ba, {0}), [2.0, 0.4]) == 1.0


def test_pow_half_rejected():
    with pytest.raises(UnboundedGradient):
        construct({"kind": "concave_scalar", "fn": {"name": "pow", "params": [0.5]},
                   "inner": {"kind": "linear", "weights": {"0": 1}}})


# ---- construction errors --------------------------------------------------

@pytest.mark.parametrize("spec", [
    {"kind": "linear", "weights": {"0": -1}},
    {"kind": "budget_additive", "weights": {"0": 1}, "budget": -0.5},
    {"kind": "sum", "terms": [{"coeff": -1, "expr": {"kind": "linear", "weights": {"0": 1}}}]},
    {"kind": "lin_transform", "rows": [{"0": -2}], "inner": {"kind": "linear", "weights": {"0": 1}}},
    {"kind": "polymatroid", "rank": {"kind": "cardinality_cap", "k": 1}, "scale": {"0": -1}},
])
def test_negative_weights_rejected(spec):
    with pytest.raises(NegativeWeight):
        construct(spec)


def test_arity_mismatch():
    with pytest.raises(ArityMismatch):
        Compose(Linear({0: 1.0, 2: 1.0}), [Linear({0: 1.0}), Linear({1: 1.0})])
    with pytest.raises(ArityMismatch):
        LinTransform([{0: 1.0}], Linear({1: 1.0}))


def test_unknown_coord():
    with pytest.raises(UnknownCoord):
        construct({"kind": "linear", "weights": {"5": 1}}, coords=[0, 1, 2])


def test_bad_scalar_and_kind():
    with pytest.raises(ExprError):
        construct({"kind": "nope"})
    with pytest.raises(ExprError):
        construct({"kind": "concave_scalar", "fn": {"name": "sqrt"}, "inner": {"kind": "linear", "weights": {}}})
    with pytest.raises(ExprError):
        PiecewiseLinear([1.0], [1.0, 2.0])  # increasing slope


def test_negative_input():
    f = Linear({0: 1.0})
    with pytest.raises(NegativeInput):
        evaluate(f, [-0.1])
    with pytest.raises(NegativeInput):
        gradient(f, [-1e-9])


def test_absent_coords_read_as_zero():
    f = Linear({0: 1.0, 3: 2.0})
    assert evaluate(f, [1.0]) == 1.0
    assert evaluate(f, {3: 1.0}) == 2.0


# ---- structure ------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(KINDS))
def test_json_round_trip(name):
    f = KINDS[name]
    text = json.dumps(f.to_json())
    g = construct(json.loads(text))
    assert g == f
    X = np.random.default_rng(1).uniform(0, 1.5, size=(20, f.dim))
    np.testing.assert_array_equal(g.value_batch(X), f.value_batch(X))


@pytest.mark.parametrize("name", sorted(KINDS))
def test_zero_at_origin_exact(name):
    f = KINDS[name]
    assert f.value(np.zeros(f.dim)) == 0.0
    assert math.isfinite(f.gmax)


@pytest.mark.parametrize("name", sorted(KINDS))
def test_gmax_is_grad_at_zero(name):
    f = KINDS[name]
    assert f.gmax == pytest.approx(float(np.max(f.grad(np.zeros(f.dim)), initial=0.0)))


@pytest.mark.parametrize("name", sorted(KINDS))
@given(data=st.data())
def test_restrict_commutes_and_idempotent(name, data):
    f = KINDS[name]
    d = f.dim
    S = data.draw(st.sets(st.integers(0, d - 1)))
    x = np.array(data.draw(st.lists(st.floats(0, 3), min_size=d, max_size=d)))
    xz = x.copy()
    xz[[i for i in range(d) if i not in S]] = 0.0
    fS = restrict(f, S)
    assert evaluate(fS, x) == pytest.approx(evaluate(f, xz), rel=1e-12, abs=1e-12)
    assert restrict(fS, S) == fS


# ---- CDR properties -------------------------------------------------------

point = st.lists(st.floats(0, 3, allow_subnormal=False), min_size=4, max_size=4)
bump = st.lists(st.floats(0, 2, allow_subnormal=False), min_size=4, max_size=4)


@pytest.mark.parametrize("name", sorted(KINDS))
@given(x=point, dx=bump)
def test_monotone_value_antitone_grad(name, x, dx):
    f = KINDS[name]
    x = np.array(x)[:f.dim]
    y = x + np.array(dx)[:f.dim]
    # exact node kinds to 1e-9, composed ones to 1e-6
    tol = 1e-6 if name in ("compose", "lin_transform", "concave_of_sum") else 1e-9
    assert f.value(y) >= f.value(x) - tol
    assert np.all(f.grad(y) <= f.grad(x) + tol)


@pytest.mark.parametrize("name", sorted(KINDS))
@given(x=point, y=point, lam=st.floats(0, 1))
def test_concave_along_segments(name, x, y, lam):
    f = KINDS[name]
    x, y = np.array(x)[:f.dim], np.array(y)[:f.dim]
    z = lam * x + (1 - lam) * y
    assert f.value(z) >= lam * f.value(x) + (1 - lam) * f.value(y) - 1e-9 * (1 + f.value(x) + f.value(y))


@pytest.mark.parametrize("name", sorted(KINDS))
def test_check_cdr_passes(name):
    rep = check_cdr(KINDS[name], n_samples=400, tol=1e-6, seed=3)
    assert rep.max_fd_rel_err < 1e-5
    assert rep.n_fd_checked > 0


@pytest.mark.parametrize("kind", ["linear", "budget_additive", "concave_of_linear", "whole_page",
                                  "polymatroid", "compose"])
def test_check_cdr_random_families(kind):
    rng = np.random.default_rng(7)
    for _ in range(3):
        check_cdr(sample_valuation(kind, 5, rng), n_samples=300, seed=int(rng.integers(1 << 30)))


def test_check_cdr_rejects_square():
    sq = RawValuation(lambda x: float(x[0] ** 2), lambda x: np.array([2 * x[0]]), 1, "square")
    with pytest.raises(PropertyViolation) as exc:
        check_cdr(sq, n_samples=200)
    assert exc.value.kind in ("gradient", "concave")
    assert exc.value.witness is not None


def test_check_cdr_rejects_wrong_gradient():
    lin = RawValuation(lambda x: float(2 * x[0]), lambda x: np.array([1.0]), 1, "lying")
    with pytest.raises(PropertyViolation) as exc:
        check_cdr(lin, n_samples=50)
    assert exc.value.kind == "fd"


def test_check_cdr_rejects_nonzero_origin():
    shifted = RawValuation(lambda x: float(1 + x[0]), lambda x: np.array([1.0]), 1, "shifted")
    with pytest.raises(PropertyViolation) as exc:
        check_cdr(shifted, n_samples=10)
    assert exc.value.kind == "zero"


def test_scalar_derivatives_are_right_derivatives():
    pw = PiecewiseLinear([1.0, 2.0], [3.0, 1.0, 0.0])
    np.testing.assert_array_equal(pw.deriv(np.array([0.0, 1.0, 1.5, 2.0, 5.0])), [3, 1, 1, 0, 0])
    np.testing.assert_allclose(pw.value(np.array([1.0, 2.0, 9.0])), [3.0, 4.0, 4.0])
    assert Cap(2.0).deriv(np.array([2.0]))[0] == 0.0
    assert Log1p(3.0).deriv(np.array([0.0]))[0] == 3.0
    assert ExpSat(2.0).deriv(np.array([0.0]))[0] == 2.0


def test_from_json_malformed():
    with pytest.raises(ExprError):
        from_json({"kind": "linear"})


def test_inner_with_no_columns():
    # a restricted term can end up with no coordinates at all
    g = ConcaveScalar(PiecewiseLinear([0.5], [1.0, 0.2]), Linear({}))
    f = Compose(Linear({0: 1.0, 1: 1.0}), [g, Linear({1: 2.0})])
    x = np.array([0.3, 0.4])
    cols = np.array([0, 1])
    np.testing.assert_array_equal(g.grad_ray(x, np.array([1.0, 2.0]), cols), np.zeros((2, 2)))
    assert g.ray_kinks(x, 1.0, 10.0, cols).size == 0
    np.testing.assert_allclose(f.grad(x), [0.0, 2.0])
