import numpy as np
import pytest

from ocdra.engine import DISC_C, dual_upper_bound, run_online, verify_certificate
from ocdra.errors import InfeasibleDual, InvalidStepSize, MalformedInstance, RatioShortfall
from ocdra.instances import Arrival, Instance, generate
from ocdra.transform import GAMMA, UTransform, u_eval
from ocdra.valuation import BudgetAdditive, Linear, Sum


def empty_instance():
    return Instance((), (), Linear({}), {})


@pytest.fixture(scope="module")
def tie_runs():
    inst = generate("two_agent_tie")
    return inst, run_online(inst, "balanced", 1e-3), run_online(inst, "plain_greedy", 1e-3)


def test_tie_balanced(tie_runs):
    _, (state, cert, rep), _ = tie_runs
    assert rep.primal == pytest.approx(1.5, abs=0.01)
    assert rep.primal / 2.0 == pytest.approx(0.75, abs=0.01)
    # item 0 splits about evenly; item 1 tops agent A up to its budget and the
    # rest stays unallocated once the gradient hits zero
    assert state.x[0] == pytest.approx(0.5, abs=0.01)
    assert state.x[0] + state.x[2] == pytest.approx(1.0, abs=1e-9)


def test_tie_plain_greedy(tie_runs):
    _, _, (state, cert, rep) = tie_runs
    assert rep.primal == pytest.approx(1.0, abs=1e-12)
    # item 0 all to agent A, item 1 wasted at zero gradient
    np.testing.assert_allclose(state.x, [1.0, 0.0, 0.0], atol=1e-9)


def test_tie_certificate(tie_runs):
    _, (_, cert, rep), _ = tie_runs
    v = verify_certificate(cert, GAMMA)
    assert v.ok and v.feasible_slack >= 0 and v.ratio_slack > 0
    assert 2.0 <= dual_upper_bound(cert) <= 2.4
    assert rep.certified_ratio >= GAMMA - 0.01


def test_zeroed_beta_is_infeasible(tie_runs):
    _, (_, cert, _), _ = tie_runs
    cert.beta = cert.beta.copy()
    saved = cert.beta.copy()
    cert.beta[:] = 0.0
    try:
        with pytest.raises(InfeasibleDual):
            verify_certificate(cert)
        with pytest.raises(InfeasibleDual):
            dual_upper_bound(cert)
        assert not verify_certificate(cert, strict=False).ok
    finally:
        cert.beta = saved


def test_ratio_shortfall_detected(tie_runs):
    _, _, (_, cert, _) = tie_runs
    # plain greedy reaches half the dual here; demanding 1 - 1/e must fail
    with pytest.raises(RatioShortfall):
        verify_certificate(cert, GAMMA)
    assert verify_certificate(cert, 0.5).ok


def test_empty_instance():
    state, cert, rep = run_online(empty_instance(), "balanced", 1e-2)
    assert rep.primal == 0 and rep.dual == 0
    v = verify_certificate(cert)
    assert v.ok and v.feasible_slack == 0 and v.ratio_slack == 0
    assert dual_upper_bound(cert) == 0


def test_single_linear_arrival():
    inst = Instance((0,), (Arrival(0, (0,)),), Linear({0: 5.0}), {})
    _, cert, rep = run_online(inst, "balanced", 1e-2)
    assert rep.primal == pytest.approx(5.0)
    assert dual_upper_bound(cert) >= 5.0 - 1e-9


@pytest.mark.parametrize("delta", [0.0, -0.1, 0.2, 0.003, 1 / 3.5])
def test_invalid_step(delta):
    with pytest.raises(InvalidStepSize):
        run_online(generate("two_agent_tie"), "balanced", delta)


def test_overlapping_options_rejected():
    inst = Instance((0, 1), (Arrival(0, (0, 1)), Arrival(1, (1,))), Linear({0: 1.0, 1: 1.0}), {})
    with pytest.raises(MalformedInstance):
        run_online(inst, "balanced", 0.1)


def test_unknown_policy():
    with pytest.raises(ValueError):
        run_online(generate("two_agent_tie"), "random", 0.1)


FAMILY_CASES = [
    ("triangular", {"n": 8}),
    ("concave_returns", {"n": 8, "m": 3}),
    ("whole_page", {"n": 6, "m": 3, "k": 3, "levels": 2}),
    ("polymatroid_assignment", {"n": 4, "k": 3}),
    ("random_mixture", {"n": 8, "m": 4, "k": 2}),
]


@pytest.fixture(scope="module", params=FAMILY_CASES, ids=[c[0] for c in FAMILY_CASES])
def family_run(request):
    family, params = request.param
    inst = generate(family, params, seed=2)
    return inst, run_online(inst, "balanced", 1e-2, trace=True)


def test_budget_per_arrival(family_run):
    inst, (state, cert, rep) = family_run
    for arr in inst.arrivals:
        assert state.x[list(arr.options)].sum() <= 1 + 1e-12
    assert np.all(state.x >= 0)
    assert set(np.flatnonzero(state.x)) <= set(state.revealed)


def test_alpha_nonincreasing(family_run):
    inst, (state, cert, rep) = family_run
    prev = {}
    for seen, g in state.alpha_trace:
        for a, v in zip(seen, g):
            if a in prev:
                assert v <= prev[a] + 1e-9
            prev[a] = v
    # final alpha is the last snapshot
    seen, g = state.alpha_trace[-1]
    np.testing.assert_allclose(cert.alpha[seen], g, atol=1e-12)


def test_beta_fixed_after_arrival(family_run):
    inst, (state, cert, rep) = family_run
    j = inst.n // 2
    prefix = Instance(inst.coords, inst.arrivals[:j], inst.valuation, inst.meta)
    _, cert_p, _ = run_online(prefix, "balanced", 1e-2)
    np.testing.assert_array_equal(cert_p.beta, cert.beta[:j])


def test_beta_sums_to_u(family_run):
    inst, (state, cert, rep) = family_run
    f_seen = inst.valuation.restrict(state.revealed)
    u = u_eval(UTransform(f_seen), state.x)
    assert abs(cert.beta.sum() - u) <= 2 * cert.delta * inst.n * cert.gmax


def test_dual_feasible_and_certified(family_run):
    inst, (state, cert, rep) = family_run
    v = verify_certificate(cert, GAMMA, DISC_C, tol=1e-9)
    assert v.feasible_slack >= -1e-9
    assert rep.primal <= rep.dual * (1 + 1e-3)


def test_deterministic(family_run):
    inst, (state, cert, rep) = family_run
    _, _, rep2 = run_online(inst, "balanced", 1e-2, trace=True)
    assert rep2 == rep
    assert rep2.to_json(timing=False) == rep.to_json(timing=False)


def test_information_model():
    """Two valuations that agree once restricted to the first arrival's
    options must produce the same first-arrival decisions."""
    groups = [(0, 1), (2, 3)]
    arrivals = tuple(Arrival(j, g) for j, g in enumerate(groups))
    base = [(1.0, BudgetAdditive({0: 1.0, 2: 1.0}, 1.0)), (1.0, BudgetAdditive({1: 1.0}, 0.6))]
    f1 = Sum(base + [(1.0, BudgetAdditive({3: 1.0, 0: 0.5}, 0.3))])
    f2 = Sum(base + [(1.0, BudgetAdditive({3: 7.0, 0: 0.5}, 0.3)), (2.0, Linear({2: 3.0}))])
    s1, c1, _ = run_online(Instance((0, 1, 2, 3), arrivals, f1), "balanced", 1e-2)
    s2, c2, _ = run_online(Instance((0, 1, 2, 3), arrivals, f2), "balanced", 1e-2)
    np.testing.assert_array_equal(s1.x[:2], s2.x[:2])
    assert c1.beta[0] == c2.beta[0]
    # and the later arrival does see the difference
    assert not np.array_equal(s1.x[2:], s2.x[2:])


def test_report_json_fields(tie_runs):
    _, (_, _, rep), _ = tie_runs
    d = rep.to_json()
    assert list(d) == ["primal", "dual", "certified_ratio", "opt_lower_bound", "policy", "delta",
                       "quad_nodes", "n_arrivals", "wall_ms", "per_arrival_beta"]
    assert len(d["per_arrival_beta"]) == 2


def test_compute_opt_reports_empirical_ratio():
    _, _, rep = run_online(generate("two_agent_tie"), "plain_greedy", 1e-2, compute_opt=True)
    assert rep.opt_lower_bound == pytest.approx(2.0, abs=1e-3)
    assert rep.empirical_ratio == pytest.approx(0.5, abs=0.01)
