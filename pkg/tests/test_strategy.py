import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmvlab.bsde import solve_deterministic, y_from_p2
from mmvlab.cone import ConeConstraint
from mmvlab.model import ClaimDistribution, InsuranceParams, discount_h, wealth_shift
from mmvlab.strategy import (DegenerateModelError, Frontier, j_value, mask_strategy, mmv_feedback,
                             mmv_kernels, mmv_target, mmv_value, mv_feedback, mv_frontier,
                             scaled_strategy, shifted_endowment)

from builders import constant_market, two_atom_insurance

DT = 1e-3


def solve(market, ins, cone):
    P2 = solve_deterministic("P2", market, ins, cone, DT)
    P1 = solve_deterministic("P1", market, ins, cone, DT)
    return P1, P2, y_from_p2(P2, market)


def frontier_for(market, ins, cone, x=1.0, theta=1.0):
    P1, P2, _ = solve(market, ins, cone)
    h0 = float(discount_h(market, 0.0))
    return mv_frontier(P1.initial_value, P2.initial_value, h0, shifted_endowment(market, ins, x), theta)


# -- MMV rule ---------------------------------------------------------------

def test_mmv_rule_hand_example(market2):
    # unconstrained, constant coefficients: pi = (a~/h - X~) (sigma sigma')^{-1} mu
    ins = two_atom_insurance()
    cone = ConeConstraint.unconstrained(2)
    _, _, Y = solve(market2, ins, cone)
    strat = mmv_feedback(Y, market2, ins, cone, theta=1.0, x=1.0)
    mu, sigma, _ = market2.coefficients_at(0.0)
    t, X = 0.25, np.array([0.5, 1.0, 1.5])
    h = float(discount_h(market2, t))
    gap = strat.target / h - (X + float(wealth_shift(market2, ins, t)))
    pi, q, clamped = strat(t, X)
    np.testing.assert_allclose(pi, gap[:, None] * np.linalg.solve(sigma @ sigma.T, mu), rtol=1e-12)
    s2 = ins.claims.second_moment
    np.testing.assert_allclose(q, gap * ins.b / (ins.intensity * s2), rtol=1e-12)
    assert not clamped.any()


def test_mmv_target_formula(market2):
    ins = two_atom_insurance()
    cone = ConeConstraint.nonnegative(2)
    _, _, Y = solve(market2, ins, cone)
    h0 = float(discount_h(market2, 0.0))
    expected = h0 * (2.0 + float(wealth_shift(market2, ins, 0.0))) + Y.initial_value / 0.5
    assert mmv_target(Y, market2, ins, 0.5, 2.0) == pytest.approx(expected, rel=1e-14)


def test_mmv_rule_stops_above_target(binding_market):
    ins = two_atom_insurance()
    cone = ConeConstraint.nonnegative(2)
    _, _, Y = solve(binding_market, ins, cone)
    strat = mmv_feedback(Y, binding_market, ins, cone, 1.0, 1.0)
    pi, q, clamped = strat(0.5, np.array([strat.target * 10]))
    assert clamped.all() and np.all(pi == 0) and np.all(q == 0)


@given(st.floats(0.0, 1.0), st.floats(-5.0, 5.0))
def test_mmv_rule_is_admissible(t, X):
    market = constant_market([0.08, -0.03], [[0.2, 0.0], [0.12, 0.25]])
    ins = two_atom_insurance()
    cone = ConeConstraint.nonnegative(2)
    _, _, Y = solve_cached(market, ins, cone)
    pi, q, _ = mmv_feedback(Y, market, ins, cone, 1.0, 1.0)(t, np.array([X]))
    assert q[0] >= 0
    assert cone.distance(pi[0]) <= 1e-9


_CACHE = {}


def solve_cached(market, ins, cone):
    key = (repr(market), repr(cone.to_dict()))
    if key not in _CACHE:
        _CACHE[key] = solve(market, ins, cone)
    return _CACHE[key]


def test_binding_cone_zeroes_short_asset(binding_market):
    ins = two_atom_insurance()
    cone = ConeConstraint.nonnegative(2)
    _, _, Y = solve(binding_market, ins, cone)
    pi, _, _ = mmv_feedback(Y, binding_market, ins, cone, 1.0, 1.0)(0.1, np.array([0.0]))
    assert pi[0, 0] > 0 and pi[0, 1] == pytest.approx(0.0, abs=1e-12)


# -- MV rule and the strategy identity ---------------------------------------

@pytest.mark.parametrize("cone", [ConeConstraint.unconstrained(2), ConeConstraint.nonnegative(2)])
def test_mmv_and_mv_rules_agree_below_target(cone, binding_market):
    ins = two_atom_insurance()
    P1, P2, Y = solve(binding_market, ins, cone)
    mmv = mmv_feedback(Y, binding_market, ins, cone, 1.0, 1.0)
    fr = frontier_for(binding_market, ins, cone)
    mv = mv_feedback(P1, P2, binding_market, ins, cone, fr.zeta_hat)
    for t in np.linspace(0.0, 0.99, 12):
        h = float(discount_h(binding_market, t))
        s = float(wealth_shift(binding_market, ins, t))
        X = np.linspace(-3.0, fr.zeta_hat / h - s - 1e-6, 25)
        pa, qa, _ = mmv(t, X)
        pb, qb, _ = mv(t, X)
        np.testing.assert_allclose(pa, pb, atol=1e-8)
        np.testing.assert_allclose(qa, qb, atol=1e-8)


def test_mv_rule_above_zeta_uses_upper_branch(market2):
    ins = two_atom_insurance()
    cone = ConeConstraint.unconstrained(2)
    P1, P2, _ = solve(market2, ins, cone)
    mv = mv_feedback(P1, P2, market2, ins, cone, zeta=0.0)
    mu, sigma, _ = market2.coefficients_at(0.0)
    pi, q, _ = mv(0.0, np.array([5.0]))
    gap = 5.0 + float(wealth_shift(market2, ins, 0.0))
    # above zeta the rule shorts the tangency direction and buys no reinsurance cover
    np.testing.assert_allclose(pi[0], -gap * np.linalg.solve(sigma @ sigma.T, mu), rtol=1e-10)
    assert q[0] == 0.0


# -- frontier ---------------------------------------------------------------

def test_frontier_value_at_riskless_target(market2):
    fr = frontier_for(market2, two_atom_insurance(), ConeConstraint.nonnegative(2))
    p = fr(fr.x * fr.h0)
    assert p.F == 0.0 and p.branch == "at"


def test_frontier_branches():
    fr = Frontier(P1_0=0.9, P2_0=0.6, h0=1.05, x=1.0, theta=1.0)
    above, below = fr(1.5), fr(0.5)
    assert above.branch == "above" and below.branch == "below"
    assert above.F == pytest.approx(0.6 * 0.45 ** 2 / (1.05 ** 2 - 0.6))
    assert below.F == pytest.approx(0.9 * 0.55 ** 2 / (1.05 ** 2 - 0.9))


def test_unattainable_branch():
    fr = Frontier(P1_0=1.05 ** 2, P2_0=0.6, h0=1.05, x=1.0, theta=1.0)
    p = fr(0.5)
    assert p.zeta is None and p.F == np.inf and not p.attainable


@pytest.mark.parametrize("z", [0.2, 0.9, 1.05, 1.3, 2.5])
def test_frontier_is_sup_of_lagrangian(z):
    fr = Frontier(P1_0=0.9, P2_0=0.6, h0=1.05, x=1.0, theta=1.0)
    step = 1e-4
    zetas = np.arange(-10.0, 10.0, step)
    sup = j_value(fr.P1_0, fr.P2_0, fr.h0, fr.x, z, zetas).max()
    p = fr(z)
    assert sup <= p.F + 1e-9
    assert p.F - sup <= step ** 2 * 4 + 1e-9
    assert j_value(fr.P1_0, fr.P2_0, fr.h0, fr.x, z, p.zeta) == pytest.approx(p.F, abs=1e-12)


def test_z_hat_maximises_mean_minus_penalty():
    fr = Frontier(P1_0=0.9, P2_0=0.6, h0=1.05, x=1.0, theta=2.0)
    zs = np.linspace(0.5, 5.0, 9001)
    crit = np.array([z - fr.theta / 2 * fr(z).F for z in zs])
    assert abs(zs[np.argmax(crit)] - fr.z_hat) <= 5e-4
    assert fr.value == pytest.approx(crit.max(), abs=1e-6)


def test_values_coincide(market2):
    ins = two_atom_insurance()
    cone = ConeConstraint.nonnegative(2)
    fr = frontier_for(market2, ins, cone)
    _, _, Y = solve(market2, ins, cone)
    assert mmv_value(Y.initial_value, fr.h0, fr.x, 1.0) == pytest.approx(fr.value, abs=1e-8)


def test_degenerate_lower_branch_rejected():
    with pytest.raises(DegenerateModelError):
        Frontier(P1_0=0.9, P2_0=1.05 ** 2, h0=1.05, x=1.0, theta=1.0)
    with pytest.raises(DegenerateModelError):
        Frontier(P1_0=1.2, P2_0=0.5, h0=1.0, x=1.0, theta=1.0)


def test_cone_enlargement_raises_value(binding_market):
    ins = two_atom_insurance()
    values = []
    for cone in (ConeConstraint.nonnegative(2), ConeConstraint.orthant([True, False]),
                 ConeConstraint.unconstrained(2)):
        _, _, Y = solve(binding_market, ins, cone)
        values.append(mmv_value(Y.initial_value, 1.0, 1.0, 1.0))
    assert values[0] <= values[1] + 1e-12 and values[1] <= values[2] + 1e-12
    assert values[2] > values[0]


# -- kernels and derived strategies -----------------------------------------

def test_saddle_kernel_without_constraints(market2):
    ins = two_atom_insurance()
    cone = ConeConstraint.unconstrained(2)
    _, _, Y = solve(market2, ins, cone)
    kern = mmv_kernels(Y, market2, ins, cone)
    _, _, phi = market2.coefficients_at(0.0)
    np.testing.assert_allclose(kern.eta(0.3), -phi, atol=1e-12)
    rho = Y.value_at(0.3) * ins.b / (ins.intensity * ins.claims.second_moment)
    np.testing.assert_allclose(kern.psi(0.3), rho * ins.claims.y / Y.value_at(0.3), rtol=1e-12)
    assert kern.floor == pytest.approx(Y.lower / Y.upper)
    assert np.all(kern.psi(0.3) >= -1 + kern.floor)


def test_scaled_and_masked_strategies(market2):
    ins = two_atom_insurance()
    cone = ConeConstraint.nonnegative(2)
    _, _, Y = solve(market2, ins, cone)
    base = mmv_feedback(Y, market2, ins, cone, 1.0, 1.0)
    X = np.array([0.3, 0.7])
    pi, q, _ = base(0.2, X)
    pi2, q2, _ = scaled_strategy(base, 2.0)(0.2, X)
    np.testing.assert_allclose(pi2, 2 * pi)
    np.testing.assert_allclose(q2, 2 * q)
    pim, qm, _ = mask_strategy(base, keep_pi=False, keep_q=True)(0.2, X)
    assert np.all(pim == 0) and np.array_equal(qm, q)
    with pytest.raises(ValueError):
        scaled_strategy(base, -1.0)


def test_no_claims_means_no_reinsurance():
    market = constant_market([0.06], [[0.25]])
    ins = InsuranceParams(0.0, 0.2, 0.3, ClaimDistribution((1.0,), (1.0,)))
    cone = ConeConstraint.nonnegative(1)
    _, _, Y = solve(market, ins, cone)
    _, q, _ = mmv_feedback(Y, market, ins, cone, 1.0, 1.0)(0.0, np.array([0.0]))
    assert q[0] == 0.0
