import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmvlab.bsde import (BsdeSolution, MarketSlice, SolverError, driver_P, driver_P1, driver_P2,
                         driver_Y, g1, g1_slope, g2_star, minimize_G1, p_to_y, p_to_y_values,
                         rho2, solve_deterministic, y_from_p2, y_to_p)
from mmvlab.cone import ConeConstraint
from mmvlab.model import (ClaimDistribution, InsuranceParams, PositivityError, ValidationError,
                          discount_h)

from builders import (constant_market, grid_argmin, interior_inputs, nnls_projection_norm2,
                      two_atom_insurance)


def closed_form_y0(market, ins, nonneg):
    _, sigma, phi = market.coefficients_at(0.0)
    k = nnls_projection_norm2(phi, sigma, nonneg) + ins.b ** 2 / (ins.intensity * ins.claims.second_moment)
    return np.exp(k * market.horizon)


# -- reinsurance pieces -----------------------------------------------------

def test_g2_star_without_jump_component():
    ins = two_atom_insurance()
    P = np.array([0.5, 1.0, 2.0])
    expected = -P * ins.b ** 2 / (ins.intensity * ins.claims.second_moment)
    np.testing.assert_allclose(g2_star(P, 0.0, ins), expected, rtol=1e-14)
    np.testing.assert_allclose(rho2(P, 0.0, ins),
                               ins.b / (ins.intensity * ins.claims.second_moment), rtol=1e-14)


@given(st.floats(0.1, 10.0), st.floats(0.01, 20.0))
def test_g2_star_is_homogeneous(P, c):
    ins = two_atom_insurance()
    G = np.array([0.3 * P, -0.4 * P])
    assert g2_star(c * P, c * G, ins) == pytest.approx(c * g2_star(P, G, ins), rel=1e-12, abs=1e-14)


def test_g2_star_clipped_at_zero():
    ins = two_atom_insurance()
    # Gamma large enough that P b - sum Gamma y lam p < 0
    assert g2_star(1.0, np.array([5.0, 5.0]), ins) == 0.0


def test_positivity_guards():
    ins = two_atom_insurance()
    sl = MarketSlice.build(constant_market([0.05], [[0.2]]), ConeConstraint.unconstrained(1), 0.0)
    with pytest.raises(PositivityError):
        g2_star(1.0, np.array([-1.0, 0.0]), ins)
    with pytest.raises(PositivityError):
        driver_P(np.array([0.0]), np.zeros((1, 1)), np.zeros((1, 2)), sl, ins)
    with pytest.raises(PositivityError):
        driver_Y(np.array([-1.0]), np.zeros((1, 1)), np.zeros((1, 2)), sl, ins)


# -- G1 minimisation --------------------------------------------------------


@pytest.mark.parametrize("method", ["exact", "ternary"])
def test_gamma_zero_gives_exact_zero(method):
    ins = two_atom_insurance()
    rng = np.random.default_rng(0)
    P1, P2 = rng.uniform(0.1, 5, 100), rng.uniform(0.1, 5, 100)
    rho, val = minimize_G1(P1, 0.0, P2, 0.0, ins, method=method)
    assert np.all(rho == 0.0) and np.all(val == 0.0)


@pytest.mark.parametrize("method", ["exact", "ternary"])
def test_g1_matches_grid_search(method):
    ins = two_atom_insurance()
    rng = np.random.default_rng(1)
    P1, G1, P2, G2 = interior_inputs(rng, 60)
    rho, _ = minimize_G1(P1, G1, P2, G2, ins, method=method)
    assert np.any(rho > 0)
    for i in range(60):
        assert abs(rho[i] - grid_argmin(P1[i], G1[i], P2[i], G2[i], ins)) <= 2e-4


def test_exact_and_ternary_agree():
    ins = two_atom_insurance()
    rng = np.random.default_rng(2)
    args = interior_inputs(rng, 2000)
    r_exact, v_exact = minimize_G1(*args, ins)
    r_tern, v_tern = minimize_G1(*args, ins, method="ternary")
    np.testing.assert_allclose(r_exact, r_tern, atol=1e-7)
    assert np.all(v_exact <= v_tern + 1e-12)


def test_exact_minimiser_is_stationary():
    ins = InsuranceParams(1.5, 0.1, 0.2, ClaimDistribution((0.3, 1.0, 2.5), (0.3, 0.5, 0.2)))
    rng = np.random.default_rng(3)
    P1 = rng.uniform(0.5, 2.0, 500)
    P2 = rng.uniform(0.5, 2.0, 500)
    G1 = rng.uniform(-0.9, 3.0, (500, 3)) * P1[:, None]
    G2 = rng.uniform(-0.5, 0.5, (500, 3)) * P2[:, None]
    rho, _ = minimize_G1(P1, G1, P2, G2, ins)
    slope = g1_slope(rho, P1, G1, P2, G2, ins)
    interior = rho > 0
    np.testing.assert_allclose(slope[interior], 0.0, atol=1e-10)
    assert np.all(slope[~interior] >= -1e-12)


@given(st.floats(0.2, 3.0), st.floats(-0.95, 0.5), st.floats(-0.95, 0.5),
       st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.0, 1.0))
def test_g1_is_convex(P1, a, b, u, v, lam):
    ins = two_atom_insurance()
    G1 = np.array([a, b]) * P1
    G2 = np.array([0.1, -0.2])
    mix = lam * u + (1 - lam) * v
    lhs = g1(mix, P1, G1, 1.0, G2, ins)
    rhs = lam * g1(u, P1, G1, 1.0, G2, ins) + (1 - lam) * g1(v, P1, G1, 1.0, G2, ins)
    assert lhs <= rhs + 1e-10 * (1 + abs(rhs))


def test_unknown_g1_method():
    with pytest.raises(ValidationError):
        minimize_G1(1.0, 0.0, 1.0, 0.0, two_atom_insurance(), method="golden")


def test_ternary_bracket_failure_is_reported():
    ins = two_atom_insurance()
    args = interior_inputs(np.random.default_rng(4), 5)
    with pytest.raises(SolverError):
        minimize_G1(*args, ins, method="ternary", max_doublings=0)


# -- driver identities ------------------------------------------------------

@pytest.mark.parametrize("cone", [ConeConstraint.unconstrained(2), ConeConstraint.nonnegative(2),
                                  ConeConstraint.orthant([False, True])])
def test_y_driver_is_ito_transform_of_p_driver(cone, binding_market):
    # Y = 1/P: drift of Y = f_P/P^2 + |Delta|^2/P^3 + sum (1/(P+G) - 1/P + G/P^2) lam p
    ins = two_atom_insurance()
    sl = MarketSlice.build(binding_market, cone, 0.0)
    rng = np.random.default_rng(5)
    N = 1000
    P = rng.uniform(0.3, 3.0, N)
    D = rng.normal(scale=0.5, size=(N, 2))
    G = rng.uniform(-0.25, 1.0, (N, 2)) * P[:, None]
    w = ins.jump_weights
    ito = (driver_P(P, D, G, sl, ins) / P ** 2 + np.sum(D * D, -1) / P ** 3
           + np.sum((1 / (P[:, None] + G) - 1 / P[:, None] + G / P[:, None] ** 2) * w, -1))
    np.testing.assert_allclose(driver_Y(*p_to_y_values(P, D, G), sl, ins), ito, atol=1e-9)


def test_p2_driver_adds_discount_term(market2):
    ins = two_atom_insurance()
    sl = MarketSlice.build(market2, ConeConstraint.nonnegative(2), 0.0)
    P, D, G = np.array([1.3]), np.array([[0.1, -0.2, 0.05]]), np.array([[0.1, -0.1]])
    assert driver_P2(P, D, G, sl, ins) == pytest.approx(2 * 0.03 * 1.3 + driver_P(P, D, G, sl, ins))


def test_p1_driver_at_zero_jumps(market2):
    ins = two_atom_insurance()
    sl = MarketSlice.build(market2, ConeConstraint.unconstrained(2), 0.0)
    _, _, phi = market2.coefficients_at(0.0)
    # Gamma = 0 gives G1* = 0, unconstrained F1* = -P |phi|^2
    val = driver_P1(np.array([1.7]), np.zeros((1, 3)), np.zeros((1, 2)),
                    np.array([0.9]), np.zeros((1, 2)), sl, ins)
    assert val == pytest.approx(1.7 * (2 * 0.03 - phi @ phi), rel=1e-12)


# -- deterministic solver ---------------------------------------------------

CASES = [
    ([0.08, 0.05], [[0.2, 0.05, 0.0], [0.0, 0.25, 0.1]], (False, False)),
    ([0.08, 0.05], [[0.2, 0.05, 0.0], [0.0, 0.25, 0.1]], (True, True)),
    ([0.08, -0.03], [[0.2, 0.0], [0.12, 0.25]], (True, True)),
    ([0.08, -0.03], [[0.2, 0.0], [0.12, 0.25]], (False, True)),
    ([0.06], [[0.25]], (True,)),
    ([-0.02, 0.04, 0.07], [[0.2, 0, 0], [0.05, 0.3, 0], [0, 0.1, 0.22]], (True, False, True)),
]


@pytest.mark.parametrize("mu, sigma, nonneg", CASES)
def test_closed_form_constants(mu, sigma, nonneg):
    market = constant_market(mu, sigma)
    ins = two_atom_insurance()
    cone = ConeConstraint.orthant(list(nonneg))
    Y = y_from_p2(solve_deterministic("P2", market, ins, cone, 1e-3), market)
    assert Y.initial_value == pytest.approx(closed_form_y0(market, ins, nonneg), rel=1e-8)
    Yd = solve_deterministic("Y", market, ins, cone, 1e-3)
    np.testing.assert_allclose(Yd.value, Y.value, rtol=1e-8)
    P = solve_deterministic("P", market, ins, cone, 1e-3)
    np.testing.assert_allclose(1.0 / P.value, Yd.value, rtol=1e-8)


def test_rk4_order(binding_market):
    ins = two_atom_insurance()
    cone = ConeConstraint.nonnegative(2)
    # a rate schedule makes the ODE non-autonomous but keeps it exact on aligned grids
    exact = solve_deterministic("P1", binding_market, ins, cone, 1 / 512).initial_value
    err = [abs(solve_deterministic("P1", binding_market, ins, cone, dt).initial_value - exact)
           for dt in (1 / 4, 1 / 8)]
    assert err[0] > 0 and np.log2(err[0] / err[1]) >= 3.0


def test_branch_values_against_discount(market2):
    ins = two_atom_insurance()
    cone = ConeConstraint.nonnegative(2)
    h0 = float(discount_h(market2, 0.0))
    P1 = solve_deterministic("P1", market2, ins, cone, 1e-3)
    P2 = solve_deterministic("P2", market2, ins, cone, 1e-3)
    assert 0 < P2.initial_value < h0 ** 2
    # short-selling is the only upside on this branch, and the cone forbids it
    assert P1.initial_value == pytest.approx(h0 ** 2, rel=1e-12)
    assert P1.satisfies_certificates() and P2.satisfies_certificates()
    assert P1.value[-1] == 1.0 and P2.value[-1] == 1.0


def test_zero_opportunity_gives_unit_solution():
    market = constant_market([0.0], [[0.2]], r=0.0)
    ins = InsuranceParams(0.0, 0.2, 0.3, ClaimDistribution((1.0,), (1.0,)))
    sol = solve_deterministic("P", market, ins, ConeConstraint.unconstrained(1), 0.01)
    np.testing.assert_array_equal(sol.value, 1.0)


def test_solver_rejects_unknown_kind(market2):
    with pytest.raises(ValidationError):
        solve_deterministic("Q", market2, two_atom_insurance(), ConeConstraint.unconstrained(2), 0.01)


# -- transforms and storage -------------------------------------------------

def test_transform_round_trip(market2):
    sol = solve_deterministic("P", market2, two_atom_insurance(), ConeConstraint.nonnegative(2), 0.01)
    back = y_to_p(p_to_y(sol))
    np.testing.assert_allclose(back.value, sol.value, rtol=1e-14)
    with pytest.raises(ValidationError):
        p_to_y(p_to_y(sol))


@given(st.floats(0.1, 10.0), st.floats(-0.09, 5.0), st.floats(-1.0, 1.0))
def test_pointwise_transform_is_involution(P, g, d):
    P_ = np.array([P])
    D, G = np.array([[d]]), np.array([[g * P]])
    back = p_to_y_values(*p_to_y_values(P_, D, G))
    np.testing.assert_allclose(back[0], P_, rtol=1e-12)
    np.testing.assert_allclose(back[1], D, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(back[2], G, rtol=1e-10, atol=1e-12 * P)


def test_y_from_p2_applies_discount(market2):
    P2 = solve_deterministic("P2", market2, two_atom_insurance(), ConeConstraint.nonnegative(2), 0.01)
    Y = y_from_p2(P2, market2)
    h = discount_h(market2, P2.times)
    np.testing.assert_allclose(Y.value, h ** 2 / P2.value, rtol=1e-15)
    assert Y.satisfies_certificates()


def test_csv_round_trip(tmp_path, market2):
    sol = solve_deterministic("P2", market2, two_atom_insurance(), ConeConstraint.nonnegative(2), 0.01)
    path = tmp_path / "p2.csv"
    sol.to_csv(path, provenance={"config_sha256": "abc", "seed": 3})
    again = BsdeSolution.from_csv(path)
    np.testing.assert_array_equal(again.value, sol.value)
    np.testing.assert_array_equal(again.times, sol.times)
    assert again.lower == sol.lower and again.upper == sol.upper
    assert again.meta == {"config_sha256": "abc", "seed": "3"}


def test_interpolation_between_nodes(market2):
    sol = solve_deterministic("P", market2, two_atom_insurance(), ConeConstraint.nonnegative(2), 0.1)
    mid = sol.value_at(0.15)
    assert mid == pytest.approx(0.5 * (sol.value[1] + sol.value[2]))
    assert sol.value_at(0.1) == sol.value[1]
