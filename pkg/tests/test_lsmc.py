import numpy as np
import pytest

from mmvlab.bsde import solve_deterministic
from mmvlab.cone import ConeConstraint
from mmvlab.lsmc import (LsmcSettings, PolynomialBasis, QualityError, monomial_exponents,
                         simulate_factor_paths, solve_lsmc)
from mmvlab.model import ValidationError

from builders import constant_market, factor_market, frozen_market, two_atom_insurance

FAST = LsmcSettings(dt=0.02, n_paths=2000)


def test_monomial_exponents():
    e = monomial_exponents(2, 2)
    assert len(e) == 6
    assert {tuple(r) for r in e} == {(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)}
    assert len(monomial_exponents(3, 3)) == 20


def test_basis_evaluates_monomials():
    F = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    basis = PolynomialBasis.fit(F, 2)
    Phi = basis(F)
    assert Phi.shape == (3, 6)
    np.testing.assert_allclose(Phi[:, 0], 1.0)


def test_terminal_slice_is_one():
    sol = solve_lsmc("P2", factor_market(), two_atom_insurance(), ConeConstraint.nonnegative(2), FAST)
    F = np.random.default_rng(0).normal(size=(50, 1))
    np.testing.assert_allclose(sol.value_at(1.0, F), 1.0, atol=1e-14)


@pytest.mark.parametrize("which", ["P2", "P1", "Y"])
def test_zero_noise_matches_deterministic(which):
    market = factor_market(vol_scale=0.0)
    ins = two_atom_insurance()
    cone = ConeConstraint.nonnegative(2)
    sol = solve_lsmc(which, market, ins, cone, FAST)
    det = solve_deterministic(which, frozen_market(market), ins, cone, FAST.dt)
    got = np.array([np.ravel(sol.value_at(t, np.zeros(1)))[0] for t in sol.times])
    np.testing.assert_allclose(got, det.value, rtol=1e-2)
    assert sol.diagnostics["clamp_rate"] == 0.0


def test_no_factor_jump_gives_zero_gamma():
    market = factor_market(jump=0.0)
    sol = solve_lsmc("P2", market, two_atom_insurance(), ConeConstraint.nonnegative(2), FAST)
    paths = simulate_factor_paths(market, two_atom_insurance(), FAST)
    worst = max(np.abs(sol.at(t, paths.F[k])[2]).max() for k, t in enumerate(sol.times))
    assert worst <= 1e-10


def test_factor_jump_moves_gamma():
    market = factor_market(jump=0.4)
    sol = solve_lsmc("P2", market, two_atom_insurance(), ConeConstraint.nonnegative(2), FAST)
    _, _, G = sol.at(0.5, np.zeros(1))
    assert np.abs(G).max() > 1e-6


def test_certificates_bracket_solution():
    market = factor_market(jump=0.3)
    ins = two_atom_insurance()
    sol = solve_lsmc("P2", market, ins, ConeConstraint.nonnegative(2), FAST)
    paths = simulate_factor_paths(market, ins, FAST)
    for k in range(0, len(sol.times), 5):
        v, _, j = sol.at(sol.times[k], paths.F[k])
        assert v.min() >= sol.lower and (v[:, None] + j).max() <= sol.upper


def test_same_seed_same_solution():
    market, ins, cone = factor_market(), two_atom_insurance(), ConeConstraint.unconstrained(2)
    a = solve_lsmc("P2", market, ins, cone, FAST)
    b = solve_lsmc("P2", market, ins, cone, FAST)
    assert a.initial_value == b.initial_value


def test_tabulation_on_paths():
    market, ins = factor_market(), two_atom_insurance()
    paths = simulate_factor_paths(market, ins, FAST)
    sol = solve_lsmc("P2", market, ins, ConeConstraint.nonnegative(2), FAST, paths=paths)
    table = sol.on_paths(paths)
    assert table.value.shape == (len(sol.times),)
    assert table.value[-1] == pytest.approx(1.0)


def test_clamp_budget_enforced():
    # a floor above every value forces clamping on all paths
    settings = LsmcSettings(dt=0.05, n_paths=500, floor=10.0)
    with pytest.raises(QualityError):
        solve_lsmc("P2", factor_market(), two_atom_insurance(), ConeConstraint.nonnegative(2), settings)


def test_needs_factor_market():
    with pytest.raises(ValidationError):
        solve_lsmc("P2", constant_market([0.05], [[0.2]]), two_atom_insurance(),
                   ConeConstraint.unconstrained(1), FAST)


def test_invalid_settings():
    with pytest.raises(ValidationError):
        LsmcSettings(dt=0.01, n_paths=1)
