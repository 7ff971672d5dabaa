import itertools

import numpy as np

from mmvlab.bsde import g1
from mmvlab.cone import ConeConstraint
from mmvlab.model import (ClaimDistribution, DeterministicCoefficients, InsuranceParams,
                          MarketModel, OUFactorModel, PiecewiseConstant)

T = 1.0


def constant_market(mu, sigma, r=0.03, horizon=T):
    mu, sigma = np.asarray(mu, float), np.atleast_2d(np.asarray(sigma, float))
    coef = DeterministicCoefficients(PiecewiseConstant.constant(mu, horizon),
                                     PiecewiseConstant.constant(sigma, horizon))
    return MarketModel(horizon, PiecewiseConstant.constant(r, horizon), coef)


def two_atom_insurance(intensity=2.0, loading=0.2, reinsurer_loading=0.3):
    return InsuranceParams(intensity, loading, reinsurer_loading,
                           ClaimDistribution((0.5, 1.5), (0.5, 0.5)))


def factor_market(vol_scale=1.0, jump=0.0, r=0.03):
    fac = OUFactorModel(kappa=[1.5], mean=[0.0], vol=[[0.3 * vol_scale, 0.2 * vol_scale]],
                        jump=[jump], initial=[0.0], mu_base=[0.08, 0.05], mu_amp=[0.04, 0.02],
                        mu_load=[[1.0], [-0.5]], sigma_base=[[0.2, 0.05], [0.0, 0.25]],
                        vol_low=0.8, vol_high=1.3, vol_load=[0.7])
    return MarketModel(T, PiecewiseConstant.constant(r, T), fac)


def frozen_market(market):
    """Deterministic market with the factor model's coefficients at F = 0."""
    mu, sigma, _ = market.coefficients_at(0.0, np.zeros(market.factor.d))
    return constant_market(mu, sigma)


def random_sigma(rng, m, n):
    while True:
        s = rng.normal(size=(m, n))
        if np.linalg.eigvalsh(s @ s.T).min() > 0.05:
            return s


def cone_zoo(m):
    flags = [i % 2 == 0 for i in range(m)]
    cones = [ConeConstraint.unconstrained(m), ConeConstraint.nonnegative(m),
             ConeConstraint.orthant(flags)]
    if m == 2:
        cones.append(ConeConstraint.from_generators(np.array([[1.0, 0.3], [0.2, 1.0]])))
        cones.append(ConeConstraint.from_halfspaces(np.array([[1.0, -0.5], [0.0, 1.0]])))
    if m == 3:
        cones.append(ConeConstraint.from_halfspaces(np.array([[1.0, 1.0, 0.0], [0.0, 1.0, -1.0]])))
    return cones


def nnls_projection_norm2(phi, sigma, nonneg):
    """min over pi (with pi_i >= 0 where flagged) of |sigma'pi - phi|^2, by active-set
    enumeration; returns |xi|^2 where xi is the minimiser's image."""
    m = sigma.shape[0]
    best, best_xi = np.inf, None
    for fixed in itertools.product([False, True], repeat=m):
        if any(f and not c for f, c in zip(fixed, nonneg)):
            continue
        free = [i for i in range(m) if not fixed[i]]
        pi = np.zeros(m)
        if free:
            S = sigma[free]
            pi[free] = np.linalg.solve(S @ S.T, S @ phi)
        if any(c and p < -1e-14 for c, p in zip(nonneg, pi)):
            continue
        xi = sigma.T @ pi
        d = np.sum((xi - phi) ** 2)
        if d < best:
            best, best_xi = d, xi
    return float(best_xi @ best_xi)


def grid_argmin(P1, G1, P2, G2, ins, step=1e-4):
    u = np.arange(0.0, 2.0 / ins.claims.y.min() * 4 + step, step)
    vals = g1(u, P1, G1, P2, G2, ins)
    return u[np.argmin(vals)]


def interior_inputs(rng, n):
    # the slope at u = 0 is 2 P1 (b + lam b_Y) - 2 sum y (P1 + G1) lam p, so an
    # interior minimiser needs G1 well above zero
    P1 = rng.uniform(0.5, 2.0, n)
    P2 = rng.uniform(0.5, 2.0, n)
    G1 = rng.uniform(-0.5, 3.0, (n, 2)) * P1[:, None]
    G2 = rng.uniform(-0.5, 3.0, (n, 2)) * P2[:, None]
    return P1, G1, P2, G2
