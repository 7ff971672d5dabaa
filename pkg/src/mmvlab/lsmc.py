"""Least-squares Monte Carlo for the factor-driven equations.

The factor is simulated forward on a uniform grid. Backward in time, the
solution at ``t_k`` is a polynomial in the (standardised) factor:

* continuation ``C = E[U_{k+1} | F_k]`` by ridge-regularised least squares,
* ``Delta`` by regressing ``(U_{k+1} - C) dW_k / dt``,
* ``Gamma(y_i) = U_k(F + J(F, y_i)) - U_k(F)`` from the fitted value map,
* ``U_k = C + f(C, Delta, Gamma) dt``, refitted once after ``Gamma`` is
  recomputed from the fresh value map.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bsde import (BsdeSolution, SolverError, MarketSlice, driver_P1, generator)
from .cone import ConeConstraint
from .model import InsuranceParams, MarketModel, ValidationError


class QualityError(SolverError):
    """Raised when the regression solution needs too much positivity clamping."""


@dataclass(frozen=True)
class LsmcSettings:
    """Regression solver settings.

    ``initial_spread`` disperses the starting factor across regression
    paths (``F_0 + spread * N(0, I)``) so that every time slice carries
    cross-sectional variation even when the factor noise is switched off.
    """

    dt: float
    n_paths: int = 10_000
    degree: int = 2
    ridge: float = 1e-8
    floor: float = 1e-6
    max_clamp_rate: float = 1e-3
    certificate_margin: float = 0.1
    initial_spread: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_paths < 2 or self.degree < 0 or self.ridge < 0 or self.floor <= 0:
            raise ValidationError("invalid regression settings")


def monomial_exponents(d: int, degree: int) -> np.ndarray:
    """Exponents of all monomials in ``d`` variables of total degree <= ``degree``."""
    rows = [np.zeros(d, dtype=int)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            e = np.zeros(d, dtype=int)
            for i in combo:
                e[i] += 1
            rows.append(e)
    return np.array(rows)


@dataclass(frozen=True)
class PolynomialBasis:
    """Total-degree monomials in ``(F - center) / scale``."""

    center: np.ndarray
    scale: np.ndarray
    exponents: np.ndarray

    @classmethod
    def fit(cls, F, degree):
        center = F.mean(axis=0)
        std = F.std(axis=0)
        scale = np.where(std > 1e-12 * (1 + np.abs(center)), std, 1.0)
        return cls(center, scale, monomial_exponents(F.shape[-1], degree))

    @property
    def size(self):
        return len(self.exponents)

    @property
    def degree(self):
        return int(self.exponents.sum(axis=1).max())

    def __call__(self, F):
        z = (np.asarray(F, dtype=float) - self.center) / self.scale
        return np.prod(z[..., None, :] ** self.exponents, axis=-1)


def _regress(Phi, target, ridge):
    """Ridge-regularised least squares on scaled normal equations."""
    N = Phi.shape[0]
    gram = Phi.T @ Phi / N
    gram[np.diag_indices_from(gram)] += ridge
    return np.linalg.solve(gram, Phi.T @ target.reshape(N, -1) / N).reshape(
        (Phi.shape[1],) + target.shape[1:])


def _fit_basis(F, degree, tol=1e-10):
    """Largest degree <= ``degree`` whose design matrix has full column rank."""
    for deg in range(degree, -1, -1):
        basis = PolynomialBasis.fit(F, deg)
        sv = np.linalg.svd(basis(F) / np.sqrt(len(F)), compute_uv=False)
        if sv[-1] > tol * sv[0]:
            return basis
    raise SolverError("regression design is rank deficient even at degree 0")


@dataclass(frozen=True)
class FactorPaths:
    """Forward factor paths with the Brownian increments that drive them."""

    times: np.ndarray
    F: np.ndarray        # (K+1, N, d)
    dW: np.ndarray       # (K, N, n)


def simulate_factor_paths(market: MarketModel, insurance: InsuranceParams,
                          settings: LsmcSettings) -> FactorPaths:
    """Euler scheme for ``dF = kappa (mean - F) dt + vol dW + J(F, y)`` at claims."""
    factor = market.factor
    if factor is None:
        raise ValidationError("regression solver needs factor-driven coefficients")
    times = market.grid(settings.dt)
    K, N, dt = len(times) - 1, settings.n_paths, settings.dt
    ss = np.random.SeedSequence(settings.seed)
    g_w, g_c, g_0 = (np.random.Generator(np.random.Philox(s)) for s in ss.spawn(3))
    dW = g_w.standard_normal((K, N, market.n)) * np.sqrt(dt)
    F = np.empty((K + 1, N, factor.d))
    F[0] = factor.initial + settings.initial_spread * g_0.standard_normal((N, factor.d))
    claim_sum = np.zeros((K, N))
    if insurance.has_jumps and factor.claim_sensitive:
        counts = g_c.poisson(insurance.intensity * dt, size=(K, N))
        total = int(counts.sum())
        sizes = insurance.claims.y[g_c.choice(insurance.claims.n_atoms, size=total,
                                              p=insurance.claims.p)]
        np.add.at(claim_sum.reshape(-1), np.repeat(np.arange(K * N), counts.reshape(-1)), sizes)
    for k in range(K):
        F[k + 1] = (F[k] + factor.drift(F[k]) * dt + dW[k] @ factor.vol.T
                    + claim_sum[k][:, None] * factor.jump)
    return FactorPaths(times, F, dW)


@dataclass(frozen=True)
class RegressionSolution:
    """Solution represented by per-step polynomial maps of the factor.

    ``value_coefs[k]`` maps ``basis[k](F)`` to the value and
    ``diffusion_coefs[k]`` to the n diffusion components. Jump components
    are differences of the value map at ``F + J(F, y_i)`` and ``F``.
    """

    kind: str
    times: np.ndarray
    bases: tuple
    value_coefs: tuple
    diffusion_coefs: tuple
    market: MarketModel = field(repr=False)
    insurance: InsuranceParams = field(repr=False)
    lower: float = 0.0
    upper: float = np.inf
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def is_random(self) -> bool:
        return True

    def _slice(self, k, F):
        F = np.asarray(F, dtype=float)
        basis = self.bases[k]
        phi = basis(F)
        value = phi @ self.value_coefs[k]
        diffusion = phi @ self.diffusion_coefs[k]
        y = self.insurance.claims.y
        shifted = F[..., None, :] + self.market.factor.jump_response(F, y)
        jump = basis(shifted) @ self.value_coefs[k] - value[..., None]
        return value, diffusion, jump

    def at(self, t, F=None):
        """Components at time ``t`` and factor state(s) ``F`` (``..., d``),
        linearly interpolated between grid nodes."""
        if F is None:
            F = self.market.factor.initial
        t = float(t)
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        w = min(max((t - self.times[k]) / (self.times[k + 1] - self.times[k]), 0.0), 1.0)
        lo = self._slice(k, F)
        if w == 0.0:
            return lo
        hi = self._slice(k + 1, F)
        return tuple((1 - w) * a + w * b for a, b in zip(lo, hi))

    def value_at(self, t, F=None):
        return self.at(t, F)[0]

    @property
    def initial_value(self) -> float:
        return float(np.asarray(self.at(0.0)[0]).ravel()[0])

    def on_paths(self, paths: FactorPaths) -> BsdeSolution:
        """Cross-sectional mean of each component along regression paths
        (for tabulation; the solution itself is state dependent)."""
        vals, diffs, jumps = [], [], []
        for k in range(len(self.times)):
            v, d, j = self._slice(k, paths.F[k])
            vals.append(v.mean()), diffs.append(d.mean(0)), jumps.append(j.mean(0))
        return BsdeSolution(self.kind, self.times, np.array(vals), np.array(diffs),
                            np.array(jumps), self.lower, self.upper, {"solver": "lsmc"})


def solve_lsmc(which: str, market: MarketModel, insurance: InsuranceParams,
               cone: ConeConstraint, settings: LsmcSettings, p2: Optional[RegressionSolution] = None,
               paths: Optional[FactorPaths] = None) -> RegressionSolution:
    """Backward regression for ``P``, ``P2``, ``Y`` or ``P1``.

    ``P1`` reads ``P2`` and its jump component; pass the ``P2`` solution
    (solved on the same settings) or it is computed first.
    """
    if which not in ("P", "P1", "P2", "Y"):
        raise ValidationError(f"unknown equation {which!r}")
    if paths is None:
        paths = simulate_factor_paths(market, insurance, settings)
    if which == "P1" and p2 is None:
        p2 = solve_lsmc("P2", market, insurance, cone, settings, paths=paths)
    factor = market.factor
    times, F, dW = paths.times, paths.F, paths.dW
    K, N = len(times) - 1, F.shape[1]
    dt, floor, ridge = settings.dt, settings.floor, settings.ridge
    y = insurance.claims.y
    n = market.n

    f = None if which == "P1" else generator(which)
    bases = [None] * (K + 1)
    vcoef = [None] * (K + 1)
    dcoef = [None] * (K + 1)
    bases[K] = PolynomialBasis(np.zeros(factor.d), np.ones(factor.d), monomial_exponents(factor.d, 0))
    vcoef[K] = np.array([1.0])
    dcoef[K] = np.zeros((1, n))
    U_next = np.ones(N)
    lo_val, hi_val = 1.0, 1.0
    n_clamped, n_checked = 0, 0

    for k in range(K - 1, -1, -1):
        Fk = F[k]
        basis = _fit_basis(Fk, settings.degree)
        Phi = basis(Fk)
        shifted = Fk[:, None, :] + factor.jump_response(Fk, y)
        Phi_shift = basis(shifted)
        cont = _regress(Phi, U_next, ridge)
        C = Phi @ cont
        dc = _regress(Phi, (U_next - C)[:, None] * dW[k] / dt, ridge)
        Delta = Phi @ dc
        sl = MarketSlice.build(market, cone, times[k], Fk)
        if which == "P1":
            P2k, _, G2k = p2._slice(k, Fk)

        coef = cont
        for _ in range(2):
            Gamma = Phi_shift @ coef - (Phi @ coef)[:, None]
            C_ok = np.maximum(C, floor)
            Gamma_ok = np.maximum(Gamma, floor - C_ok[:, None])
            if which == "P1":
                drive = driver_P1(C_ok, Delta, Gamma_ok, P2k, G2k, sl, insurance)
            else:
                drive = f(C_ok, Delta, Gamma_ok, sl, insurance)
            U = C_ok + drive * dt
            coef = _regress(Phi, U, ridge)

        U = Phi @ coef
        Gamma = Phi_shift @ coef - U[:, None]
        clamped = (U < floor) | np.any(U[:, None] + Gamma < floor, axis=1)
        n_clamped += int(clamped.sum())
        n_checked += N
        U_eval = np.maximum(U, floor)
        lo_val = min(lo_val, U_eval.min(), (U_eval[:, None] + Gamma).min())
        hi_val = max(hi_val, U_eval.max(), (U_eval[:, None] + Gamma).max())
        bases[k], vcoef[k], dcoef[k] = basis, coef, dc
        # next continuation target: the fitted value map on the paths
        U_next = U_eval

    rate = n_clamped / max(n_checked, 1)
    if rate > settings.max_clamp_rate:
        raise QualityError(f"{which}: positivity clamp rate {rate:.2e} exceeds "
                           f"{settings.max_clamp_rate:.0e}")
    m = settings.certificate_margin
    lower = max(lo_val, floor) * (1.0 - m)
    upper = hi_val * (1.0 + m)
    diagnostics = {"clamp_rate": rate, "n_paths": N, "dt": dt,
                   "degrees": [b.degree for b in bases]}
    return RegressionSolution(which, times, tuple(bases), tuple(vcoef), tuple(dcoef),
                              market, insurance, float(lower), float(upper), diagnostics)
