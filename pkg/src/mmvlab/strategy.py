"""Feedback strategies, saddle kernels, the MV frontier and optimal values.

Strategies act on raw wealth ``X`` but internally use the shifted wealth
``X + a int_t^T exp(-int_t^s r)`` that removes the reinsurance premium
drift ``a``; values are likewise expressed through the shifted endowment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bsde import minimize_G1, rho2
from .cone import ConeConstraint, FixedSigmaProjector, project_cone, rho_mmv
from .model import (GirsanovKernel, InsuranceParams, MarketModel, PositivityError,
                    ValidationError, discount_h, wealth_shift)


class DegenerateModelError(ValidationError):
    """Raised when ``P2_0 >= h_0^2``, which the theory rules out."""


@dataclass(frozen=True)
class FeedbackStrategy:
    """``rule(t, X, F) -> (pi, q, clamped)`` over arrays of wealth ``X``.

    ``pi`` has shape ``(N, m)`` (or broadcastable), ``q`` shape ``(N,)`` and
    ``clamped`` flags states where the rule had to be clamped.
    """

    rule: Callable
    family: str
    cone: Optional[ConeConstraint] = None
    target: Optional[float] = None
    name: str = ""

    def __call__(self, t, X, F=None):
        return self.rule(t, np.asarray(X, dtype=float), F)


class _PointCache:
    """Per-time memo of the state-independent inputs of a rule.

    Only used when nothing depends on the factor; with a factor the inputs
    are recomputed for each batch of states.
    """

    def __init__(self, fn, enabled, cap=200_000):
        self.fn, self.enabled, self.cap, self.memo = fn, enabled, cap, {}

    def __call__(self, t, F):
        if not self.enabled:
            return self.fn(t, F)
        key = float(t)
        hit = self.memo.get(key)
        if hit is None:
            if len(self.memo) >= self.cap:
                self.memo.clear()
            hit = self.memo[key] = self.fn(t, None)
        return hit


class _Projector:
    """Projection onto ``sigma' Pi`` at ``(t, F)``; fixed-sigma maps are cached."""

    def __init__(self, market: MarketModel, cone: ConeConstraint):
        self.market, self.cone, self.cache = market, cone, {}

    def __call__(self, t, F, v):
        mu, sigma, phi = self.market.coefficients_at(t, F)
        if sigma.ndim == 2:
            key = sigma.tobytes()
            if key not in self.cache:
                self.cache[key] = FixedSigmaProjector(sigma, self.cone)
            return phi, self.cache[key](v(phi))
        return phi, project_cone(v(phi), sigma, self.cone)


def _shift(market, insurance):
    if insurance.a == 0:
        return lambda t: 0.0
    return lambda t: float(wealth_shift(market, insurance, t))


def shifted_endowment(market: MarketModel, insurance: InsuranceParams, x: float) -> float:
    return float(x + wealth_shift(market, insurance, 0.0))


def mmv_target(Ysol, market, insurance, theta, x, F0=None) -> float:
    """``a~ = h_0 x~ + Y_0 / theta``, the wealth target of the MMV rule."""
    Y0 = float(np.asarray(Ysol.value_at(0.0, F0)).ravel()[0])
    return float(discount_h(market, 0.0)) * shifted_endowment(market, insurance, x) + Y0 / theta


def mmv_feedback(Ysol, market: MarketModel, insurance: InsuranceParams, cone: ConeConstraint,
                 theta: float, x: float) -> FeedbackStrategy:
    """Optimal MMV rule ``pi = m beta``, ``q = m rho`` with multiplier
    ``m = (a~ - h X~) / (h Y)`` clamped at 0 once wealth overshoots the target."""
    if theta <= 0:
        raise ValidationError("theta must be positive")
    target = mmv_target(Ysol, market, insurance, theta, x)
    proj = _Projector(market, cone)
    shift = _shift(market, insurance)

    def inputs(t, F):
        Y, Z, V = Ysol.at(t, F)
        if np.any(np.asarray(Y) <= 0):
            raise PositivityError("Y must stay positive")
        # Proj(phi Y - Z) = Y Proj(phi - Z/Y)
        _, res = proj(t, F, lambda phi: phi - np.asarray(Z) / np.asarray(Y)[..., None])
        rho = rho_mmv(Y, V, insurance) if insurance.has_jumps else np.zeros_like(Y)
        h = float(discount_h(market, t))
        return np.asarray(Y), res.beta, np.asarray(rho), h, shift(t)

    cached = _PointCache(inputs, enabled=not Ysol.is_random)

    def rule(t, X, F=None):
        Y, beta_unit, rho, h, s = cached(t, F)
        mult = (target - h * (X + s)) / (h * Y)
        clamped = mult < 0
        mult = np.maximum(mult, 0.0)
        # beta_unit is for phi - Z/Y, so multiply by Y to get the witness of Proj(phi Y - Z)
        return mult[..., None] * (Y[..., None] * beta_unit), mult * rho, clamped

    return FeedbackStrategy(rule, "MMV", cone, target, "mmv-optimal")


def mmv_kernels(Ysol, market: MarketModel, insurance: InsuranceParams,
                cone: ConeConstraint) -> GirsanovKernel:
    """Saddle kernels ``eta = -(Z + Proj(Y phi - Z))/Y`` and
    ``psi(y) = -(V(y) - rho y)/(Y + V(y))``, with floor ``c1/c2``."""
    floor = Ysol.lower / Ysol.upper
    if not floor > 0:
        raise PositivityError("kernel floor c1/c2 must be positive")
    proj = _Projector(market, cone)
    y = insurance.claims.y

    def parts(t, F):
        Y, Z, V = Ysol.at(t, F)
        Y, Z = np.asarray(Y), np.asarray(Z)
        _, res = proj(t, F, lambda phi: phi - Z / Y[..., None])
        eta = -(Z / Y[..., None] + res.xi)
        if insurance.has_jumps:
            rho = rho_mmv(Y, V, insurance)
            psi = -(V - rho[..., None] * y) / (Y[..., None] + V)
        else:
            psi = np.zeros(np.shape(Y) + (insurance.claims.n_atoms,))
        return eta, psi

    cached = _PointCache(parts, enabled=not Ysol.is_random)
    return GirsanovKernel(lambda t, F=None: cached(t, F)[0],
                          lambda t, F=None: cached(t, F)[1], floor, "saddle")


def mv_feedback(P1sol, P2sol, market: MarketModel, insurance: InsuranceParams,
                cone: ConeConstraint, zeta: float) -> FeedbackStrategy:
    """Optimal rule of the Lagrange problem with parameter ``zeta``:
    ``pi = (X~ - zeta/h)^+ xi_1 + (X~ - zeta/h)^- xi_2`` and the same for ``q``."""
    proj = _Projector(market, cone)
    shift = _shift(market, insurance)

    def inputs(t, F):
        P1, D1, G1 = P1sol.at(t, F)
        P2, D2, G2 = P2sol.at(t, F)
        P1, P2 = np.asarray(P1), np.asarray(P2)
        _, r1 = proj(t, F, lambda phi: -phi - np.asarray(D1) / P1[..., None])
        _, r2 = proj(t, F, lambda phi: phi + np.asarray(D2) / P2[..., None])
        rho1, _ = minimize_G1(P1, G1, P2, G2, insurance)
        return r1.beta, r2.beta, rho1, rho2(P2, G2, insurance), float(discount_h(market, t)), shift(t)

    cached = _PointCache(inputs, enabled=not (P1sol.is_random or P2sol.is_random))

    def rule(t, X, F=None):
        b1, b2, rho1, rho2_, h, s = cached(t, F)
        gap = X + s - zeta / h
        up, down = np.maximum(gap, 0.0), np.maximum(-gap, 0.0)
        pi = up[..., None] * b1 + down[..., None] * b2
        return pi, up * rho1 + down * rho2_, np.zeros(np.shape(X), dtype=bool)

    return FeedbackStrategy(rule, "MV", cone, zeta, f"mv(zeta={zeta:.6g})")


# ---------------------------------------------------------------------------
# frontier and values

@dataclass(frozen=True)
class FrontierPoint:
    """``F(z)`` and its maximiser ``zeta(z)``; ``zeta`` is None on the
    unattainable branch, where ``F = +inf``."""

    z: float
    F: float
    zeta: Optional[float]
    branch: str

    @property
    def attainable(self) -> bool:
        return self.zeta is not None


def j_value(P1_0, P2_0, h0, x, z, zeta):
    """Optimal value of the Lagrange problem with parameters ``(z, zeta)``."""
    if min(P1_0, P2_0, h0) <= 0:
        raise ValidationError("P1_0, P2_0 and h_0 must be positive")
    gap = x - np.asarray(zeta, dtype=float) / h0
    return P1_0 * np.maximum(gap, 0.0) ** 2 + P2_0 * np.maximum(-gap, 0.0) ** 2 \
        - (np.asarray(zeta) - z) ** 2


@dataclass(frozen=True)
class Frontier:
    """Dual objects of the mean–variance problem for given ``P1_0, P2_0``."""

    P1_0: float
    P2_0: float
    h0: float
    x: float
    theta: float
    rtol: float = 1e-9

    def __post_init__(self):
        if not 0 < self.P2_0 < self.h0 ** 2:
            raise DegenerateModelError(
                f"need 0 < P2_0 < h0^2, got P2_0={self.P2_0:.12g}, h0^2={self.h0 ** 2:.12g}")
        if not 0 < self.P1_0 <= self.h0 ** 2 * (1 + self.rtol):
            raise DegenerateModelError("need 0 < P1_0 <= h0^2")

    @property
    def upper_branch_open(self) -> bool:
        """False when ``P1_0 = h0^2`` (within ``rtol``): targets below
        ``x h0`` are then unattainable."""
        return self.P1_0 < self.h0 ** 2 * (1 - self.rtol)

    def __call__(self, z: float) -> FrontierPoint:
        x, h0, P1, P2 = self.x, self.h0, self.P1_0, self.P2_0
        base = x * h0
        if z == base:
            return FrontierPoint(z, 0.0, base, "at")
        if z > base:
            return FrontierPoint(z, P2 * (z - base) ** 2 / (h0 ** 2 - P2),
                                 (h0 ** 2 * z - x * P2 * h0) / (h0 ** 2 - P2), "above")
        if not self.upper_branch_open:
            return FrontierPoint(z, np.inf, None, "unattainable")
        return FrontierPoint(z, P1 * (z - base) ** 2 / (h0 ** 2 - P1),
                             (h0 ** 2 * z - x * P1 * h0) / (h0 ** 2 - P1), "below")

    @property
    def z_hat(self) -> float:
        return self.x * self.h0 + (self.h0 ** 2 / self.P2_0 - 1.0) / self.theta

    @property
    def zeta_hat(self) -> float:
        return self.x * self.h0 + self.h0 ** 2 / (self.theta * self.P2_0)

    @property
    def value(self) -> float:
        return self.x * self.h0 + (self.h0 ** 2 / self.P2_0 - 1.0) / (2.0 * self.theta)

    def sample(self, zs) -> list:
        return [self(float(z)) for z in zs]

    def to_csv(self, zs) -> str:
        lines = ["z,F,zeta,branch"]
        for p in self.sample(zs):
            zeta = "" if p.zeta is None else repr(p.zeta)
            lines.append(f"{p.z!r},{p.F!r},{zeta},{p.branch}")
        return "\n".join(lines) + "\n"


def mv_frontier(P1_0, P2_0, h0, x, theta) -> Frontier:
    return Frontier(float(P1_0), float(P2_0), float(h0), float(x), float(theta))


def mmv_value(Y0: float, h0: float, x: float, theta: float) -> float:
    """``x h0 + (Y0 - 1) / (2 theta)`` (``x`` is the shifted endowment)."""
    return x * h0 + (Y0 - 1.0) / (2.0 * theta)


# ---------------------------------------------------------------------------
# simple strategies

def constant_strategy(pi, q, cone: Optional[ConeConstraint] = None, name="constant") -> FeedbackStrategy:
    pi = np.asarray(pi, dtype=float)
    q = float(q)
    if q < 0:
        raise ValidationError("q must be non-negative")
    if cone is not None and not cone.contains(pi):
        raise ValidationError(f"portfolio {pi.tolist()} is outside the cone")

    def rule(t, X, F=None):
        n = np.shape(X)
        return np.broadcast_to(pi, n + pi.shape), np.full(n, q), np.zeros(n, dtype=bool)

    return FeedbackStrategy(rule, "custom", cone, None, name)


def scaled_strategy(base: FeedbackStrategy, c: float, name=None) -> FeedbackStrategy:
    """``c`` times the portfolio and reinsurance of ``base`` (cone preserving)."""
    if c < 0:
        raise ValidationError("scale must be non-negative")

    def rule(t, X, F=None):
        pi, q, cl = base.rule(t, X, F)
        return c * pi, c * q, cl

    return FeedbackStrategy(rule, base.family, base.cone, base.target, name or f"{c:g}x {base.name}")


def mask_strategy(base: FeedbackStrategy, keep_pi: bool, keep_q: bool, name=None) -> FeedbackStrategy:
    """``base`` with its portfolio or its reinsurance switched off."""
    def rule(t, X, F=None):
        pi, q, cl = base.rule(t, X, F)
        return (pi if keep_pi else np.zeros_like(pi)), (q if keep_q else np.zeros_like(q)), cl

    return FeedbackStrategy(rule, base.family, base.cone, base.target,
                            name or f"{base.name}[{'pi' if keep_pi else ''}{'q' if keep_q else ''}]")
