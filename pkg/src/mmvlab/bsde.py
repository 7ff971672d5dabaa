"""Drivers, solution containers and the deterministic-coefficient solver.

Four backward equations are handled, all written as ``dU = -f dt + ...``:

* ``P``  : the MMV equation in its "P" form (no interest term),
* ``P2`` : the lower-branch mean–variance equation,
* ``P1`` : the upper-branch mean–variance equation (couples to ``P2``),
* ``Y``  : the MMV equation itself, related to ``P`` by ``Y = 1/P``.

With deterministic coefficients the martingale parts vanish and each
equation is a scalar backward ODE, integrated here with classical RK4.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cone import ConeConstraint, FixedSigmaProjector, project_cone
from .model import (InsuranceParams, MarketModel, PositivityError, ValidationError,
                    discount_h)

KINDS = ("P", "P1", "P2", "Y")


class SolverError(RuntimeError):
    """Raised when a backward solver cannot produce a valid solution."""


# --------------------------------------------------------------------------
# market slices and drivers

@dataclass(frozen=True)
class MarketSlice:
    """Coefficients at one (t, F): volatility, ``phi``, short rate and a
    projector onto ``sigma' Pi``."""

    sigma: np.ndarray
    phi: np.ndarray
    r: float
    project: Callable

    @classmethod
    def build(cls, market: MarketModel, cone: ConeConstraint, t, F=None):
        _, sigma, phi = market.coefficients_at(t, F)
        r = float(market.rate(t))
        if sigma.ndim == 2:
            proj = FixedSigmaProjector(sigma, cone)
        else:
            proj = lambda v, s=sigma: project_cone(v, s, cone)
        return cls(sigma, phi, r, proj)


def _cone_inf(v, sl: MarketSlice):
    # inf_{pi in Pi} |sigma'pi|^2 - 2 (sigma'pi)'v, attained at the projection
    xi = sl.project(v).xi
    return np.sum(xi * xi, axis=-1) - 2.0 * np.sum(xi * v, axis=-1)


def _check_positive(U, jump, what):
    if np.any(np.asarray(U) <= 0) or np.any(np.asarray(U)[..., None] + jump <= 0):
        raise PositivityError(f"{what}: need value > 0 and value + jump > 0")


def g2_star(P2, Gamma2, insurance: InsuranceParams):
    """``-[(P b - sum Gamma y lam p)^+]^2 / sum (P + Gamma) y^2 lam p``."""
    P2 = np.asarray(P2, dtype=float)
    if not insurance.has_jumps:
        return np.zeros_like(P2)
    Gamma2 = np.broadcast_to(np.asarray(Gamma2, dtype=float),
                             P2.shape + (insurance.claims.n_atoms,))
    _check_positive(P2, Gamma2, "G2*")
    y, w = insurance.claims.y, insurance.jump_weights
    num = np.maximum(P2 * insurance.b - np.sum(Gamma2 * y * w, axis=-1), 0.0)
    den = np.sum((P2[..., None] + Gamma2) * y ** 2 * w, axis=-1)
    return -num ** 2 / den


def rho2(P2, Gamma2, insurance: InsuranceParams):
    """Reinsurance ratio on the below-target branch."""
    P2 = np.asarray(P2, dtype=float)
    if not insurance.has_jumps:
        return np.zeros_like(P2)
    Gamma2 = np.broadcast_to(np.asarray(Gamma2, dtype=float),
                             P2.shape + (insurance.claims.n_atoms,))
    y, w = insurance.claims.y, insurance.jump_weights
    num = np.maximum(P2 * insurance.b - np.sum(Gamma2 * y * w, axis=-1), 0.0)
    den = np.sum((P2[..., None] + Gamma2) * y ** 2 * w, axis=-1)
    return num / den


def f_star(P, Delta, sl: MarketSlice, side: int):
    """``F_1^*`` (side=-1) or ``F_2^*`` (side=+1) via the cone projection.

    inf_v P|sigma'v|^2 - 2 side v'(P mu + sigma Delta)
        = P * inf |sigma'v|^2 - 2 (sigma'v)'(side (phi + Delta/P)).
    """
    P = np.asarray(P, dtype=float)
    v = side * (sl.phi + np.asarray(Delta) / P[..., None])
    return P * _cone_inf(v, sl)


def driver_P(P, Delta, Gamma, sl: MarketSlice, insurance: InsuranceParams):
    P = np.asarray(P, dtype=float)
    if np.any(P <= 0):
        raise PositivityError("driver of P needs P > 0")
    return f_star(P, Delta, sl, +1) + g2_star(P, Gamma, insurance)


def driver_P2(P2, Delta2, Gamma2, sl: MarketSlice, insurance: InsuranceParams):
    return 2.0 * sl.r * np.asarray(P2) + driver_P(P2, Delta2, Gamma2, sl, insurance)


def g1(u, P1, Gamma1, P2, Gamma2, insurance: InsuranceParams):
    """The reinsurance objective on the above-target branch (vectorised in u)."""
    u = np.asarray(u, dtype=float)
    y, w = insurance.claims.y, insurance.jump_weights
    lin = 1.0 - u[..., None] * y
    a = np.asarray(P1)[..., None] + Gamma1
    c = np.asarray(P2)[..., None] + Gamma2
    val = np.sum((a * (np.maximum(lin, 0.0) ** 2 - 1.0)
                  + c * np.maximum(-lin, 0.0) ** 2) * w, axis=-1)
    return val + 2.0 * u * np.asarray(P1) * (insurance.b + insurance.intensity * insurance.claims.mean)


def g1_slope(u, P1, Gamma1, P2, Gamma2, insurance: InsuranceParams):
    # G1 is C^1: both squared hinges have zero slope at the kink
    u = np.asarray(u, dtype=float)
    y, w = insurance.claims.y, insurance.jump_weights
    lin = 1.0 - u[..., None] * y
    a = np.asarray(P1)[..., None] + Gamma1
    c = np.asarray(P2)[..., None] + Gamma2
    val = np.sum((-2.0 * y * a * np.maximum(lin, 0.0)
                  + 2.0 * y * c * np.maximum(-lin, 0.0)) * w, axis=-1)
    return val + 2.0 * np.asarray(P1) * (insurance.b + insurance.intensity * insurance.claims.mean)


def _g1_inputs(P1, Gamma1, P2, Gamma2, insurance):
    P1 = np.asarray(P1, dtype=float)
    shape = np.broadcast_shapes(P1.shape, np.shape(P2))
    n_atoms = insurance.claims.n_atoms
    G1b = np.broadcast_to(np.asarray(Gamma1, dtype=float), shape + (n_atoms,))
    G2b = np.broadcast_to(np.asarray(Gamma2, dtype=float), shape + (n_atoms,))
    P1b = np.broadcast_to(P1, shape)
    P2b = np.broadcast_to(np.asarray(P2, dtype=float), shape)
    _check_positive(P1b, G1b, "G1 (P1 side)")
    _check_positive(P2b, G2b, "G1 (P2 side)")
    return shape, (P1b, G1b, P2b, G2b, insurance)


def minimize_G1(P1, Gamma1, P2, Gamma2, insurance: InsuranceParams, method: str = "exact",
                tol: float = 1e-10, max_doublings: int = 60):
    """Minimise ``G1`` over ``u >= 0``; returns ``(rho1, G1*)``.

    ``G1`` is convex and continuously differentiable, so the minimiser is
    the root of its slope, and a non-negative slope at 0 gives exactly 0.

    ``method="exact"`` uses that the slope is piecewise linear with kinks
    at ``u = 1/y_i``: it finds the segment where the slope changes sign
    and solves the linear equation there. ``method="ternary"`` brackets
    the minimiser in ``[0, 2/y_min]`` (doubling the right end until the
    slope there is non-negative) and runs ternary search on the values
    down to ``tol``; it is limited by rounding of ``G1`` near its flat
    minimum to roughly ``sqrt(machine eps)`` relative accuracy.
    """
    if method not in ("exact", "ternary"):
        raise ValidationError(f"unknown G1 method {method!r}")
    if not insurance.has_jumps:
        shape = np.broadcast_shapes(np.shape(P1), np.shape(P2))
        return np.zeros(shape), np.zeros(shape)
    shape, args = _g1_inputs(P1, Gamma1, P2, Gamma2, insurance)
    if not np.any(args[1] > 0):
        # slope at 0 is 2 P1 b - 2 sum y Gamma1 lam p > 0, so the minimiser is 0
        return np.zeros(shape), np.zeros(shape)
    interior = g1_slope(np.zeros(shape), *args) < 0
    if method == "exact":
        rho = _g1_root_exact(*args)
    else:
        rho = _g1_root_ternary(shape, interior, args, tol, max_doublings)
    rho = np.where(interior, rho, 0.0)
    return rho, np.where(interior, g1(rho, *args), 0.0)


def _g1_root_exact(P1, Gamma1, P2, Gamma2, insurance):
    order = np.argsort(-insurance.claims.y)
    y = insurance.claims.y[order]
    w = insurance.jump_weights[order]
    a = (P1[..., None] + Gamma1[..., order]) * w
    c = (P2[..., None] + Gamma2[..., order]) * w
    const = 2.0 * P1 * (insurance.b + insurance.intensity * insurance.claims.mean)
    zero = np.zeros(a.shape[:-1] + (1,))
    # segment j: atoms i < j have u*y_i >= 1, the others do not
    tail = lambda v: np.concatenate([np.cumsum(v[..., ::-1], -1)[..., ::-1], zero], -1)
    head = lambda v: np.concatenate([zero, np.cumsum(v, -1)], -1)
    alpha = const[..., None] - 2.0 * tail(y * a) - 2.0 * head(y * c)
    beta = 2.0 * tail(y ** 2 * a) + 2.0 * head(y ** 2 * c)
    kinks = 1.0 / y
    # slope at the right end of segments 0..A-1 (continuous across kinks)
    right = alpha[..., :-1] + beta[..., :-1] * kinks
    seg = np.sum(right < 0, axis=-1, keepdims=True)
    al = np.take_along_axis(alpha, seg, -1)[..., 0]
    be = np.take_along_axis(beta, seg, -1)[..., 0]
    return np.maximum(-al / be, 0.0)


def _g1_root_ternary(shape, interior, args, tol, max_doublings):
    insurance = args[-1]
    hi = np.full(shape, 2.0 / insurance.claims.y.min())
    for _ in range(max_doublings):
        short = interior & (g1_slope(hi, *args) < 0)
        if not np.any(short):
            break
        hi = np.where(short, 2.0 * hi, hi)
    else:
        raise SolverError("G1 minimiser could not be bracketed")
    lo = np.zeros(shape)
    while np.max(hi - lo) > tol:
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        left = g1(m1, *args) <= g1(m2, *args)
        lo = np.where(left, lo, m1)
        hi = np.where(left, m2, hi)
        # values tie once they agree to rounding; stop shrinking there
        if np.all(np.abs(g1(m1, *args) - g1(m2, *args)) == 0.0):
            break
    return 0.5 * (lo + hi)


def driver_P1(P1, Delta1, Gamma1, P2, Gamma2, sl: MarketSlice, insurance: InsuranceParams):
    P1 = np.asarray(P1, dtype=float)
    if np.any(P1 <= 0):
        raise PositivityError("driver of P1 needs P1 > 0")
    _, g1star = minimize_G1(P1, Gamma1, P2, Gamma2, insurance)
    return 2.0 * sl.r * P1 + f_star(P1, Delta1, sl, -1) + g1star


def driver_Y(Y, Z, V, sl: MarketSlice, insurance: InsuranceParams):
    """Drift coefficient of ``dY`` (the braces of the Y equation)."""
    Y = np.asarray(Y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if np.any(Y <= 0):
        raise PositivityError("driver of Y needs Y > 0")
    # Proj(phi Y - Z) = Y Proj(phi - Z/Y) by conic homogeneity
    out = Y * _cone_inf(sl.phi - Z / Y[..., None], sl) + np.sum(Z * Z, axis=-1) / Y
    if insurance.has_jumps:
        V = np.broadcast_to(np.asarray(V, dtype=float), Y.shape + (insurance.claims.n_atoms,))
        _check_positive(Y, V, "driver of Y")
        y, w = insurance.claims.y, insurance.jump_weights
        tot = Y[..., None] + V
        num = np.maximum(np.sum(V / tot * y * w, axis=-1) + insurance.b, 0.0)
        den = np.sum(y ** 2 * w / tot, axis=-1)
        out = out - num ** 2 / den + np.sum(V ** 2 / tot * w, axis=-1)
    return out


def generator(kind: str):
    """``f`` with ``dU = -f dt + ...`` for a single-equation kind."""
    if kind == "P":
        return driver_P
    if kind == "P2":
        return driver_P2
    if kind == "Y":
        return lambda U, D, G, sl, ins: -driver_Y(U, D, G, sl, ins)
    raise ValidationError(f"no single-equation generator for kind {kind!r}")


# --------------------------------------------------------------------------
# solution containers and transforms

def p_to_y_values(P, Delta, Gamma):
    """``(1/P, -Delta/P^2, 1/(P+Gamma) - 1/P)``; the map is its own inverse."""
    P = np.asarray(P, dtype=float)
    _check_positive(P, Gamma, "P -> Y transform")
    return 1.0 / P, -np.asarray(Delta) / P[..., None] ** 2, \
        1.0 / (P[..., None] + Gamma) - 1.0 / P[..., None]


def p2_to_y_values(P2, Delta2, Gamma2, h):
    P2 = np.asarray(P2, dtype=float)
    _check_positive(P2, Gamma2, "P2 -> Y transform")
    h2 = np.asarray(h, dtype=float) ** 2
    return h2 / P2, -h2[..., None] * np.asarray(Delta2) / P2[..., None] ** 2, \
        h2[..., None] / (P2[..., None] + Gamma2) - h2[..., None] / P2[..., None]


@dataclass(frozen=True)
class BsdeSolution:
    """A solution tabulated on a time grid.

    ``value`` (K+1), ``diffusion`` (K+1, n) and ``jump`` (K+1, n_atoms)
    are the three components; ``lower``/``upper`` certify
    ``lower <= value, value + jump <= upper``.
    """

    kind: str
    times: np.ndarray
    value: np.ndarray
    diffusion: np.ndarray
    jump: np.ndarray
    lower: float
    upper: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown solution kind {self.kind!r}")

    @classmethod
    def from_arrays(cls, kind, times, value, diffusion, jump, meta=None):
        total = value[:, None] + jump
        lower = float(min(value.min(), total.min()))
        upper = float(max(value.max(), total.max()))
        return cls(kind, np.asarray(times), value, diffusion, jump, lower, upper, meta or {})

    @property
    def is_random(self) -> bool:
        return False

    @property
    def initial_value(self) -> float:
        return float(self.value[0])

    def value_at(self, t, F=None):
        return self.at(t, F)[0]

    def at(self, t, F=None):
        """Linear interpolation in ``t``; ``F`` is ignored."""
        t = float(t)
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        t0, t1 = self.times[k], self.times[k + 1]
        w = min(max((t - t0) / (t1 - t0), 0.0), 1.0)
        if w == 0.0:
            return self.value[k], self.diffusion[k], self.jump[k]
        if w == 1.0:
            return self.value[k + 1], self.diffusion[k + 1], self.jump[k + 1]
        lerp = lambda a: (1 - w) * a[k] + w * a[k + 1]
        return lerp(self.value), lerp(self.diffusion), lerp(self.jump)

    def satisfies_certificates(self, tol=0.0) -> bool:
        total = self.value[:, None] + self.jump
        return bool(self.lower > 0 and self.value.min() >= self.lower - tol
                    and total.min() >= self.lower - tol and total.max() <= self.upper + tol
                    and self.value.max() <= self.upper + tol)

    def to_csv(self, path=None, provenance: Optional[dict] = None) -> str:
        """Write ``t, value, diffusion_*, jump_*`` with a ``# key=value`` header;
        ``provenance`` entries (no spaces in values) are added to the header."""
        n, na = self.diffusion.shape[1], self.jump.shape[1]
        cols = ["t", "value"] + [f"diffusion_{i}" for i in range(n)] + [f"jump_{i}" for i in range(na)]
        data = np.column_stack([self.times, self.value, self.diffusion, self.jump])
        buf = io.StringIO()
        extra = "".join(f" {k}={v}" for k, v in (provenance or {}).items())
        buf.write(f"# kind={self.kind} lower={self.lower!r} upper={self.upper!r}{extra}\n")
        buf.write(",".join(cols) + "\n")
        for row in data:
            buf.write(",".join(repr(float(x)) for x in row) + "\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "BsdeSolution":
        text = open(source).read() if not str(source).startswith("#") else source
        lines = text.splitlines()
        meta = dict(tok.split("=", 1) for tok in lines[0].lstrip("# ").split())
        cols = lines[1].split(",")
        data = np.array([[float(x) for x in ln.split(",")] for ln in lines[2:] if ln.strip()])
        n = sum(c.startswith("diffusion_") for c in cols)
        extra = {k: v for k, v in meta.items() if k not in ("kind", "lower", "upper")}
        return cls(meta["kind"], data[:, 0], data[:, 1], data[:, 2:2 + n], data[:, 2 + n:],
                   float(meta["lower"]), float(meta["upper"]), extra)


@dataclass(frozen=True)
class TransformedSolution:
    """Pointwise transform of another solution, evaluated lazily."""

    kind: str
    base: object
    transform: Callable
    lower: float
    upper: float

    @property
    def is_random(self) -> bool:
        return self.base.is_random

    @property
    def times(self):
        return self.base.times

    def at(self, t, F=None):
        return self.transform(t, *self.base.at(t, F))

    def value_at(self, t, F=None):
        return self.at(t, F)[0]

    @property
    def initial_value(self) -> float:
        return float(np.asarray(self.at(0.0)[0]).ravel()[0])


def p_to_y(sol):
    """Map a solution of the P equation to the MMV equation ``Y``."""
    if sol.kind != "P":
        raise ValidationError(f"p_to_y expects a P solution, got {sol.kind!r}")
    lower, upper = 1.0 / sol.upper, 1.0 / sol.lower
    if isinstance(sol, BsdeSolution):
        Y, Z, V = p_to_y_values(sol.value, sol.diffusion, sol.jump)
        return BsdeSolution("Y", sol.times, Y, Z, V, lower, upper, dict(sol.meta, source="P"))
    return TransformedSolution("Y", sol, lambda t, *c: p_to_y_values(*c), lower, upper)


def y_to_p(sol):
    if sol.kind != "Y":
        raise ValidationError(f"y_to_p expects a Y solution, got {sol.kind!r}")
    lower, upper = 1.0 / sol.upper, 1.0 / sol.lower
    if isinstance(sol, BsdeSolution):
        P, D, G = p_to_y_values(sol.value, sol.diffusion, sol.jump)
        return BsdeSolution("P", sol.times, P, D, G, lower, upper, dict(sol.meta))
    return TransformedSolution("P", sol, lambda t, *c: p_to_y_values(*c), lower, upper)


def y_from_p2(sol, market: MarketModel):
    """``Y = h^2 / P2`` (and the matching Z, V)."""
    if sol.kind != "P2":
        raise ValidationError(f"y_from_p2 expects a P2 solution, got {sol.kind!r}")
    h = discount_h(market, sol.times)
    lower = float(h.min() ** 2 / sol.upper)
    upper = float(h.max() ** 2 / sol.lower)
    if isinstance(sol, BsdeSolution):
        Y, Z, V = p2_to_y_values(sol.value, sol.diffusion, sol.jump, h)
        return BsdeSolution("Y", sol.times, Y, Z, V, lower, upper, dict(sol.meta, source="P2"))
    return TransformedSolution(
        "Y", sol, lambda t, *c: p2_to_y_values(*c, discount_h(market, t)), lower, upper)


# --------------------------------------------------------------------------
# deterministic coefficients: backward RK4

class _SliceCache:
    """Market slices keyed by coefficient interval, with a projection memo."""

    def __init__(self, market, cone):
        self.market, self.cone = market, cone
        self._slices = {}

    def __call__(self, t):
        c = self.market.coefficients
        key = (int(self.market.rate.index(t)), int(c.mu.index(t)), int(c.sigma.index(t)))
        if key not in self._slices:
            base = MarketSlice.build(self.market, self.cone, t)
            memo = {}

            def project(v, _p=base.project):
                k = np.asarray(v, dtype=float).tobytes()
                if k not in memo:
                    if len(memo) > 64:
                        memo.clear()
                    memo[k] = _p(v)
                return memo[k]

            self._slices[key] = MarketSlice(base.sigma, base.phi, base.r, project)
        return self._slices[key]


def _rk4_backward(rhs_at, u_T, times, floor, max_halvings=8):
    """Integrate ``du/dt = rhs(u)`` from ``times[-1]`` down to ``times[0]``,
    where ``rhs = rhs_at(t_mid)`` is frozen over each step.

    The coefficients are frozen at the step midpoint, which is exact for
    schedules whose breakpoints lie on the grid.
    """
    out = np.empty((len(times),) + np.shape(u_T))
    out[-1] = u_T
    u = np.asarray(u_T, dtype=float)
    for k in range(len(times) - 2, -1, -1):
        t0, t1 = times[k], times[k + 1]
        rhs = rhs_at(0.5 * (t0 + t1))
        for depth in range(max_halvings + 1):
            n_sub = 2 ** depth
            h = -(t1 - t0) / n_sub
            v = u
            ok = True
            for _ in range(n_sub):
                k1 = rhs(v)
                k2 = rhs(v + 0.5 * h * k1)
                k3 = rhs(v + 0.5 * h * k2)
                k4 = rhs(v + h * k3)
                v = v + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
                if np.any(v <= floor):
                    ok = False
                    break
            if ok:
                break
        else:
            raise PositivityError(f"positivity lost near t={t0:.6g} after step halving")
        u = v
        out[k] = u
    return out


def solve_deterministic(which: str, market: MarketModel, insurance: InsuranceParams,
                        cone: ConeConstraint, dt: float, floor: float = 0.0) -> BsdeSolution:
    """Solve one of the four equations when the coefficients are deterministic.

    The diffusion and jump components are identically zero, so each
    equation reduces to a backward ODE with terminal value 1. ``P1`` is
    integrated jointly with ``P2`` because its driver reads ``P2``.
    """
    if market.is_random:
        raise ValidationError("solve_deterministic needs deterministic coefficients")
    if which not in KINDS:
        raise ValidationError(f"unknown equation {which!r}")
    times = market.grid(dt)
    slices = _SliceCache(market, cone)
    n, na = market.n, insurance.claims.n_atoms
    zD, zG = np.zeros(n), np.zeros(na)
    one = np.ones(1)

    # every driver is positively homogeneous of degree one in (U, Delta, Gamma),
    # so with zero martingale parts the slope is linear in U: f(u) = u f(1)
    if which == "P1":
        def unit_slope(sl):
            return -np.array([driver_P2(one, zD, zG, sl, insurance)[0],
                              driver_P1(one, zD, zG, one, zG, sl, insurance)[0]])
        u_T = np.array([1.0, 1.0])
    else:
        f = generator(which)

        def unit_slope(sl):
            return -float(f(one, zD, zG, sl, insurance)[0])
        u_T = 1.0

    slopes = {}

    def rhs_at(t):
        sl = slices(t)
        if id(sl) not in slopes:
            slopes[id(sl)] = unit_slope(sl)
        k = slopes[id(sl)]
        return lambda u: u * k

    values = _rk4_backward(rhs_at, u_T, times, floor)
    if which == "P1":
        values = values[:, 1]

    K = len(times)
    return BsdeSolution.from_arrays(which, times, values, np.zeros((K, n)), np.zeros((K, na)),
                                    meta={"solver": "rk4", "dt": dt})
