"""Domain types for the Cramér–Lundberg investment-reinsurance model.

Claims are finite discrete laws, so every integral against the claim
measure is an exact finite sum. Market coefficients are either
piecewise-constant schedules or bounded maps of an Ornstein–Uhlenbeck
factor that can react to claims.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np


class ValidationError(ValueError):
    """Raised when a model component violates its invariants."""


class PositivityError(ArithmeticError):
    """Raised when a quantity that must stay strictly positive does not."""


def _as_tuple(a) -> tuple:
    return tuple(np.asarray(a, dtype=float).tolist())


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous piecewise-constant function of time.

    ``times`` holds the breakpoints ``0 = t_0 < ... < t_J = T``; ``values[j]``
    applies on ``[t_j, t_{j+1})`` (the last interval also covers ``T``).
    Values may be scalars, vectors or matrices.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or len(times) < 2:
            raise ValidationError("need at least two breakpoints")
        if np.any(np.diff(times) <= 0):
            raise ValidationError("breakpoints must be strictly increasing")
        if values.shape[0] != len(times) - 1:
            raise ValidationError(
                f"{len(times) - 1} intervals but {values.shape[0]} values")
        if not np.all(np.isfinite(values)):
            raise ValidationError("non-finite schedule values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value, horizon: float) -> "PiecewiseConstant":
        return cls(np.array([0.0, horizon]), np.asarray(value, dtype=float)[None])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def index(self, t):
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.clip(idx, 0, len(self.values) - 1)

    def __call__(self, t):
        return self.values[self.index(t)]

    def integral(self, t0, t1):
        """Exact integral over ``[t0, t1]`` (vectorised in ``t0``/``t1``)."""
        cum = np.concatenate([[0.0], np.cumsum(
            self.values.reshape(len(self.values), -1)[:, 0] * np.diff(self.times))])

        def antiderivative(t):
            t = np.asarray(t, dtype=float)
            j = self.index(t)
            return cum[j] + self.values.reshape(len(self.values), -1)[j, 0] * (t - self.times[j])

        return antiderivative(t1) - antiderivative(t0)


@dataclass(frozen=True)
class ClaimDistribution:
    """Finite claim-size law with atoms ``sizes`` and weights ``probs``."""

    sizes: tuple
    probs: tuple
    y_max: Optional[float] = None

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=float).ravel()
        probs = np.asarray(self.probs, dtype=float).ravel()
        if sizes.size == 0:
            raise ValidationError("claim distribution has no atoms")
        if sizes.shape != probs.shape:
            raise ValidationError("sizes and probs differ in length")
        if np.any(probs <= 0):
            raise ValidationError("atom probabilities must be positive")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValidationError(f"probabilities sum to {probs.sum():.15g}, not 1")
        y_max = float(sizes.max()) if self.y_max is None else float(self.y_max)
        if np.any(sizes <= 0) or np.any(sizes > y_max):
            raise ValidationError("claim sizes must lie in (0, y_max]")
        object.__setattr__(self, "sizes", _as_tuple(sizes))
        object.__setattr__(self, "probs", _as_tuple(probs))
        object.__setattr__(self, "y_max", y_max)

    @classmethod
    def from_atoms(cls, atoms: Sequence[tuple], y_max=None) -> "ClaimDistribution":
        atoms = list(atoms)
        if not atoms:
            raise ValidationError("claim distribution has no atoms")
        sizes, probs = zip(*atoms)
        return cls(sizes, probs, y_max)

    @property
    def y(self) -> np.ndarray:
        return np.asarray(self.sizes)

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.probs)

    @property
    def n_atoms(self) -> int:
        return len(self.sizes)

    @property
    def mean(self) -> float:
        return float(self.y @ self.p)

    @property
    def second_moment(self) -> float:
        return float(self.y ** 2 @ self.p)


def claim_moments(dist: ClaimDistribution) -> tuple[float, float]:
    """Return ``(b_Y, sigma_Y^2)``: first and second *raw* moments."""
    return dist.mean, dist.second_moment


@dataclass(frozen=True)
class InsuranceParams:
    """Claim intensity, safety loadings and the claim law.

    ``b`` is the excess premium earned per unit of retained risk and ``a``
    the (non-positive) premium drift lost to the reinsurer's higher loading.
    """

    intensity: float
    loading: float
    reinsurer_loading: float
    claims: ClaimDistribution

    def __post_init__(self):
        if self.intensity < 0:
            raise ValidationError("claim intensity must be non-negative")
        if self.loading <= 0:
            raise ValidationError("insurer safety loading must be positive")
        if self.reinsurer_loading < self.loading:
            raise ValidationError("reinsurer loading must be >= insurer loading")

    @property
    def b(self) -> float:
        return self.intensity * self.claims.mean * self.reinsurer_loading

    @property
    def a(self) -> float:
        return self.intensity * self.claims.mean * (self.loading - self.reinsurer_loading)

    @property
    def premium(self) -> float:
        return (1.0 + self.loading) * self.intensity * self.claims.mean

    @property
    def has_jumps(self) -> bool:
        return self.intensity > 0

    @property
    def jump_weights(self) -> np.ndarray:
        """``lambda * p_i``: the compensator mass of each atom."""
        return self.intensity * self.claims.p


def _phi(mu, sigma):
    # sigma' (sigma sigma')^{-1} mu, batched over leading axes
    gram = sigma @ np.swapaxes(sigma, -1, -2)
    w = np.linalg.solve(gram, mu[..., None])
    return (np.swapaxes(sigma, -1, -2) @ w)[..., 0]


def min_gram_eigenvalue(sigma) -> float:
    sigma = np.asarray(sigma, dtype=float)
    gram = sigma @ np.swapaxes(sigma, -1, -2)
    return float(np.min(np.linalg.eigvalsh(gram)))


@dataclass(frozen=True)
class DeterministicCoefficients:
    """Piecewise-constant excess returns ``mu`` (m) and volatility ``sigma`` (m x n)."""

    mu: PiecewiseConstant
    sigma: PiecewiseConstant

    @property
    def m(self) -> int:
        return self.sigma.values.shape[1]

    @property
    def n(self) -> int:
        return self.sigma.values.shape[2]

    def at(self, t, F=None):
        mu, sigma = self.mu(t), self.sigma(t)
        return mu, sigma, _phi(mu, sigma)

    def breakpoints(self) -> np.ndarray:
        return np.union1d(self.mu.times, self.sigma.times)


@dataclass(frozen=True)
class OUFactorModel:
    """Coefficients driven by a multivariate Ornstein–Uhlenbeck factor.

    dF = kappa (mean - F) dt + vol dW + jump * y   (at a claim of size y)

    ``mu(F) = mu_base + mu_amp * tanh(mu_load F)`` and
    ``sigma(F) = s(F) sigma_base`` with the vol level
    ``s(F) = vol_low + (vol_high - vol_low) * logistic(vol_load . F)``,
    so both stay bounded and ``sigma sigma' >= vol_low^2 sigma_base sigma_base'``.
    """

    kappa: np.ndarray
    mean: np.ndarray
    vol: np.ndarray
    jump: np.ndarray
    initial: np.ndarray
    mu_base: np.ndarray
    mu_amp: np.ndarray
    mu_load: np.ndarray
    sigma_base: np.ndarray
    vol_low: float = 1.0
    vol_high: float = 1.0
    vol_load: Optional[np.ndarray] = None

    def __post_init__(self):
        arr = lambda a: np.atleast_1d(np.asarray(a, dtype=float))
        d = arr(self.kappa).size
        object.__setattr__(self, "kappa", arr(self.kappa))
        object.__setattr__(self, "mean", arr(self.mean))
        object.__setattr__(self, "jump", arr(self.jump))
        object.__setattr__(self, "initial", arr(self.initial))
        object.__setattr__(self, "mu_base", arr(self.mu_base))
        object.__setattr__(self, "mu_amp", arr(self.mu_amp))
        sigma_base = np.atleast_2d(np.asarray(self.sigma_base, dtype=float))
        m, n = sigma_base.shape
        object.__setattr__(self, "sigma_base", sigma_base)
        object.__setattr__(self, "vol", np.asarray(self.vol, dtype=float).reshape(d, n))
        object.__setattr__(self, "mu_load", np.asarray(self.mu_load, dtype=float).reshape(m, d))
        vol_load = np.zeros(d) if self.vol_load is None else arr(self.vol_load)
        object.__setattr__(self, "vol_load", vol_load)
        for name in ("mean", "jump", "initial", "vol_load"):
            if getattr(self, name).shape != (d,):
                raise ValidationError(f"factor field {name!r} must have length {d}")
        for name in ("mu_base", "mu_amp"):
            if getattr(self, name).shape != (m,):
                raise ValidationError(f"factor field {name!r} must have length {m}")
        if np.any(self.kappa < 0):
            raise ValidationError("mean-reversion speeds must be non-negative")
        if np.any(self.mu_amp < 0):
            raise ValidationError("mu_amp must be non-negative")
        if not 0 < self.vol_low <= self.vol_high:
            raise ValidationError("need 0 < vol_low <= vol_high")

    @property
    def d(self) -> int:
        return self.kappa.size

    @property
    def m(self) -> int:
        return self.sigma_base.shape[0]

    @property
    def n(self) -> int:
        return self.sigma_base.shape[1]

    @property
    def claim_sensitive(self) -> bool:
        return bool(np.any(self.jump != 0))

    def drift(self, F):
        return self.kappa * (self.mean - F)

    def jump_response(self, F, y):
        """Factor jump ``J(F, y)`` with shape ``F.shape[:-1] + y.shape + (d,)``."""
        y = np.asarray(y, dtype=float)
        lead = np.shape(F)[:-1]
        return np.zeros(lead + y.shape + (self.d,)) + y[..., None] * self.jump

    def vol_level(self, F):
        z = np.asarray(F) @ self.vol_load
        return self.vol_low + (self.vol_high - self.vol_low) / (1.0 + np.exp(-z))

    def at(self, t, F):
        F = np.asarray(F, dtype=float)
        mu = self.mu_base + self.mu_amp * np.tanh(F @ self.mu_load.T)
        sigma = self.vol_level(F)[..., None, None] * self.sigma_base
        return mu, sigma, _phi(mu, sigma)

    def gram_floor(self) -> float:
        """Guaranteed lower bound on the smallest eigenvalue of sigma sigma'."""
        return self.vol_low ** 2 * min_gram_eigenvalue(self.sigma_base)

    def with_scaled_noise(self, scale: float, jump_scale: float = 1.0) -> "OUFactorModel":
        from dataclasses import replace
        return replace(self, vol=self.vol * scale, jump=self.jump * jump_scale)


Coefficients = Union[DeterministicCoefficients, OUFactorModel]


@dataclass(frozen=True)
class MarketModel:
    """Horizon, deterministic short rate and the excess-return coefficients."""

    horizon: float
    rate: PiecewiseConstant
    coefficients: Coefficients
    delta: float = 1e-6

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValidationError("horizon must be positive")
        if self.delta <= 0:
            raise ValidationError("non-degeneracy floor delta must be positive")
        if abs(self.rate.horizon - self.horizon) > 1e-12 * self.horizon:
            raise ValidationError("rate schedule does not span the horizon")
        c = self.coefficients
        if c.m > c.n:
            raise ValidationError(f"need m <= n, got m={c.m}, n={c.n}")
        if isinstance(c, DeterministicCoefficients):
            for sched in (c.mu, c.sigma):
                if abs(sched.horizon - self.horizon) > 1e-12 * self.horizon:
                    raise ValidationError("coefficient schedule does not span the horizon")
            if c.mu.values.shape[1:] != (c.m,):
                raise ValidationError("mu must be an m-vector per interval")
            floor = min_gram_eigenvalue(c.sigma.values)
        else:
            floor = c.gram_floor()
        if floor < self.delta:
            raise ValidationError(
                f"sigma sigma' has eigenvalue {floor:.3g} below delta={self.delta:.3g}")

    @property
    def m(self) -> int:
        return self.coefficients.m

    @property
    def n(self) -> int:
        return self.coefficients.n

    @property
    def is_random(self) -> bool:
        return isinstance(self.coefficients, OUFactorModel)

    @property
    def factor(self) -> Optional[OUFactorModel]:
        return self.coefficients if self.is_random else None

    def coefficients_at(self, t, F=None):
        """``(mu, sigma, phi)`` at time ``t`` (and factor state ``F``)."""
        if self.is_random:
            if F is None:
                F = self.coefficients.initial
            return self.coefficients.at(t, F)
        return self.coefficients.at(t)

    def breakpoints(self) -> np.ndarray:
        pts = self.rate.times
        if not self.is_random:
            pts = np.union1d(pts, self.coefficients.breakpoints())
        return pts

    def grid(self, dt: float) -> np.ndarray:
        """Uniform grid with step ``dt``; ``dt`` must divide the horizon and
        every coefficient breakpoint must fall on a grid node."""
        n_steps = int(round(self.horizon / dt))
        if n_steps < 1 or abs(n_steps * dt - self.horizon) > 1e-9 * self.horizon:
            raise ValidationError(f"dt={dt} does not divide T={self.horizon}")
        k = self.breakpoints() / self.horizon * n_steps
        if np.any(np.abs(k - np.round(k)) > 1e-7):
            raise ValidationError("coefficient breakpoints are not on the time grid")
        return np.linspace(0.0, self.horizon, n_steps + 1)


def discount_h(market: MarketModel, t):
    """``h_t = exp(int_t^T r_s ds)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12) or np.any(t > market.horizon * (1 + 1e-12)):
        raise ValueError(f"t outside [0, {market.horizon}]")
    return np.exp(market.rate.integral(t, market.horizon))


def wealth_shift(market: MarketModel, insurance: InsuranceParams, t):
    """``a * int_t^T exp(-int_t^s r) ds``, added to wealth to remove ``a``.

    The shifted wealth solves the same SDE with ``a = 0`` and agrees with the
    raw wealth at ``T``.
    """
    a = insurance.a
    t = np.asarray(t, dtype=float)
    if a == 0:
        return np.zeros_like(t)
    times, rates = market.rate.times, market.rate.values.reshape(-1)

    def one(s):
        total, acc = 0.0, 0.0
        for j in range(len(rates)):
            lo, hi = max(times[j], s), times[j + 1]
            if hi <= lo:
                continue
            length, r = hi - lo, rates[j]
            piece = length if r == 0 else -np.expm1(-r * length) / r
            total += np.exp(-acc) * piece
            acc += r * length
        return total

    return a * np.vectorize(one, otypes=[float])(t)


@dataclass(frozen=True)
class GirsanovKernel:
    """Measure-change kernel ``(eta, psi)``.

    ``eta(t, F)`` returns the diffusion tilt (``..., n``) and ``psi(t, F)`` the
    jump tilt at every claim atom (``..., n_atoms``). ``floor`` is the epsilon
    in ``psi >= -1 + epsilon``.
    """

    eta: Callable
    psi: Callable
    floor: float
    name: str = "kernel"

    def __post_init__(self):
        if not self.floor > 0:
            raise ValidationError("kernel floor epsilon must be positive")

    @classmethod
    def constant(cls, eta, psi, name: str = None) -> "GirsanovKernel":
        eta = np.asarray(eta, dtype=float)
        psi = np.asarray(psi, dtype=float)
        floor = float(np.min(psi)) + 1.0 if psi.size else 1.0
        if floor <= 0:
            raise ValidationError(f"psi={psi.min():.4g} violates psi > -1")
        return cls(lambda t, F=None: eta, lambda t, F=None: psi, floor,
                   name or f"constant(eta={eta.tolist()}, psi={psi.tolist()})")

    @classmethod
    def identity(cls, n: int, n_atoms: int) -> "GirsanovKernel":
        return cls.constant(np.zeros(n), np.zeros(n_atoms), name="identity")

    def check(self, psi_values) -> None:
        bad = np.asarray(psi_values) < -1.0 + self.floor - 1e-12
        if np.any(bad):
            raise ValidationError(
                f"kernel {self.name!r}: psi below -1 + {self.floor:.3g}")
