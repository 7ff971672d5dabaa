"""Monte Carlo estimators and checks of the saddle-point theory.

Expectations under a tilted measure are computed by reweighting physical
paths with the simulated density ``Lambda_T``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cone import ConeConstraint, project_cone
from .model import (GirsanovKernel, InsuranceParams, MarketModel, ValidationError,
                    discount_h, wealth_shift)
from .simulation import BLOCK_SIZE, simulate_paths
from .strategy import (FeedbackStrategy, constant_strategy, mask_strategy, mmv_feedback,
                       mmv_kernels, mmv_value, scaled_strategy,
                       shifted_endowment)


class VerificationError(RuntimeError):
    """Raised when a check exceeds its configured ceiling."""


@dataclass(frozen=True)
class EstimateReport:
    estimate: float
    std_error: float
    n_paths: int
    dt: float
    diagnostics: dict = field(default_factory=dict)

    def within(self, target: float, k: float = 3.0) -> bool:
        return abs(self.estimate - target) <= k * self.std_error

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def pair_means(values: np.ndarray, n_paths: int, antithetic: bool,
               block_size: int = BLOCK_SIZE) -> np.ndarray:
    """Average antithetic partners (each block is ``[base, mirrored]``);
    the identity when ``antithetic`` is off."""
    if not antithetic:
        return values
    out = []
    for start in range(0, n_paths, block_size):
        blk = values[start:start + min(block_size, n_paths - start)]
        half = len(blk) // 2
        out.append(0.5 * (blk[:half] + blk[half:]))
    return np.concatenate(out)


def _mean_se(samples, n_paths, antithetic):
    s = pair_means(samples, n_paths, antithetic)
    return float(s.mean()), float(s.std(ddof=1) / np.sqrt(len(s)))


def mmv_report_from(X_T, Lam, theta, n_paths, dt, antithetic, diagnostics=None) -> EstimateReport:
    """``E[Lambda_T (X_T + (Lambda_T - 1) / (2 theta))]`` with its standard error."""
    est, se = _mean_se(Lam * (X_T + (Lam - 1.0) / (2.0 * theta)), n_paths, antithetic)
    lam_mean, lam_se = _mean_se(Lam, n_paths, antithetic)
    diag = {"lambda_mean": lam_mean, "lambda_se": lam_se,
            "lambda_second_moment": float(np.mean(Lam ** 2)), "lambda_max": float(Lam.max())}
    diag.update(diagnostics or {})
    return EstimateReport(est, se, n_paths, dt, diag)


def estimate_mmv_objective(strategy: FeedbackStrategy, kernel: GirsanovKernel, market: MarketModel,
                           insurance: InsuranceParams, theta: float, *, x: float, n_paths: int,
                           dt: float, seed: int, antithetic: bool = False, workers: int = 1,
                           noise_dt: Optional[float] = None) -> EstimateReport:
    """MMV objective of ``strategy`` under the measure given by ``kernel``."""
    b = simulate_paths(market, insurance, strategy, kernel, n_paths=n_paths, dt=dt, seed=seed,
                       x0=x, antithetic=antithetic, workers=workers, noise_dt=noise_dt)
    return mmv_report_from(b.X_T, b.Lambda_T, theta, n_paths, dt, antithetic,
                           {"clamp_rate": b.clamp_rate, "seed": seed, "antithetic": antithetic})


def mv_report_from(X_T, theta, n_paths, dt, antithetic, diagnostics=None) -> EstimateReport:
    """``mean - theta/2 var`` of ``X_T`` with a delta-method standard error."""
    m = X_T.mean()
    est = float(m - 0.5 * theta * X_T.var())
    _, se = _mean_se(X_T - 0.5 * theta * (X_T - m) ** 2, n_paths, antithetic)
    mean, mean_se = _mean_se(X_T, n_paths, antithetic)
    diag = {"mean": mean, "mean_se": mean_se, "variance": float(X_T.var())}
    diag.update(diagnostics or {})
    return EstimateReport(est, se, n_paths, dt, diag)


def estimate_mv_objective(strategy: FeedbackStrategy, market: MarketModel,
                          insurance: InsuranceParams, theta: float, *, x: float, n_paths: int,
                          dt: float, seed: int, antithetic: bool = False, workers: int = 1,
                          monitors: Optional[dict] = None) -> tuple:
    """``E[X_T] - theta/2 Var(X_T)``; returns ``(report, bundle)``."""
    b = simulate_paths(market, insurance, strategy, None, n_paths=n_paths, dt=dt, seed=seed,
                       x0=x, antithetic=antithetic, workers=workers, monitors=monitors)
    rep = mv_report_from(b.X_T, theta, n_paths, dt, antithetic,
                         {"clamp_rate": b.clamp_rate, "seed": seed, "antithetic": antithetic})
    return rep, b


# ---------------------------------------------------------------------------
# pathwise identity

def identity_constant(Ysol, market, insurance, theta, x) -> float:
    return theta * float(discount_h(market, 0.0)) * shifted_endowment(market, insurance, x) \
        + Ysol.initial_value


def identity_monitor(Ysol, market, insurance, theta, x, every: Optional[float] = None):
    """``fn(t, X, Lambda, F) = |theta h X~ + Y Lambda - (theta h_0 x~ + Y_0)|``.

    With ``every`` set, the residual is only evaluated at multiples of it
    (and reported as 0 elsewhere).
    """
    const = identity_constant(Ysol, market, insurance, theta, x)

    def fn(t, X, Lam, F):
        if every is not None:
            k = t / every
            if abs(k - round(k)) > 1e-9 * max(1.0, k):
                return np.zeros_like(X)
        h = float(discount_h(market, t))
        Xs = X + float(wealth_shift(market, insurance, t))
        return np.abs(theta * h * Xs + np.asarray(Ysol.value_at(t, F)) * Lam - const)

    return fn


@dataclass(frozen=True)
class IdentityStudy:
    dts: list
    max_residual: list
    rms_residual: list
    clamp_rates: list

    @property
    def orders(self) -> list:
        r = np.asarray(self.max_residual)
        return (np.log(r[:-1] / r[1:]) / np.log(np.asarray(self.dts[:-1]) / self.dts[1:])).tolist()

    @property
    def fitted_order(self) -> float:
        """Least-squares slope of ``log max_residual`` against ``log dt``.

        Consecutive ratios of a maximum over paths are noisy because the
        worst path changes between levels; the fit over all levels is not.
        """
        return float(np.polyfit(np.log(self.dts), np.log(self.max_residual), 1)[0])

    def to_dict(self) -> dict:
        return _jsonable({**asdict(self), "orders": self.orders, "fitted_order": self.fitted_order})


def check_identity(Ysol, market: MarketModel, insurance: InsuranceParams, cone: ConeConstraint,
                   theta: float, x: float, *, n_paths: int, dt: float, seed: int,
                   noise_dt: Optional[float] = None, ceiling: Optional[float] = None,
                   monitor_dt: Optional[float] = None, workers: int = 1) -> EstimateReport:
    """Max residual over paths and grid times of the pathwise identity
    under the optimal strategy and kernel (grid times restricted to
    multiples of ``monitor_dt`` when given)."""
    strat = mmv_feedback(Ysol, market, insurance, cone, theta, x)
    ker = mmv_kernels(Ysol, market, insurance, cone)
    b = simulate_paths(market, insurance, strat, ker, n_paths=n_paths, dt=dt, seed=seed, x0=x,
                       noise_dt=noise_dt, workers=workers,
                       monitors={"identity": identity_monitor(Ysol, market, insurance, theta, x,
                                                              monitor_dt)})
    res = b.monitors["identity"]
    rep = EstimateReport(float(res.max()), float(res.std(ddof=1) / np.sqrt(n_paths)), n_paths, dt,
                         {"rms_residual": float(np.sqrt(np.mean(res ** 2))),
                          "clamp_rate": b.clamp_rate, "seed": seed})
    if ceiling is not None and rep.estimate > ceiling:
        raise VerificationError(f"identity residual {rep.estimate:.3g} above ceiling {ceiling:.3g}")
    return rep


def identity_convergence(Ysol, market, insurance, cone, theta, x, *, n_paths, dt0, levels=4,
                         seed=0, workers=1) -> IdentityStudy:
    """Residuals for ``dt0, dt0/2, ...`` on one Brownian path per sample.

    All levels share the finest noise resolution and the claims, and the
    residual is compared on the common grid of step ``dt0``.
    """
    dts = [dt0 / 2 ** j for j in range(levels)]
    reps = [check_identity(Ysol, market, insurance, cone, theta, x, n_paths=n_paths, dt=d,
                           seed=seed, noise_dt=dts[-1], monitor_dt=dt0, workers=workers)
            for d in dts]
    return IdentityStudy(dts, [r.estimate for r in reps],
                         [r.diagnostics["rms_residual"] for r in reps],
                         [r.diagnostics["clamp_rate"] for r in reps])


# ---------------------------------------------------------------------------
# saddle inequalities

def _cone_direction(cone: ConeConstraint) -> np.ndarray:
    """A unit vector of the cone close to the all-ones direction."""
    d = project_cone(np.ones(cone.m), np.eye(cone.m), cone).beta
    if np.linalg.norm(d) < 1e-12:
        d = cone.G[:, 0] if cone.G.shape[1] else np.zeros(cone.m)
    nrm = np.linalg.norm(d)
    return d / nrm if nrm > 0 else d


def strategy_perturbations(Ysol, market, insurance, cone, theta, x) -> list:
    """Admissible strategies to test against the optimal kernel."""
    opt = mmv_feedback(Ysol, market, insurance, cone, theta, x)
    d = _cone_direction(cone)
    m = cone.m
    return [
        opt,
        scaled_strategy(opt, 0.5),
        scaled_strategy(opt, 1.5),
        scaled_strategy(opt, 2.0),
        constant_strategy(np.zeros(m), 0.0, cone, "zero"),
        mask_strategy(opt, True, False, "optimal portfolio, no insurance"),
        mask_strategy(opt, False, True, "optimal insurance, no portfolio"),
        constant_strategy(np.zeros(m), 1.0, cone, "q=1"),
        constant_strategy(0.5 * d, 0.0, cone, "constant portfolio"),
        constant_strategy(0.5 * d, 0.5, cone, "constant portfolio, q=0.5"),
        FeedbackStrategy(mmv_feedback(Ysol, market, insurance, cone, 2 * theta, x).rule, "MMV",
                         cone, None, "optimal rule for 2 theta"),
        FeedbackStrategy(mmv_feedback(Ysol, market, insurance, cone, theta / 2, x).rule, "MMV",
                         cone, None, "optimal rule for theta/2"),
    ]


def _kernel_combo(a: GirsanovKernel, b: GirsanovKernel, ca, cb, floor, name):
    return GirsanovKernel(lambda t, F=None: ca * np.asarray(a.eta(t, F)) + cb * np.asarray(b.eta(t, F)),
                          lambda t, F=None: np.maximum(ca * np.asarray(a.psi(t, F))
                                                       + cb * np.asarray(b.psi(t, F)), -1.0 + floor),
                          floor, name)


def kernel_perturbations(Ysol, market, insurance, cone) -> list:
    """Admissible kernels to test against the optimal strategy."""
    n, na = market.n, insurance.claims.n_atoms
    opt = mmv_kernels(Ysol, market, insurance, cone)
    ident = GirsanovKernel.identity(n, na)
    _, _, phi0 = market.coefficients_at(0.0)
    eps = min(opt.floor, 0.5)
    return [
        opt,
        ident,
        GirsanovKernel.constant(-0.5 * phi0, np.zeros(na), "eta=-phi0/2"),
        GirsanovKernel.constant(-np.asarray(phi0), np.zeros(na), "eta=-phi0"),
        GirsanovKernel.constant(0.3 * np.ones(n) / np.sqrt(n), np.zeros(na), "eta=+0.3"),
        GirsanovKernel.constant(np.zeros(n), 0.3 * np.ones(na), "psi=+0.3"),
        GirsanovKernel.constant(np.zeros(n), -0.3 * np.ones(na), "psi=-0.3"),
        _kernel_combo(opt, ident, 0.5, 0.0, eps, "0.5x optimal"),
        _kernel_combo(opt, ident, 1.5, 0.0, eps, "1.5x optimal"),
        GirsanovKernel(opt.eta, lambda t, F=None: np.zeros(np.shape(opt.psi(t, F))), 1.0,
                       "optimal eta, psi=0"),
        GirsanovKernel(lambda t, F=None: np.zeros(np.shape(opt.eta(t, F))), opt.psi, opt.floor,
                       "eta=0, optimal psi"),
        _kernel_combo(opt, GirsanovKernel.constant(0.2 * np.ones(n) / np.sqrt(n), 0.2 * np.ones(na)),
                      1.0, 1.0, eps, "optimal + constant shift"),
    ]


@dataclass(frozen=True)
class SaddleEntry:
    name: str
    side: str          # "strategy" (estimate <= value) or "kernel" (estimate >= value)
    estimate: float
    std_error: float
    passed: bool


@dataclass(frozen=True)
class SaddleReport:
    value: float
    k_se: float
    entries: list

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def violations(self) -> list:
        return [e for e in self.entries if not e.passed]

    def to_dict(self) -> dict:
        return _jsonable({"value": self.value, "k_se": self.k_se, "passed": self.passed,
                          "entries": [asdict(e) for e in self.entries]})


def check_saddle(Ysol, market: MarketModel, insurance: InsuranceParams, cone: ConeConstraint,
                 theta: float, x: float, *, n_paths: int, dt: float, seed: int,
                 strategies: Optional[Sequence[FeedbackStrategy]] = None,
                 kernels: Optional[Sequence[GirsanovKernel]] = None,
                 k_se: float = 3.0, workers: int = 1) -> SaddleReport:
    """Both saddle inequalities over a library of perturbations.

    Every strategy is played against the optimal kernel and must not beat
    the value by more than ``k_se`` standard errors; every kernel is
    applied to the optimal strategy and must not fall below it by more.
    Kernels share one set of wealth paths.
    """
    h0 = float(discount_h(market, 0.0))
    value = mmv_value(Ysol.initial_value, h0, shifted_endowment(market, insurance, x), theta)
    strategies = list(strategies) if strategies is not None else \
        strategy_perturbations(Ysol, market, insurance, cone, theta, x)
    kernels = list(kernels) if kernels is not None else kernel_perturbations(Ysol, market, insurance, cone)
    for s in strategies:
        if s.cone is not None and s.cone is not cone and s.cone.to_dict() != cone.to_dict():
            raise ValidationError(f"strategy {s.name!r} uses a different cone")
    opt_kernel = mmv_kernels(Ysol, market, insurance, cone)
    entries = []
    for s in strategies:
        rep = estimate_mmv_objective(s, opt_kernel, market, insurance, theta, x=x, n_paths=n_paths,
                                     dt=dt, seed=seed, workers=workers)
        entries.append(SaddleEntry(s.name, "strategy", rep.estimate, rep.std_error,
                                   rep.estimate <= value + k_se * rep.std_error))
    opt = mmv_feedback(Ysol, market, insurance, cone, theta, x)
    names = [f"{i}:{k.name}" for i, k in enumerate(kernels)]
    b = simulate_paths(market, insurance, opt, None, n_paths=n_paths, dt=dt, seed=seed, x0=x,
                       extra_kernels=dict(zip(names, kernels)), workers=workers)
    for key, k in zip(names, kernels):
        rep = mmv_report_from(b.X_T, b.extra_Lambda_T[key], theta, n_paths, dt, False)
        entries.append(SaddleEntry(k.name, "kernel", rep.estimate, rep.std_error,
                                   rep.estimate >= value - k_se * rep.std_error))
    return SaddleReport(value, k_se, entries)


def select_perturbations(items: Sequence, names) -> list:
    """Entries of a perturbation library by name (``"all"`` keeps everything)."""
    if names == "all":
        return list(items)
    by_name = {it.name: it for it in items}
    unknown = [n for n in names if n not in by_name]
    if unknown:
        raise ValidationError(f"unknown perturbations {unknown}; available: {sorted(by_name)}")
    return [by_name[n] for n in names]


# ---------------------------------------------------------------------------
# kernel admissibility

@dataclass(frozen=True)
class AdmissibilityReport:
    floor: float
    min_psi: float
    lambda_means: list
    lambda_ses: list
    lambda_second_moments: list
    seeds: list
    k_se: float = 4.0

    @property
    def floor_ok(self) -> bool:
        return self.min_psi >= -1.0 + self.floor - 1e-12

    @property
    def martingale_ok(self) -> bool:
        return all(abs(m - 1.0) <= self.k_se * s for m, s in zip(self.lambda_means, self.lambda_ses))

    @property
    def second_moment_spread(self) -> float:
        """Relative spread ``(max - min) / mean`` of ``E[Lambda_T^2]`` across seeds."""
        m2 = np.asarray(self.lambda_second_moments)
        return float((m2.max() - m2.min()) / m2.mean())

    def to_dict(self) -> dict:
        return _jsonable({**asdict(self), "floor_ok": self.floor_ok,
                          "martingale_ok": self.martingale_ok,
                          "second_moment_spread": self.second_moment_spread})


def psi_minimum(kernel: GirsanovKernel, times, F=None) -> float:
    """Smallest ``psi`` over all atoms and the given times (and factor states)."""
    return float(min(np.min(kernel.psi(float(t), None if F is None else F[k]))
                     for k, t in enumerate(times)))


def check_kernel_admissibility(Ysol, market: MarketModel, insurance: InsuranceParams,
                               cone: ConeConstraint, theta: float, x: float, *, n_paths: int,
                               dt: float, seeds: Sequence[int], workers: int = 1,
                               F_paths=None) -> AdmissibilityReport:
    """Floor of the saddle jump kernel on the grid and sample moments of
    ``Lambda_T`` under the optimal strategy, one run per seed.

    ``F_paths`` (``K+1, N, d``) supplies factor states for the floor check
    in the factor-driven case; otherwise the initial state is used.
    """
    ker = mmv_kernels(Ysol, market, insurance, cone)
    times = market.grid(dt)
    if market.is_random and F_paths is not None:
        idx = np.clip(np.searchsorted(np.linspace(0, market.horizon, len(F_paths)), times), 0,
                      len(F_paths) - 1)
        min_psi = psi_minimum(ker, times, F_paths[idx])
    else:
        min_psi = psi_minimum(ker, times)
    strat = mmv_feedback(Ysol, market, insurance, cone, theta, x)
    means, ses, m2 = [], [], []
    for seed in seeds:
        b = simulate_paths(market, insurance, strat, ker, n_paths=n_paths, dt=dt, seed=seed, x0=x,
                           workers=workers)
        mean, se = _mean_se(b.Lambda_T, n_paths, False)
        means.append(mean), ses.append(se), m2.append(float(np.mean(b.Lambda_T ** 2)))
    return AdmissibilityReport(ker.floor, min_psi, means, ses, m2, list(seeds))
