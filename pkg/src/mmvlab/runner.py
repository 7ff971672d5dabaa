"""Experiment orchestration: solve, build strategies, verify, persist.

Every experiment writes into one output directory::

    manifest.json        config hash, seeds, package versions, file list
    config.json          canonical config document
    solutions/*.csv      solution tables (and the frontier sample)
    reports/*.json       estimate reports
    summary.json         one pass/fail entry per acceptance band

Artifacts carry the config hash and seed and contain no timestamps or
timings, so a rerun reproduces them byte for byte.
"""

from __future__ import annotations

import json
import platform
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np

from .bsde import BsdeSolution, SolverError, solve_deterministic, y_from_p2
from .config import ConfigError, ExperimentConfig
from .lsmc import simulate_factor_paths, solve_lsmc
from .model import PositivityError, ValidationError, discount_h
from .strategy import (mmv_feedback, mmv_kernels, mmv_value, mv_feedback, mv_frontier,
                       j_value, shifted_endowment)
from .verification import (VerificationError, _jsonable, check_kernel_admissibility,
                           check_saddle, estimate_mmv_objective, estimate_mv_objective,
                           identity_convergence, kernel_perturbations, select_perturbations,
                           strategy_perturbations)

EXPERIMENTS = ("value-equivalence", "saddle", "frontier", "convergence", "solve-only")

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_VERIFICATION = 0, 2, 3, 4


@dataclass
class Band:
    """One acceptance band: ``passed`` iff ``observed`` meets ``threshold``."""

    name: str
    passed: bool
    observed: float
    threshold: float
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable({"name": self.name, "passed": bool(self.passed),
                          "observed": self.observed, "threshold": self.threshold,
                          **({"detail": self.detail} if self.detail else {})})


@dataclass
class Solutions:
    """Solutions of one config; ``Y`` is the production path ``h^2 / P2`` and
    ``Y_direct`` the independently integrated MMV equation."""

    P2: object
    P1: object
    Y: object
    Y_direct: object
    P: object
    tables: dict            # name -> BsdeSolution for export

    @property
    def P2_0(self) -> float:
        return self.P2.initial_value

    @property
    def P1_0(self) -> float:
        return self.P1.initial_value


def solve_all(cfg: ExperimentConfig) -> Solutions:
    """Solve ``P2, P1, Y, P`` for the config (RK4 or regression)."""
    market, insurance, cone = cfg.build_market(), cfg.build_insurance(), cfg.build_cone()
    if not market.is_random:
        dt = cfg.solver.dt
        sols = {k: solve_deterministic(k, market, insurance, cone, dt) for k in ("P2", "P1", "Y", "P")}
        Y = y_from_p2(sols["P2"], market)
        return Solutions(sols["P2"], sols["P1"], Y, sols["Y"], sols["P"],
                         {"P2": sols["P2"], "P1": sols["P1"], "Y": sols["Y"], "P": sols["P"],
                          "Y_from_P2": Y})
    st = cfg.solver.lsmc
    paths = simulate_factor_paths(market, insurance, st)
    P2 = solve_lsmc("P2", market, insurance, cone, st, paths=paths)
    P1 = solve_lsmc("P1", market, insurance, cone, st, p2=P2, paths=paths)
    Yd = solve_lsmc("Y", market, insurance, cone, st, paths=paths)
    P = solve_lsmc("P", market, insurance, cone, st, paths=paths)
    tables = {k: s.on_paths(paths) for k, s in (("P2", P2), ("P1", P1), ("Y", Yd), ("P", P))}
    return Solutions(P2, P1, y_from_p2(P2, market), Yd, P, tables)


class Run:
    """Output directory with provenance stamping."""

    def __init__(self, cfg: ExperimentConfig, experiment: str, out: Path, workers: int):
        self.cfg, self.experiment, self.out, self.workers = cfg, experiment, Path(out), workers
        self.sha = cfg.sha256()
        self.seed = cfg.verification.seeds[0]
        self.files: list = []
        self.bands: list = []
        (self.out / "solutions").mkdir(parents=True, exist_ok=True)
        (self.out / "reports").mkdir(parents=True, exist_ok=True)

    @property
    def provenance(self) -> dict:
        return {"config_sha256": self.sha, "seed": self.seed}

    def _write(self, rel: str, text: str) -> None:
        (self.out / rel).write_text(text)
        self.files.append(rel)

    def write_json(self, rel: str, payload: dict) -> None:
        doc = {**self.provenance, **_jsonable(payload)}
        self._write(rel, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def write_solution(self, name: str, sol: BsdeSolution) -> None:
        self._write(f"solutions/{name}.csv", sol.to_csv(provenance=self.provenance))

    def write_text(self, rel: str, text: str) -> None:
        head = f"# config_sha256={self.sha} seed={self.seed}\n"
        self._write(rel, head + text)

    def band(self, name, passed, observed, threshold, **detail) -> Band:
        b = Band(name, bool(passed), float(observed), float(threshold), detail)
        self.bands.append(b)
        return b

    def finish(self, status: str, error: Optional[dict] = None) -> None:
        summary = {"experiment": self.experiment, "status": status,
                   "passed": all(b.passed for b in self.bands),
                   "bands": [b.to_dict() for b in self.bands]}
        if error is not None:
            summary["error"] = error
        self.write_json("summary.json", summary)
        self.write_json("config.json", {"config": self.cfg.to_dict()})
        manifest = {"experiment": self.experiment, "config_sha256": self.sha,
                    "seeds": list(self.cfg.verification.seeds),
                    "lsmc_seed": self.cfg.solver.lsmc.seed, "workers_independent": True,
                    "versions": _versions(), "files": sorted(self.files + ["manifest.json"])}
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "jsonschema", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


# ---------------------------------------------------------------------------
# experiments

def _context(cfg):
    market, insurance, cone = cfg.build_market(), cfg.build_insurance(), cfg.build_cone()
    h0 = float(discount_h(market, 0.0))
    xs = shifted_endowment(market, insurance, cfg.x)
    return market, insurance, cone, h0, xs


def _degenerate(cfg) -> bool:
    """No investment opportunity and no reinsurance premium: ``phi = 0``, ``b = 0``."""
    market = cfg.build_market()
    if market.is_random or cfg.build_insurance().b > 0:
        return False
    return all(np.allclose(market.coefficients_at(t)[2], 0.0) for t in market.breakpoints()[:-1])


def _solution_bands(run: Run, cfg, sols: Solutions, h0: float) -> None:
    for name, sol in sols.tables.items():
        run.write_solution(name, sol)
    random = cfg.build_market().is_random
    for name in ("P2", "P1", "Y", "P"):
        tab = sols.tables[name]
        run.band(f"{name} terminal value is 1", tab.value[-1] == 1.0, abs(tab.value[-1] - 1.0), 0.0)
        if not random:
            run.band(f"{name} positivity certificates", tab.satisfies_certificates(),
                     tab.value.min() - tab.lower, 0.0)
    bridge = abs(sols.Y_direct.initial_value - h0 ** 2 / sols.P2_0)
    tol = 1e-2 * sols.Y_direct.initial_value if random else 1e-8
    run.band("Y_0 = h_0^2 / P2_0", bridge <= tol, bridge, tol,
             Y0=sols.Y_direct.initial_value, h0_sq_over_P2_0=h0 ** 2 / sols.P2_0)
    if not _degenerate(cfg):
        run.band("P2_0 < h_0^2", sols.P2_0 < h0 ** 2, sols.P2_0, h0 ** 2)
    run.band("P1_0 <= h_0^2", sols.P1_0 <= h0 ** 2 * (1 + 1e-9), sols.P1_0, h0 ** 2)


def _solve_only(run: Run, cfg) -> None:
    market, insurance, cone, h0, xs = _context(cfg)
    sols = solve_all(cfg)
    _solution_bands(run, cfg, sols, h0)
    run.write_json("reports/values.json", {
        "h0": h0, "x_shifted": xs, "Y0": sols.Y_direct.initial_value, "Y0_from_P2": sols.Y.initial_value,
        "P2_0": sols.P2_0, "P1_0": sols.P1_0, "P0": sols.P.initial_value,
        "mmv_value": mmv_value(sols.Y_direct.initial_value, h0, xs, cfg.theta)})


def _value_equivalence(run: Run, cfg) -> None:
    market, insurance, cone, h0, xs = _context(cfg)
    ver = cfg.verification
    sols = solve_all(cfg)
    _solution_bands(run, cfg, sols, h0)
    v_mmv = mmv_value(sols.Y_direct.initial_value, h0, xs, cfg.theta)
    front = mv_frontier(sols.P1_0, sols.P2_0, h0, xs, cfg.theta)
    gap = abs(v_mmv - front.value)
    tol = 1e-2 * abs(v_mmv) if market.is_random else 1e-8
    run.band("|mmv_value - mv_value|", gap <= tol, gap, tol, mmv_value=v_mmv, mv_value=front.value)

    strat = mmv_feedback(sols.Y, market, insurance, cone, cfg.theta, cfg.x)
    ker = mmv_kernels(sols.Y, market, insurance, cone)
    kw = dict(x=cfg.x, n_paths=ver.n_paths, dt=ver.dt, seed=run.seed, antithetic=ver.antithetic,
              workers=run.workers)
    mmv_rep = estimate_mmv_objective(strat, ker, market, insurance, cfg.theta, **kw)
    mv_strat = mv_feedback(sols.P1, sols.P2, market, insurance, cone, front.zeta_hat)
    mv_rep, _ = estimate_mv_objective(mv_strat, market, insurance, cfg.theta, **kw)
    run.write_json("reports/mmv_objective.json", mmv_rep.to_dict())
    run.write_json("reports/mv_objective.json", mv_rep.to_dict())
    k = ver.k_se
    run.band("MC MMV objective at the saddle", mmv_rep.within(v_mmv, k),
             abs(mmv_rep.estimate - v_mmv) / mmv_rep.std_error, k, estimate=mmv_rep.estimate,
             std_error=mmv_rep.std_error, target=v_mmv)
    run.band("MC MV objective at zeta_hat", mv_rep.within(front.value, k),
             abs(mv_rep.estimate - front.value) / mv_rep.std_error, k, estimate=mv_rep.estimate,
             std_error=mv_rep.std_error, target=front.value)
    mean, mean_se = mv_rep.diagnostics["mean"], mv_rep.diagnostics["mean_se"]
    run.band("MC E[X_T] at zeta_hat equals z_hat", abs(mean - front.z_hat) <= k * mean_se,
             abs(mean - front.z_hat) / mean_se, k, estimate=mean, std_error=mean_se,
             target=front.z_hat)
    joint = np.hypot(mmv_rep.std_error, mv_rep.std_error)
    run.band("MC MMV and MV objectives agree", abs(mmv_rep.estimate - mv_rep.estimate) <= k * joint,
             abs(mmv_rep.estimate - mv_rep.estimate) / joint, k)


def _saddle(run: Run, cfg) -> None:
    market, insurance, cone, h0, xs = _context(cfg)
    ver = cfg.verification
    sols = solve_all(cfg)
    _solution_bands(run, cfg, sols, h0)
    strategies = select_perturbations(
        strategy_perturbations(sols.Y, market, insurance, cone, cfg.theta, cfg.x), ver.strategies)
    kernels = select_perturbations(kernel_perturbations(sols.Y, market, insurance, cone), ver.kernels)
    rep = check_saddle(sols.Y, market, insurance, cone, cfg.theta, cfg.x, n_paths=ver.n_paths,
                       dt=ver.dt, seed=run.seed, strategies=strategies, kernels=kernels,
                       k_se=ver.k_se, workers=run.workers)
    run.write_json("reports/saddle.json", rep.to_dict())
    for e in rep.entries:
        sign = 1.0 if e.side == "strategy" else -1.0
        run.band(f"saddle {e.side}: {e.name}", e.passed,
                 sign * (e.estimate - rep.value) / e.std_error, ver.k_se,
                 estimate=e.estimate, std_error=e.std_error, value=rep.value)
    adm = check_kernel_admissibility(sols.Y, market, insurance, cone, cfg.theta, cfg.x,
                                     n_paths=ver.n_paths, dt=ver.dt, seeds=ver.seeds,
                                     workers=run.workers)
    run.write_json("reports/kernel_admissibility.json", adm.to_dict())
    run.band("psi_hat >= -1 + c1/c2", adm.floor_ok, adm.min_psi, -1.0 + adm.floor)
    run.band("E[Lambda_T] = 1 within 4 SE", adm.martingale_ok,
             max(abs(m - 1) / s for m, s in zip(adm.lambda_means, adm.lambda_ses)), 4.0)


def _frontier(run: Run, cfg) -> None:
    market, insurance, cone, h0, xs = _context(cfg)
    ver = cfg.verification
    sols = solve_all(cfg)
    _solution_bands(run, cfg, sols, h0)
    front = mv_frontier(sols.P1_0, sols.P2_0, h0, xs, cfg.theta)
    base = xs * h0
    span = ver.frontier_span * (front.z_hat - base)
    zs = np.linspace(base - span, base + span, ver.frontier_points)
    run.write_text("solutions/frontier.csv", front.to_csv(zs))
    at = front(base)
    run.band("F(x h0) = 0 and zeta(x h0) = x h0", at.F == 0.0 and at.zeta == base, at.F, 0.0)
    run.band("z_hat > x h0", front.z_hat > base, front.z_hat - base, 0.0)
    # F(z) = sup_zeta J(z, zeta) on a dense zeta grid; J is quadratic in zeta
    # with |J''| <= 2, so the grid supremum is within step^2 / 4 of F
    worst = 0.0
    for p in front.sample(zs):
        if not p.attainable or p.branch == "at":
            continue
        grid = p.zeta + np.linspace(-1.0, 1.0, 20001) * (abs(p.zeta - base) + 1.0)
        sup = float(np.max(j_value(sols.P1_0, sols.P2_0, h0, xs, p.z, grid)))
        bound = (grid[1] - grid[0]) ** 2 / 4 + 1e-9 * (1.0 + abs(p.F))
        worst = max(worst, abs(sup - p.F) / bound)
    run.band("F(z) = sup_zeta J(z, zeta) on a zeta grid", worst <= 1.0, worst, 1.0)
    run.write_json("reports/frontier.json", {
        "z_hat": front.z_hat, "zeta_hat": front.zeta_hat, "mv_value": front.value,
        "upper_branch_open": front.upper_branch_open, "P1_0": sols.P1_0, "P2_0": sols.P2_0,
        "h0": h0, "x_shifted": xs})


def _convergence(run: Run, cfg) -> None:
    market, insurance, cone, h0, xs = _context(cfg)
    ver = cfg.verification
    sols = solve_all(cfg)
    _solution_bands(run, cfg, sols, h0)
    if not market.is_random:
        # RK4 self-convergence of P2 at dt, dt/2 against a dt/8 reference
        dt = cfg.solver.dt
        ref = solve_deterministic("P2", market, insurance, cone, dt / 8).initial_value
        errs = [abs(solve_deterministic("P2", market, insurance, cone, d).initial_value - ref)
                for d in (dt, dt / 2)]
        if errs[1] > 1e-14:
            order = float(np.log2(errs[0] / errs[1]))
            run.band("RK4 observed order on P2", order >= 3.0, order, 3.0, errors=errs)
        run.write_json("reports/ode_convergence.json", {"dts": [dt, dt / 2], "errors": errs})
    levels = ver.identity_levels
    dt0 = ver.dt * 2 ** (levels - 1)
    study = identity_convergence(sols.Y, market, insurance, cone, cfg.theta, cfg.x,
                                 n_paths=ver.n_paths, dt0=dt0, levels=levels, seed=run.seed,
                                 workers=run.workers)
    run.write_json("reports/identity_convergence.json", study.to_dict())
    r = study.max_residual
    run.band("identity residual decreases", r[-1] < r[0], r[-1] / r[0], 1.0)
    run.band("identity observed order (least-squares)", study.fitted_order >= ver.identity_min_order,
             study.fitted_order, ver.identity_min_order, consecutive=study.orders)
    clamp = max(study.clamp_rates)
    run.band("overshoot clamp rate", clamp < ver.max_clamp_rate, clamp, ver.max_clamp_rate)


_RUNNERS = {"value-equivalence": _value_equivalence, "saddle": _saddle, "frontier": _frontier,
            "convergence": _convergence, "solve-only": _solve_only}


def run_experiment(cfg: ExperimentConfig, experiment: str, out=None, workers: int = 1) -> int:
    """Run one experiment and persist its artifacts; returns the exit code."""
    if experiment not in _RUNNERS:
        raise ConfigError([{"path": "/experiment",
                            "message": f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}"}])
    run = Run(cfg, experiment, Path(out if out is not None else cfg.output), workers)
    try:
        _RUNNERS[experiment](run, cfg)
    except (SolverError, PositivityError) as exc:
        run.finish("solver-failure", {"error": "solver", "type": type(exc).__name__, "message": str(exc)})
        return EXIT_SOLVER
    except VerificationError as exc:
        run.finish("verification-failure", {"error": "verification", "message": str(exc)})
        return EXIT_VERIFICATION
    except ValidationError as exc:
        run.finish("validation-failure", {"error": "validation", "type": type(exc).__name__,
                                          "message": str(exc)})
        return EXIT_VALIDATION
    passed = all(b.passed for b in run.bands)
    run.finish("passed" if passed else "failed")
    return EXIT_OK if passed else EXIT_VERIFICATION
