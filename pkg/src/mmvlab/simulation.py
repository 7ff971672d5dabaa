"""Joint simulation of wealth, the density process and the factor.

Paths are simulated in fixed-size blocks. Each block owns two Philox
streams derived from ``SeedSequence(seed, spawn_key=(block,))``: one for
Brownian increments and one for claims. Results depend only on
``(seed, n_paths, block_size)``, never on the number of workers.

Brownian increments are drawn at resolution ``noise_dt`` and summed up to
the step ``dt``, so runs that share ``noise_dt`` but use different ``dt``
see the same Brownian path. Claims are sampled exactly in continuous time
(Poisson count, uniform times, atom draw) and applied at the end of the
step containing them, one at a time, using the pre-jump state.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (GirsanovKernel, InsuranceParams, MarketModel, PositivityError,
                    ValidationError)

BLOCK_SIZE = 32768


class AdmissibilityError(ValidationError):
    """Raised when a strategy emits ``q < 0`` or a portfolio outside the cone."""


def block_streams(seed: int, block: int):
    """``(brownian, claims)`` generators for one block of paths."""
    ss = np.random.SeedSequence(seed, spawn_key=(block,))
    return tuple(np.random.Generator(np.random.Philox(s)) for s in ss.spawn(2))


@dataclass(frozen=True)
class ClaimEvents:
    """Claims of a set of paths, sorted by path and then time."""

    path: np.ndarray
    time: np.ndarray
    atom: np.ndarray

    @classmethod
    def sample(cls, gen, insurance: InsuranceParams, horizon: float, n_paths: int):
        if not insurance.has_jumps:
            e = np.zeros(0, dtype=int)
            return cls(e, np.zeros(0), e)
        counts = gen.poisson(insurance.intensity * horizon, n_paths)
        total = int(counts.sum())
        path = np.repeat(np.arange(n_paths), counts)
        time = gen.uniform(0.0, horizon, total)
        atom = gen.choice(insurance.claims.n_atoms, total, p=insurance.claims.p)
        order = np.lexsort((time, path))
        return cls(path[order], time[order], atom[order])

    def tiled(self, n_paths: int, copies: int = 2) -> "ClaimEvents":
        """The same claims repeated for ``copies`` consecutive groups of paths."""
        return ClaimEvents(np.concatenate([self.path + c * n_paths for c in range(copies)]),
                           np.tile(self.time, copies), np.tile(self.atom, copies))

    def steps(self, dt: float, n_steps: int):
        """Claims grouped per step: ``step -> [(paths, atoms), ...]`` by rank
        within the step, so each group has distinct paths."""
        step = np.minimum((self.time / dt).astype(int), n_steps - 1)
        order = np.lexsort((self.time, self.path, step))
        step, path, atom = step[order], self.path[order], self.atom[order]
        out = {}
        if step.size == 0:
            return out
        new_group = np.r_[True, (step[1:] != step[:-1]) | (path[1:] != path[:-1])]
        start = np.maximum.accumulate(np.where(new_group, np.arange(step.size), 0))
        rank = np.arange(step.size) - start
        bounds = np.r_[0, np.flatnonzero(np.diff(step)) + 1, step.size]
        for s0, s1 in zip(bounds[:-1], bounds[1:]):
            r = rank[s0:s1]
            out[int(step[s0])] = [(path[s0:s1][r == j], atom[s0:s1][r == j])
                                  for j in range(r.max() + 1)]
        return out

    def per_path(self, n_paths: int, sizes) -> tuple[np.ndarray, np.ndarray]:
        """``(count, total size)`` per path."""
        count = np.bincount(self.path, minlength=n_paths)
        total = np.bincount(self.path, weights=np.asarray(sizes)[self.atom], minlength=n_paths)
        return count, total


class BrownianStream:
    """Increments over steps of ``dt`` built from sub-steps of ``noise_dt``."""

    def __init__(self, gen, n_paths: int, n: int, dt: float, noise_dt: float, antithetic=False):
        ratio = dt / noise_dt
        self.sub = int(round(ratio))
        if self.sub < 1 or abs(self.sub - ratio) > 1e-9 * ratio:
            raise ValidationError(f"noise_dt={noise_dt} must divide dt={dt}")
        self.gen, self.n, self.noise_dt, self.antithetic = gen, n, noise_dt, antithetic
        self.n_draw = n_paths // 2 if antithetic else n_paths

    def next(self) -> np.ndarray:
        z = self.gen.standard_normal((self.sub, self.n_draw, self.n))
        z = z[0] if self.sub == 1 else z.sum(axis=0)
        z *= np.sqrt(self.noise_dt)
        return np.concatenate([z, -z]) if self.antithetic else z


def lambda_diffusion_factor(eta, psi, dW, dt, insurance: InsuranceParams):
    """Continuous part of one step of the density:
    ``exp(eta'dW - |eta|^2 dt / 2 - dt sum_i psi_i lam p_i)``."""
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        expo = dW @ eta - 0.5 * (eta @ eta) * dt
    else:
        expo = np.einsum("...n,...n->...", eta, dW) - 0.5 * np.einsum("...n,...n->...", eta, eta) * dt
    if insurance.has_jumps:
        expo = expo - dt * np.asarray(psi) @ insurance.jump_weights
    return np.exp(expo)


def doleans_lambda(kernel: GirsanovKernel, insurance: InsuranceParams, times, dW,
                   claims: ClaimEvents, F=None) -> np.ndarray:
    """Density paths ``(K+1, N)`` for given increments ``dW`` (K, N, n) and claims.

    ``F`` optionally holds factor states ``(K+1, N, d)`` at the grid times;
    the kernel is evaluated at the left end of each step and at the
    step's right end for claims.
    """
    K, N = dW.shape[0], dW.shape[1]
    dt = float(times[1] - times[0])
    Lam = np.ones((K + 1, N))
    by_step = claims.steps(dt, K)
    state = lambda k, idx=slice(None): None if F is None else F[k][idx]
    cur = np.ones(N)
    for k in range(K):
        psi = np.broadcast_to(kernel.psi(times[k], state(k)), (N, insurance.claims.n_atoms))
        kernel.check(psi)
        cur = cur * lambda_diffusion_factor(kernel.eta(times[k], state(k)), psi, dW[k], dt, insurance)
        for paths, atoms in by_step.get(k, []):
            psi_c = np.broadcast_to(kernel.psi(times[k + 1], state(k + 1, paths)),
                                    (len(paths), insurance.claims.n_atoms))
            kernel.check(psi_c)
            cur[paths] *= 1.0 + psi_c[np.arange(len(paths)), atoms]
        if np.any(cur <= 0):
            raise PositivityError("density process reached a non-positive value")
        Lam[k + 1] = cur
    return Lam


@dataclass
class PathBundle:
    """Simulated paths: terminal values, claim statistics and optional records.

    ``records[name]`` has shape ``(len(record_index), n_paths)`` and holds
    the named state at ``times[record_index]``. ``monitors[name]`` is the
    per-path running maximum of a user function of the state.
    """

    times: np.ndarray
    seed: int
    x0: float
    antithetic: bool
    X_T: np.ndarray
    Lambda_T: Optional[np.ndarray]
    W_T: np.ndarray
    claim_count: np.ndarray
    claim_total: np.ndarray
    clamp_count: int
    record_index: np.ndarray
    records: dict = field(default_factory=dict)
    monitors: dict = field(default_factory=dict)
    extra_Lambda_T: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return len(self.X_T)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def clamp_rate(self) -> float:
        return self.clamp_count / (self.n_paths * self.n_steps)

    def _columns(self) -> dict:
        cols = {"times": self.times, "X_T": self.X_T, "W_T": self.W_T,
                "claim_count": self.claim_count, "claim_total": self.claim_total,
                "record_index": self.record_index}
        if self.Lambda_T is not None:
            cols["Lambda_T"] = self.Lambda_T
        cols.update({f"record:{k}": v for k, v in self.records.items()})
        cols.update({f"monitor:{k}": v for k, v in self.monitors.items()})
        cols.update({f"lambda:{k}": v for k, v in self.extra_Lambda_T.items()})
        return cols

    def save(self, stem: str) -> None:
        """Write ``stem.npz`` (columns) and ``stem.json`` (header)."""
        np.savez(stem + ".npz", **self._columns())
        header = {"seed": self.seed, "x0": self.x0, "antithetic": self.antithetic,
                  "n_paths": self.n_paths, "n_steps": self.n_steps, "dt": self.dt,
                  "horizon": float(self.times[-1]), "clamp_count": self.clamp_count,
                  "n_claims": int(self.claim_count.sum()),
                  "records": sorted(self.records), "monitors": sorted(self.monitors),
                  "extra_kernels": sorted(self.extra_Lambda_T)}
        with open(stem + ".json", "w") as fh:
            json.dump(header, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, stem: str) -> "PathBundle":
        with open(stem + ".json") as fh:
            header = json.load(fh)
        with np.load(stem + ".npz") as data:
            cols = {k: data[k] for k in data.files}
        return cls(cols["times"], header["seed"], header["x0"], header["antithetic"],
                   cols["X_T"], cols.get("Lambda_T"), cols["W_T"], cols["claim_count"],
                   cols["claim_total"], header["clamp_count"], cols["record_index"],
                   {k: cols[f"record:{k}"] for k in header["records"]},
                   {k: cols[f"monitor:{k}"] for k in header["monitors"]},
                   {k: cols[f"lambda:{k}"] for k in header.get("extra_kernels", [])})


@dataclass(frozen=True)
class SimulationSpec:
    """Everything that determines a simulation run besides the block index."""

    market: MarketModel
    insurance: InsuranceParams
    strategy: object
    kernel: Optional[GirsanovKernel]
    x0: float
    dt: float
    seed: int
    noise_dt: Optional[float] = None
    antithetic: bool = False
    record_every: int = 0
    monitors: dict = field(default_factory=dict)
    extra_kernels: dict = field(default_factory=dict)
    admissibility_tol: float = 1e-9


def _coeffs(market, t, F):
    mu, sigma, _ = market.coefficients_at(t, F)
    return mu, sigma


def _exposure(pi, mu, sigma):
    drift = pi @ mu if mu.ndim == 1 else np.einsum("bm,bm->b", pi, mu)
    vol = np.einsum("bm,...mn->bn", pi, sigma) if sigma.ndim == 2 else \
        np.einsum("bm,bmn->bn", pi, sigma)
    return drift, vol


def _check_admissible(spec, pi, q):
    tol = spec.admissibility_tol
    if np.any(q < -tol):
        raise AdmissibilityError(f"strategy emitted q = {q.min():.3g} < 0")
    cone = getattr(spec.strategy, "cone", None)
    if cone is not None:
        if cone.A.shape[0] == 0:
            return
        lim = tol * (1.0 + np.abs(pi).max())
        if np.any(pi @ cone.A.T < -lim):
            viol = cone.violation(pi)
            raise AdmissibilityError(f"portfolio outside the cone (violation {viol.max():.3g})")


def _simulate_block(spec: SimulationSpec, block: int, n_block: int) -> dict:
    market, ins, strat, kernel = spec.market, spec.insurance, spec.strategy, spec.kernel
    times = market.grid(spec.dt)
    K, dt = len(times) - 1, spec.dt
    if spec.antithetic and n_block % 2:
        raise ValidationError("antithetic sampling needs an even block size")
    g_w, g_c = block_streams(spec.seed, block)
    n_draw = n_block // 2 if spec.antithetic else n_block
    claims = ClaimEvents.sample(g_c, ins, market.horizon, n_draw)
    if spec.antithetic:
        claims = claims.tiled(n_draw)
    by_step = claims.steps(dt, K)
    noise = BrownianStream(g_w, n_block, market.n, dt, spec.noise_dt or dt, spec.antithetic)
    factor = market.factor
    sizes = ins.claims.y
    comp = ins.b + ins.intensity * ins.claims.mean if ins.has_jumps else 0.0

    X = np.full(n_block, float(spec.x0))
    F = None if factor is None else np.tile(factor.initial, (n_block, 1))
    kernels = ([kernel] if kernel is not None else []) + list(spec.extra_kernels.values())
    lams = [np.ones(n_block) for _ in kernels]
    Lam = lams[0] if kernel is not None else None
    W = np.zeros((n_block, market.n))
    clamps = 0
    rec_idx = list(range(0, K + 1, spec.record_every)) if spec.record_every else []
    if rec_idx and rec_idx[-1] != K:
        rec_idx.append(K)
    records = {"X": [], "Lambda": []} if rec_idx else {}
    if rec_idx and F is not None:
        records["F"] = []
    mon = {name: fn(times[0], X, Lam, F) for name, fn in spec.monitors.items()}

    def record(k):
        if k in rec_idx:
            records["X"].append(X.copy())
            records["Lambda"].append(Lam.copy() if Lam is not None else np.ones(n_block))
            if F is not None:
                records["F"].append(F.copy())

    record(0)
    for k in range(K):
        t, t1 = times[k], times[k + 1]
        r = float(market.rate(t))
        mu, sigma = _coeffs(market, t, F)
        pi, q, clamped = strat.rule(t, X, F)
        pi = np.broadcast_to(pi, (n_block, market.m))
        q = np.broadcast_to(q, (n_block,))
        _check_admissible(spec, pi, q)
        clamps += int(np.count_nonzero(clamped))
        dW = noise.next()
        drift, vol = _exposure(pi, mu, sigma)
        X_next = X + (r * X + drift + comp * q + ins.a) * dt + np.einsum("bn,bn->b", vol, dW)
        for i, ker in enumerate(kernels):
            # kept unbroadcast: deterministic kernels return one row for all paths
            psi = np.asarray(ker.psi(t, F))
            ker.check(psi)
            lams[i] = lams[i] * lambda_diffusion_factor(ker.eta(t, F), psi, dW, dt, ins)
        if F is not None:
            F = F + factor.drift(F) * dt + dW @ factor.vol.T
        X = X_next
        W += dW
        for paths, atoms in by_step.get(k, []):
            Fp = None if F is None else F[paths]
            _, qc, _ = strat.rule(t1, X[paths], Fp)
            qc = np.broadcast_to(qc, (len(paths),))
            _check_admissible(spec, np.zeros((len(paths), market.m)), qc)
            X[paths] -= qc * sizes[atoms]
            for i, ker in enumerate(kernels):
                psi_c = np.asarray(ker.psi(t1, Fp))
                ker.check(psi_c)
                psi_c = psi_c[atoms] if psi_c.ndim == 1 else psi_c[np.arange(len(paths)), atoms]
                lams[i][paths] *= 1.0 + psi_c
            if F is not None:
                F[paths] += sizes[atoms][:, None] * factor.jump
        for ker, lam in zip(kernels, lams):
            if np.any(lam <= 0):
                bad = int(np.flatnonzero(lam <= 0)[0])
                raise PositivityError(f"density of kernel {ker.name!r} non-positive on block "
                                      f"{block} path {bad} at t={t1:.6g}")
        Lam = lams[0] if kernel is not None else None
        for name, fn in spec.monitors.items():
            mon[name] = np.maximum(mon[name], fn(t1, X, Lam, F))
        record(k + 1)

    count, total = claims.per_path(n_block, sizes)
    return {"X_T": X, "Lambda_T": Lam, "W_T": W, "claim_count": count, "claim_total": total,
            "clamps": clamps, "records": {k: np.array(v) for k, v in records.items()},
            "monitors": mon, "record_index": np.array(rec_idx, dtype=int),
            "extra": dict(zip(spec.extra_kernels, lams[1 if kernel is not None else 0:]))}


def simulate_paths(market: MarketModel, insurance: InsuranceParams, strategy,
                   kernel: Optional[GirsanovKernel] = None, *, n_paths: int, dt: float,
                   seed: int, x0: float, noise_dt: Optional[float] = None,
                   antithetic: bool = False, record_every: int = 0,
                   monitors: Optional[dict] = None, extra_kernels: Optional[dict] = None,
                   workers: int = 1,
                   block_size: int = BLOCK_SIZE) -> PathBundle:
    """Simulate ``n_paths`` paths of wealth (and the density if ``kernel``).

    ``strategy.rule(t, X, F)`` must return ``(pi, q, clamped)``; when the
    strategy has a ``cone`` attribute every portfolio is checked against it.
    ``monitors`` maps names to ``fn(t, X, Lambda, F) -> (N,)`` whose running
    maxima over the grid are returned per path. ``extra_kernels`` maps
    names to further kernels whose densities are co-simulated on the same
    paths (terminal values in ``extra_Lambda_T``).
    """
    if n_paths < 1:
        raise ValidationError("need at least one path")
    spec = SimulationSpec(market, insurance, strategy, kernel, x0, dt, seed, noise_dt,
                          antithetic, record_every, dict(monitors or {}),
                          dict(extra_kernels or {}))
    market.grid(dt)
    sizes = [min(block_size, n_paths - s) for s in range(0, n_paths, block_size)]
    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _simulate_block(spec, b, sizes[b]), range(len(sizes))))
    else:
        parts = [_simulate_block(spec, b, s) for b, s in enumerate(sizes)]

    cat = lambda key, axis=0: np.concatenate([p[key] for p in parts], axis=axis)
    return PathBundle(
        times=market.grid(dt), seed=seed, x0=float(x0), antithetic=antithetic,
        X_T=cat("X_T"), Lambda_T=None if kernel is None else cat("Lambda_T"), W_T=cat("W_T"),
        claim_count=cat("claim_count"), claim_total=cat("claim_total"),
        clamp_count=sum(p["clamps"] for p in parts), record_index=parts[0]["record_index"],
        records={k: np.concatenate([p["records"][k] for p in parts], axis=1)
                 for k in parts[0]["records"]},
        monitors={k: np.concatenate([p["monitors"][k] for p in parts]) for k in spec.monitors},
        extra_Lambda_T={k: np.concatenate([p["extra"][k] for p in parts])
                        for k in spec.extra_kernels})
