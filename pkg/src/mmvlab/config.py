"""Experiment configuration: one JSON document per experiment.

The document is checked against :data:`SCHEMA` and then against the
cross-field rules (``m <= n``, ``eta_r >= eta``, ``lambda >= 0``,
``theta > 0``, grid compatibility) before anything is computed.
:meth:`ExperimentConfig.to_dict` emits a canonical form (scalars expanded
to schedules, defaults filled in) so that parsing it again gives an equal
config.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Union

import jsonschema
import numpy as np

from .cone import ConeConstraint
from .lsmc import LsmcSettings
from .model import (ClaimDistribution, DeterministicCoefficients, InsuranceParams, MarketModel,
                    OUFactorModel, PiecewiseConstant, ValidationError)


class ConfigError(ValidationError):
    """Invalid experiment document; ``errors`` lists ``{"path", "message"}`` items."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{e['path']}: {e['message']}" for e in self.errors))

    def to_dict(self) -> dict:
        return {"error": "validation", "errors": self.errors}


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}


def _schedule(value_schema):
    return {"oneOf": [
        value_schema,
        {"type": "object", "required": ["times", "values"], "additionalProperties": False,
         "properties": {"times": {"type": "array", "items": _num, "minItems": 2},
                        "values": {"type": "array", "items": value_schema, "minItems": 1}}},
    ]}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["market", "insurance", "claims", "cone", "theta", "x"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "market": {
            "type": "object",
            "required": ["horizon", "rate", "coefficients"],
            "additionalProperties": False,
            "properties": {
                "horizon": _pos,
                "rate": _schedule(_num),
                "delta": _pos,
                "coefficients": {"oneOf": [
                    {"type": "object", "required": ["type", "mu", "sigma"],
                     "additionalProperties": False,
                     "properties": {"type": {"const": "deterministic"},
                                    "mu": _schedule(_vec), "sigma": _schedule(_mat)}},
                    {"type": "object",
                     "required": ["type", "kappa", "mean", "vol", "initial", "mu_base",
                                  "mu_amp", "mu_load", "sigma_base"],
                     "additionalProperties": False,
                     "properties": {"type": {"const": "factor"},
                                    "kappa": _vec, "mean": _vec, "vol": _mat, "jump": _vec,
                                    "initial": _vec, "mu_base": _vec, "mu_amp": _vec,
                                    "mu_load": _mat, "sigma_base": _mat, "vol_low": _pos,
                                    "vol_high": _pos, "vol_load": _vec}},
                ]},
            },
        },
        "insurance": {
            "type": "object",
            "required": ["intensity", "loading", "reinsurer_loading"],
            "additionalProperties": False,
            "properties": {"intensity": _num, "loading": _num, "reinsurer_loading": _num},
        },
        "claims": {
            "type": "object",
            "required": ["atoms"],
            "additionalProperties": False,
            "properties": {
                "atoms": {"type": "array", "minItems": 1,
                          "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
                "y_max": _pos,
            },
        },
        "cone": {"oneOf": [
            {"type": "object", "required": ["type", "nonnegative"], "additionalProperties": False,
             "properties": {"type": {"const": "orthant"},
                            "nonnegative": {"type": "array", "items": {"type": "boolean"},
                                            "minItems": 1}}},
            {"type": "object", "required": ["type", "generators"], "additionalProperties": False,
             "properties": {"type": {"const": "generators"}, "generators": _mat}},
            {"type": "object", "required": ["type", "A"], "additionalProperties": False,
             "properties": {"type": {"const": "halfspaces"}, "A": _mat}},
        ]},
        "theta": _num,
        "x": _num,
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt": _pos,
                "lsmc": {"type": "object", "additionalProperties": False,
                         "properties": {"dt": _pos,
                                        "n_paths": {"type": "integer", "minimum": 2},
                                        "degree": {"type": "integer", "minimum": 0},
                                        "ridge": {"type": "number", "minimum": 0},
                                        "floor": _pos,
                                        "max_clamp_rate": {"type": "number", "minimum": 0},
                                        "certificate_margin": {"type": "number", "minimum": 0},
                                        "initial_spread": {"type": "number", "minimum": 0},
                                        "seed": {"type": "integer", "minimum": 0}}},
            },
        },
        "verification": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_paths": {"type": "integer", "minimum": 2},
                "dt": _pos,
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0},
                          "minItems": 1},
                "antithetic": {"type": "boolean"},
                "k_se": _pos,
                "strategies": {"oneOf": [{"const": "all"},
                                         {"type": "array", "items": {"type": "string"}}]},
                "kernels": {"oneOf": [{"const": "all"},
                                      {"type": "array", "items": {"type": "string"}}]},
                "identity_levels": {"type": "integer", "minimum": 2},
                "identity_min_order": _num,
                "max_clamp_rate": {"type": "number", "minimum": 0},
                "frontier_points": {"type": "integer", "minimum": 2},
                "frontier_span": _pos,
            },
        },
        "output": {"type": "string"},
    },
}


def _ints(a):
    return tuple(int(v) for v in a)


def _tup(a):
    """Nested tuple of floats (hashable and comparable)."""
    if isinstance(a, (list, tuple, np.ndarray)):
        return tuple(_tup(v) for v in a)
    return float(a)


def _lists(a):
    if isinstance(a, tuple):
        return [_lists(v) for v in a]
    return a


def _as_schedule(block, horizon):
    if isinstance(block, dict):
        return _tup(block["times"]), _tup(block["values"])
    return (0.0, float(horizon)), (_tup(block),)


@dataclass(frozen=True)
class ScheduleConfig:
    times: tuple
    values: tuple

    def build(self) -> PiecewiseConstant:
        return PiecewiseConstant(np.array(self.times), np.array(self.values))

    def to_dict(self) -> dict:
        return {"times": list(self.times), "values": _lists(self.values)}


@dataclass(frozen=True)
class MarketConfig:
    horizon: float
    rate: ScheduleConfig
    kind: str                     # "deterministic" or "factor"
    mu: Optional[ScheduleConfig] = None
    sigma: Optional[ScheduleConfig] = None
    factor: Optional[tuple] = None  # sorted (field, value) pairs
    delta: float = 1e-6

    @property
    def m(self) -> int:
        if self.kind == "deterministic":
            return len(self.sigma.values[0])
        return len(dict(self.factor)["sigma_base"])

    @property
    def n(self) -> int:
        if self.kind == "deterministic":
            return len(self.sigma.values[0][0])
        return len(dict(self.factor)["sigma_base"][0])

    def build(self) -> MarketModel:
        if self.kind == "deterministic":
            coef = DeterministicCoefficients(self.mu.build(), self.sigma.build())
        else:
            kw = {k: (np.array(v) if isinstance(v, tuple) else v) for k, v in self.factor}
            d = len(kw["kappa"])
            kw.setdefault("jump", np.zeros(d))
            coef = OUFactorModel(**kw)
        return MarketModel(self.horizon, self.rate.build(), coef, self.delta)

    def to_dict(self) -> dict:
        if self.kind == "deterministic":
            coef = {"type": "deterministic", "mu": self.mu.to_dict(), "sigma": self.sigma.to_dict()}
        else:
            coef = {"type": "factor", **{k: _lists(v) for k, v in self.factor}}
        return {"horizon": self.horizon, "rate": self.rate.to_dict(), "delta": self.delta,
                "coefficients": coef}


@dataclass(frozen=True)
class InsuranceConfig:
    intensity: float
    loading: float
    reinsurer_loading: float
    atoms: tuple                  # ((y, p), ...)
    y_max: float

    def claims(self) -> ClaimDistribution:
        return ClaimDistribution.from_atoms(self.atoms, self.y_max)

    def build(self) -> InsuranceParams:
        return InsuranceParams(self.intensity, self.loading, self.reinsurer_loading, self.claims())


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    lsmc: LsmcSettings

    def to_dict(self) -> dict:
        return {"dt": self.dt, "lsmc": asdict(self.lsmc)}


@dataclass(frozen=True)
class VerificationConfig:
    n_paths: int = 100_000
    dt: Optional[float] = None     # None means T/2000
    seeds: tuple = (0,)
    antithetic: bool = False
    k_se: float = 3.0
    strategies: Union[str, tuple] = "all"
    kernels: Union[str, tuple] = "all"
    identity_levels: int = 4
    identity_min_order: float = 0.4
    max_clamp_rate: float = 0.005
    frontier_points: int = 41
    frontier_span: float = 2.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        for k in ("strategies", "kernels"):
            if isinstance(out[k], tuple):
                out[k] = list(out[k])
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an experiment needs; build model objects on demand."""

    name: str
    market: MarketConfig
    insurance: InsuranceConfig
    cone: tuple                    # canonical cone block as sorted (key, value) pairs
    theta: float
    x: float
    solver: SolverConfig
    verification: VerificationConfig
    output: str = "runs"

    # ---------------------------------------------------------------- parsing

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        validator = jsonschema.Draft202012Validator(SCHEMA)
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
        if errors:
            raise ConfigError([{"path": "/" + "/".join(str(p) for p in e.absolute_path),
                                "message": e.message} for e in errors])
        m = doc["market"]
        T = float(m["horizon"])
        coef = m["coefficients"]
        if coef["type"] == "deterministic":
            market = MarketConfig(T, ScheduleConfig(*_as_schedule(m["rate"], T)), "deterministic",
                                  mu=ScheduleConfig(*_as_schedule(coef["mu"], T)),
                                  sigma=ScheduleConfig(*_as_schedule(coef["sigma"], T)),
                                  delta=float(m.get("delta", 1e-6)))
        else:
            fac = {k: (_tup(v) if isinstance(v, list) else float(v))
                   for k, v in coef.items() if k != "type"}
            fac.setdefault("vol_low", 1.0)
            fac.setdefault("vol_high", 1.0)
            market = MarketConfig(T, ScheduleConfig(*_as_schedule(m["rate"], T)), "factor",
                                  factor=tuple(sorted(fac.items())),
                                  delta=float(m.get("delta", 1e-6)))
        ins, claims = doc["insurance"], doc["claims"]
        atoms = tuple((float(y), float(p)) for y, p in claims["atoms"])
        y_max = float(claims.get("y_max", max(y for y, _ in atoms)))
        insurance = InsuranceConfig(float(ins["intensity"]), float(ins["loading"]),
                                    float(ins["reinsurer_loading"]), atoms, y_max)
        cone = ConeConstraint.from_dict(doc["cone"]).to_dict()
        sv = doc.get("solver", {})
        dt = float(sv.get("dt", T / 1000))
        lsmc_doc = dict(sv.get("lsmc", {}))
        lsmc_doc.setdefault("dt", T / 200)
        solver = SolverConfig(dt, LsmcSettings(**lsmc_doc))
        vd = dict(doc.get("verification", {}))
        if "seeds" in vd:
            vd["seeds"] = _ints(vd["seeds"])
        for k in ("strategies", "kernels"):
            if isinstance(vd.get(k), list):
                vd[k] = tuple(vd[k])
        ver = VerificationConfig(**vd)
        if ver.dt is None:
            ver = replace(ver, dt=T / 2000)
        cfg = cls(doc.get("name", "experiment"), market, insurance,
                  tuple(sorted((k, _freeze(v)) for k, v in cone.items())),
                  float(doc["theta"]), float(doc["x"]), solver, ver, doc.get("output", "runs"))
        cfg.check()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([{"path": "/", "message": f"invalid JSON: {exc}"}]) from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError([{"path": "/", "message": str(exc)}]) from exc
        return cls.from_json(text)

    # ---------------------------------------------------------------- checks

    def check(self) -> None:
        """Cross-field rules; raises :class:`ConfigError` listing every failure."""
        errs = []

        def err(path, msg):
            errs.append({"path": path, "message": msg})

        mk, ins = self.market, self.insurance
        if mk.m > mk.n:
            err("/market/coefficients", f"need m <= n, got m={mk.m}, n={mk.n}")
        if ins.intensity < 0:
            err("/insurance/intensity", "claim intensity must be >= 0")
        if ins.loading <= 0:
            err("/insurance/loading", "insurer loading must be > 0")
        if ins.reinsurer_loading < ins.loading:
            err("/insurance/reinsurer_loading", "reinsurer loading must be >= insurer loading")
        if not self.theta > 0:
            err("/theta", "theta must be > 0")
        cone_m = ConeConstraint.from_dict(self.cone_dict()).m
        if cone_m != mk.m:
            err("/cone", f"cone lives in R^{cone_m} but there are {mk.m} assets")
        if errs:
            raise ConfigError(errs)
        # component invariants (probabilities, sigma floor, schedules, grids)
        for path, fn in (("/claims", self.insurance.claims), ("/insurance", self.insurance.build),
                         ("/market", self.market.build)):
            try:
                fn()
            except ValidationError as exc:
                err(path, str(exc))
        if errs:
            raise ConfigError(errs)
        market = self.market.build()
        for path, dt in (("/solver/dt", self.solver.dt), ("/verification/dt", self.verification.dt)):
            try:
                market.grid(dt)
            except ValidationError as exc:
                err(path, str(exc))
        coarse = self.verification.dt * 2 ** (self.verification.identity_levels - 1)
        try:
            market.grid(coarse)
        except ValidationError as exc:
            err("/verification/identity_levels", f"coarsest identity step: {exc}")
        if market.is_random:
            try:
                market.grid(self.solver.lsmc.dt)
            except ValidationError as exc:
                err("/solver/lsmc/dt", str(exc))
        if errs:
            raise ConfigError(errs)

    # ---------------------------------------------------------------- building

    def cone_dict(self) -> dict:
        return {k: _thaw(v) for k, v in self.cone}

    def build_market(self) -> MarketModel:
        return self.market.build()

    def build_insurance(self) -> InsuranceParams:
        return self.insurance.build()

    def build_cone(self) -> ConeConstraint:
        return ConeConstraint.from_dict(self.cone_dict())

    # ---------------------------------------------------------------- output

    def to_dict(self) -> dict:
        ins = self.insurance
        return {
            "name": self.name,
            "market": self.market.to_dict(),
            "insurance": {"intensity": ins.intensity, "loading": ins.loading,
                          "reinsurer_loading": ins.reinsurer_loading},
            "claims": {"atoms": [list(a) for a in ins.atoms], "y_max": ins.y_max},
            "cone": self.cone_dict(),
            "theta": self.theta,
            "x": self.x,
            "solver": self.solver.to_dict(),
            "verification": self.verification.to_dict(),
            "output": self.output,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def sha256(self) -> str:
        """Hash of the canonical document (independent of key order and formatting)."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy whose first verification seed is ``seed`` (other seeds shift along)."""
        seeds = self.verification.seeds
        new = tuple(seed + (s - seeds[0]) for s in seeds)
        return replace(self, verification=replace(self.verification, seeds=new))


def _freeze(v):
    if isinstance(v, list):
        return tuple(_freeze(u) for u in v)
    return v


def _thaw(v):
    if isinstance(v, tuple):
        return [_thaw(u) for u in v]
    return v
