"""Closed convex polyhedral cones and projection onto ``sigma' Pi``.

A cone is stored in both forms: halfspaces ``Pi = {pi : A pi >= 0}`` and
generators ``Pi = cone(G)``. The projection solves

    min_{pi in Pi} |sigma' pi - v|^2

exactly by enumerating candidate active sets: for every independent subset
S of constraint rows the quadratic is minimised over ``{A_S pi = 0}``, and
the best primal-feasible candidate is kept. The optimum always appears among
these candidates (its own active set reduces it to an equality-constrained
least-squares problem), so the answer is exact up to rounding.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .model import InsuranceParams, PositivityError, ValidationError

_RANK_TOL = 1e-10


class ConeProjectionError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3g})")
        self.residual = residual


def _null_space(A, m):
    if A.shape[0] == 0:
        return np.eye(m)
    _, s, vt = np.linalg.svd(A)
    rank = int(np.sum(s > _RANK_TOL * max(1.0, s[0])))
    return vt[rank:].T


def _rank(A):
    if A.size == 0:
        return 0
    s = np.linalg.svd(A, compute_uv=False)
    return int(np.sum(s > _RANK_TOL * max(1.0, s[0])))


def _unit_columns(G):
    G = np.asarray(G, dtype=float)
    if G.size == 0:
        return G
    norms = np.linalg.norm(G, axis=0)
    return G[:, norms > _RANK_TOL] / norms[norms > _RANK_TOL]


def _dedupe_columns(G, tol=1e-9):
    kept = []
    for g in G.T:
        if not any(np.linalg.norm(g - k) < tol for k in kept):
            kept.append(g)
    return np.array(kept).T if kept else np.zeros((G.shape[0], 0))


def halfspaces_to_generators(A, m: int) -> np.ndarray:
    """Extreme rays plus +/- lineality directions of ``{pi : A pi >= 0}``."""
    A = np.asarray(A, dtype=float).reshape(-1, m)
    lineality = _null_space(A, m)
    # orthonormal basis of the lineality space's complement
    complement = _null_space(lineality.T, m) if lineality.shape[1] else np.eye(m)
    mp = complement.shape[1]
    rays = []
    if mp > 0:
        AQ = A @ complement
        scale = max(1.0, np.abs(AQ).max()) if AQ.size else 1.0
        for S in itertools.combinations(range(A.shape[0]), mp - 1):
            sub = AQ[list(S)]
            if _rank(sub) != mp - 1:
                continue
            d = _null_space(sub, mp)
            if d.shape[1] != 1:
                continue
            d = d[:, 0]
            for sign in (1.0, -1.0):
                if np.all(AQ @ (sign * d) >= -1e-12 * scale):
                    rays.append(complement @ (sign * d))
    cols = rays + list(lineality.T) + list(-lineality.T)
    G = np.array(cols).T if cols else np.zeros((m, 0))
    return _dedupe_columns(_unit_columns(G))


def generators_to_halfspaces(G, m: int) -> np.ndarray:
    G = np.asarray(G, dtype=float).reshape(m, -1)
    if G.shape[1] == 0:
        return np.vstack([np.eye(m), -np.eye(m)])
    # the dual cone {w : G'w >= 0} is generated by the rows we need
    H = halfspaces_to_generators(G.T, m)
    return H.T


@dataclass(frozen=True)
class ConeConstraint:
    """Closed convex polyhedral cone in R^m.

    Build it with :meth:`orthant`, :meth:`from_generators` or
    :meth:`from_halfspaces`; ``kind`` and ``spec`` remember the original
    representation for serialisation.
    """

    m: int
    A: np.ndarray
    G: np.ndarray
    kind: str
    spec: dict = field(compare=False)
    faces: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).reshape(-1, self.m)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "G", np.asarray(self.G, dtype=float).reshape(self.m, -1))
        faces, seen = [], []
        for size in range(0, min(A.shape[0], self.m) + 1):
            for S in itertools.combinations(range(A.shape[0]), size):
                sub = A[list(S)]
                if _rank(sub) != size:
                    continue
                N = _null_space(sub, self.m)
                proj = N @ N.T
                if any(np.allclose(proj, p, atol=1e-10) for p in seen):
                    continue
                seen.append(proj)
                faces.append(N)
        object.__setattr__(self, "faces", tuple(faces))

    @classmethod
    def orthant(cls, nonnegative) -> "ConeConstraint":
        """Product cone: coordinate i is ``>= 0`` if ``nonnegative[i]`` else free."""
        flags = np.asarray(nonnegative, dtype=bool).ravel()
        m = flags.size
        eye = np.eye(m)
        A = eye[flags]
        G = np.hstack([eye[:, flags], eye[:, ~flags], -eye[:, ~flags]])
        return cls(m, A, G, "orthant", {"type": "orthant", "nonnegative": flags.tolist()})

    @classmethod
    def unconstrained(cls, m: int) -> "ConeConstraint":
        return cls.orthant([False] * m)

    @classmethod
    def nonnegative(cls, m: int) -> "ConeConstraint":
        return cls.orthant([True] * m)

    @classmethod
    def from_generators(cls, G) -> "ConeConstraint":
        G = np.atleast_2d(np.asarray(G, dtype=float))
        m = G.shape[0]
        return cls(m, generators_to_halfspaces(G, m), _unit_columns(G), "generators",
                   {"type": "generators", "generators": G.T.tolist()})

    @classmethod
    def from_halfspaces(cls, A) -> "ConeConstraint":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        m = A.shape[1]
        return cls(m, A, halfspaces_to_generators(A, m), "halfspaces",
                   {"type": "halfspaces", "A": A.tolist()})

    @classmethod
    def from_dict(cls, spec: dict) -> "ConeConstraint":
        kind = spec.get("type")
        if kind == "orthant":
            return cls.orthant(spec["nonnegative"])
        if kind == "generators":
            # generators listed one per row in the config
            return cls.from_generators(np.asarray(spec["generators"], dtype=float).T)
        if kind == "halfspaces":
            return cls.from_halfspaces(spec["A"])
        raise ValidationError(f"unknown cone type {kind!r}")

    def to_dict(self) -> dict:
        return dict(self.spec)

    def violation(self, pi) -> np.ndarray:
        """Largest halfspace violation ``max((-A pi)^+)`` per row of ``pi``."""
        pi = np.asarray(pi, dtype=float)
        if self.A.shape[0] == 0:
            return np.zeros(pi.shape[:-1])
        return np.maximum(-(pi @ self.A.T), 0.0).max(axis=-1)

    def contains(self, pi, tol=1e-9) -> np.ndarray:
        return self.violation(pi) <= tol

    def distance(self, pi) -> np.ndarray:
        pi = np.asarray(pi, dtype=float)
        res = project_cone(pi, np.eye(self.m), self)
        return np.linalg.norm(res.xi - pi, axis=-1)


@dataclass(frozen=True)
class ProjectionResult:
    xi: np.ndarray
    beta: np.ndarray
    kkt_residual: np.ndarray


def kkt_residual(v, sigma, cone: ConeConstraint, xi, beta):
    """Max of complementarity, polar-cone and primal violations."""
    gap = v - xi
    compl = np.abs(np.sum(xi * gap, axis=-1))
    sg = (sigma @ gap[..., None])[..., 0]
    polar = np.maximum(sg @ cone.G, 0.0).max(axis=-1) if cone.G.shape[1] else np.zeros_like(compl)
    return np.maximum(np.maximum(compl, polar), cone.violation(beta))


def project_cone(v, sigma, cone: ConeConstraint, check: bool = False) -> ProjectionResult:
    """Project ``v`` (…, n) onto ``sigma' Pi`` with ``sigma`` (…, m, n).

    Returns the projection ``xi``, a witness ``beta`` in ``Pi`` with
    ``sigma' beta = xi`` and the KKT residual. Leading axes broadcast.
    """
    v = np.asarray(v, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    m, n = sigma.shape[-2:]
    if m != cone.m:
        raise ValidationError(f"cone lives in R^{cone.m}, sigma has {m} rows")
    batch = np.broadcast_shapes(v.shape[:-1], sigma.shape[:-2])
    vb = np.broadcast_to(v, batch + (n,)).reshape(-1, n)
    sb = np.broadcast_to(sigma, batch + (m, n)).reshape(-1, m, n)
    gram = sb @ np.swapaxes(sb, -1, -2)
    rhs = (sb @ vb[..., None])[..., 0]
    scale = 1.0 + np.linalg.norm(vb, axis=-1)

    best_obj = np.full(len(vb), np.inf)
    best_pi = np.zeros((len(vb), m))
    for N in cone.faces:
        k = N.shape[1]
        if k == 0:
            pi = np.zeros((len(vb), m))
        else:
            H = N.T @ gram @ N
            w = np.linalg.solve(H, (rhs @ N)[..., None])[..., 0]
            pi = w @ N.T
        resid = (pi[:, None, :] @ sb)[:, 0, :] - vb
        obj = np.sum(resid * resid, axis=-1)
        feasible = cone.violation(pi) <= 1e-11 * scale
        better = feasible & (obj < best_obj)
        best_obj = np.where(better, obj, best_obj)
        best_pi[better] = pi[better]
    if not np.all(np.isfinite(best_obj)):
        raise ConeProjectionError("no feasible active set found")
    beta = best_pi
    xi = (beta[:, None, :] @ sb)[:, 0, :]
    res = kkt_residual(vb, sb, cone, xi, beta)
    if check and np.any(res > 1e-9 * scale ** 2):
        raise ConeProjectionError("projection KKT conditions not met", float(res.max()))
    return ProjectionResult(xi.reshape(batch + (n,)), beta.reshape(batch + (m,)),
                            res.reshape(batch))


class FixedSigmaProjector:
    """Projection onto ``sigma' Pi`` for one fixed ``sigma``.

    Precomputes the linear map of every face so each call is a handful of
    array operations; used on the hot paths with deterministic coefficients.
    """

    def __init__(self, sigma, cone: ConeConstraint):
        self.sigma = np.asarray(sigma, dtype=float)
        self.cone = cone
        m, n = self.sigma.shape
        gram = self.sigma @ self.sigma.T
        maps = []
        for N in cone.faces:
            if N.shape[1] == 0:
                maps.append(np.zeros((m, n)))
            else:
                H = N.T @ gram @ N
                maps.append(N @ np.linalg.solve(H, N.T @ self.sigma))
        self.maps = np.array(maps)                      # (faces, m, n)
        self.images = np.einsum("mk,fmn->fkn", self.sigma, self.maps)  # sigma' @ map

    def __call__(self, v) -> ProjectionResult:
        v = np.asarray(v, dtype=float)
        cand = np.einsum("fmn,...n->...fm", self.maps, v)
        xi_c = np.einsum("fkn,...n->...fk", self.images, v)
        obj = np.sum((xi_c - v[..., None, :]) ** 2, axis=-1)
        scale = 1.0 + np.linalg.norm(v, axis=-1)
        feasible = self.cone.violation(cand) <= 1e-11 * scale[..., None]
        obj = np.where(feasible, obj, np.inf)
        best = np.argmin(obj, axis=-1)
        beta = np.take_along_axis(cand, best[..., None, None], axis=-2)[..., 0, :]
        xi = np.take_along_axis(xi_c, best[..., None, None], axis=-2)[..., 0, :]
        return ProjectionResult(xi, beta, kkt_residual(v, self.sigma, self.cone, xi, beta))


def rho_mmv(Y, V, insurance: InsuranceParams):
    """Optimal reinsurance scalar of the MMV problem.

    ``(sum V/(Y+V) y lam p + b)^+ / sum y^2 lam p / (Y+V)``; ``V`` carries
    one value per claim atom on its last axis.
    """
    if not insurance.has_jumps:
        raise ValidationError("rho is undefined without claims (lambda = 0)")
    Y = np.asarray(Y, dtype=float)
    V = np.asarray(V, dtype=float)
    Yb = Y[..., None]
    total = Yb + V
    if np.any(Y <= 0) or np.any(total <= 0):
        raise PositivityError("need Y > 0 and Y + V > 0 at every atom")
    y, w = insurance.claims.y, insurance.jump_weights
    num = np.sum(V / total * y * w, axis=-1) + insurance.b
    den = np.sum(y ** 2 * w / total, axis=-1)
    return np.maximum(num, 0.0) / den
