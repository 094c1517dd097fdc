"""Admissible action sets ``{u : a_i . u >= b_i, lo <= u <= hi}``.

``build_zcbf_constraints`` produces one affine row per spherical obstacle for a
double integrator (``p'' = u``) from the relative-degree-2 barrier condition

    h'' + 2 a1 h' + a0^2 h >= -sigma,   h(p) = |p - c|^2 - (R + margin)^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

DEFAULT_SLACK_WEIGHT = 1e3


class InfeasibleRowError(ValueError):
    """A degenerate constraint row (zero coefficients) that can never hold."""


@dataclass(frozen=True)
class Obstacle:
    center: np.ndarray
    radius: float
    margin: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))
        if self.radius <= 0 or self.margin < 0 or self.radius + self.margin <= 0:
            raise ValueError("obstacle needs radius > 0 and margin >= 0")

    @property
    def inflated(self) -> float:
        return self.radius + self.margin

    def h(self, p) -> float:
        d = np.asarray(p, dtype=float) - self.center
        return float(d @ d - self.inflated**2)


@dataclass(frozen=True)
class AdmissibleSet:
    """Closed convex polyhedron in action space.

    ``A`` has one row per constraint ``A[i] . u >= b[i]``.  When ``soft`` is set,
    a shared slack ``sigma >= 0`` relaxes every row and is penalized by
    ``slack_weight * sigma^2`` in projection objectives; box bounds are never
    relaxed.
    """

    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    slack_weight: float = DEFAULT_SLACK_WEIGHT
    soft: bool = False
    dim: int = field(default=0)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        dim = self.dim or (A.shape[1] if A.ndim == 2 and A.size else 0)
        if dim == 0 and self.lower is not None:
            dim = np.asarray(self.lower).size
        if dim == 0:
            raise ValueError("cannot infer action dimension; pass dim=")
        A = A.reshape(-1, dim)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.size:
            raise ValueError("A and b row counts differ")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("constraint coefficients must be finite")
        lo = None if self.lower is None else np.asarray(self.lower, dtype=float).reshape(-1)
        hi = None if self.upper is None else np.asarray(self.upper, dtype=float).reshape(-1)
        if (lo is None) != (hi is None):
            raise ValueError("box needs both lower and upper bounds")
        if lo is not None:
            if lo.size != dim or hi.size != dim or np.any(lo > hi):
                raise ValueError("box bounds must have the action dimension and lower <= upper")
        if self.slack_weight < 0:
            raise ValueError("slack_weight must be nonnegative")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "dim", dim)

    @classmethod
    def from_rows(cls, rows, dim: int, lower=None, upper=None, **kw) -> "AdmissibleSet":
        rows = list(rows)
        A = np.array([np.asarray(a, dtype=float).reshape(dim) for a, _ in rows]).reshape(-1, dim)
        b = np.array([float(bi) for _, bi in rows])
        return cls(A, b, lower, upper, dim=dim, **kw)

    @property
    def n_rows(self) -> int:
        return self.b.size

    @property
    def has_box(self) -> bool:
        return self.lower is not None

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All constraints as ``G u >= h``: rows, then box lower, then box upper."""
        if not self.has_box:
            return self.A, self.b
        eye = np.eye(self.dim)
        return np.vstack([self.A, eye, -eye]), np.concatenate([self.b, self.lower, -self.upper])

    def with_box(self, lower, upper) -> "AdmissibleSet":
        return AdmissibleSet(self.A, self.b, lower, upper, self.slack_weight, self.soft, self.dim)

    def hardened(self) -> "AdmissibleSet":
        return AdmissibleSet(self.A, self.b, self.lower, self.upper, self.slack_weight, False, self.dim)


def contains(aset: AdmissibleSet, u, tol: float = 1e-9) -> bool:
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != aset.dim:
        raise ValueError(f"action has length {u.size}, expected {aset.dim}")
    if aset.n_rows and np.any(aset.A @ u < aset.b - tol):
        return False
    if aset.has_box and (np.any(u < aset.lower - tol) or np.any(u > aset.upper + tol)):
        return False
    return True


def contains_batch(aset: AdmissibleSet, U: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    U = np.atleast_2d(U)
    ok = np.ones(U.shape[0], dtype=bool)
    if aset.n_rows:
        ok &= np.all(U @ aset.A.T >= aset.b - tol, axis=1)
    if aset.has_box:
        ok &= np.all((U >= aset.lower - tol) & (U <= aset.upper + tol), axis=1)
    return ok


def build_zcbf_constraints(
    p,
    v,
    obstacles,
    alpha0: float = 2.0,
    alpha1: float = 2.0,
    lower=None,
    upper=None,
    soft: bool = False,
    slack_weight: float = DEFAULT_SLACK_WEIGHT,
) -> AdmissibleSet:
    """One row ``a . u >= b`` per obstacle for the double integrator.

    With ``d = p - c``: ``h' = 2 d.v`` and ``h'' = 2|v|^2 + 2 d.u``, so
    ``a = 2 d`` and ``b = -(2|v|^2 + 4 a1 d.v + a0^2 h)``.
    """
    p = np.asarray(p, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    rows = []
    for idx, obs in enumerate(obstacles):
        d = p - obs.center
        h = float(d @ d - obs.inflated**2)
        a = 2.0 * d
        b = -(2.0 * float(v @ v) + 4.0 * alpha1 * float(d @ v) + alpha0**2 * h)
        if not np.any(a):
            if b > 0:
                raise InfeasibleRowError(f"state sits at the center of obstacle {idx}; barrier row cannot hold")
            continue
        rows.append((a, b))
    return AdmissibleSet.from_rows(rows, p.size, lower, upper, soft=soft, slack_weight=slack_weight)


def zcbf_expression(p, v, u, obstacle: Obstacle, alpha0: float = 2.0, alpha1: float = 2.0) -> float:
    """Left side ``h'' + 2 a1 h' + a0^2 h`` evaluated at action ``u``."""
    d = np.asarray(p, dtype=float) - obstacle.center
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    h = float(d @ d - obstacle.inflated**2)
    hdot = 2.0 * float(d @ v)
    hddot = 2.0 * float(v @ v) + 2.0 * float(d @ u)
    return hddot + 2.0 * alpha1 * hdot + alpha0**2 * h


@dataclass(frozen=True)
class FeasibilityResult:
    feasible: bool
    point: np.ndarray | None
    margin: float
    certificate: tuple[int, ...] = ()

    def __bool__(self) -> bool:
        return self.feasible


def feasibility_check(aset: AdmissibleSet, margin_cap: float = 1.0, tol: float = 1e-9) -> FeasibilityResult:
    """Max-margin point of the hard constraints via a small LP.

    Maximizes ``t`` subject to ``g_i . u - |g_i| t >= h_i`` over all stacked rows
    (box included) with ``t <= margin_cap``.  A negative optimum means the set
    is empty; the rows carrying positive LP multipliers are returned as the
    infeasibility certificate (indices into ``aset.stacked()``).
    """
    G, h = aset.stacked()
    dim = aset.dim
    if G.shape[0] == 0:
        return FeasibilityResult(True, np.zeros(dim), float("inf"))
    norms = np.linalg.norm(G, axis=1)
    # Variables (u, t); linprog wants A_ub z <= b_ub.
    A_ub = np.hstack([-G, norms[:, None]])
    c = np.zeros(dim + 1)
    c[-1] = -1.0
    bounds = [(None, None)] * dim + [(None, margin_cap)]
    res = linprog(c, A_ub=A_ub, b_ub=-h, bounds=bounds, method="highs")
    if res.status != 0:
        # Unbounded cannot happen (t is capped); treat solver trouble as infeasible.
        return FeasibilityResult(False, None, float("-inf"), tuple(range(G.shape[0])))
    u, t = res.x[:dim], float(res.x[-1])
    if t >= -tol:
        return FeasibilityResult(True, u, t)
    duals = -np.asarray(res.ineqlin.marginals)
    cert = tuple(int(i) for i in np.flatnonzero(duals > 1e-9))
    return FeasibilityResult(False, None, t, cert)
