"""Safe-action selectors.

* ``project_euclidean``: closest admissible action in the 2-norm.
* ``project_weighted``: closest admissible action in the metric ``W``.
* ``safe_q_max``: multi-start maximization of Q over the admissible set.

All three return a ``FilterResult``; in hard mode the action is admissible to
within the QP feasibility tolerance regardless of the objective.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .admissible import AdmissibleSet, contains, contains_batch, feasibility_check
from .qp import solve_qp

DEFAULT_SPD_FLOOR = 1e-4


class NotPositiveDefiniteError(ValueError):
    pass


class InfeasibleSetError(RuntimeError):
    """Hard constraint set is empty; ``certificate`` lists the conflicting rows."""

    def __init__(self, message: str, certificate: tuple[int, ...] = ()):
        super().__init__(message)
        self.certificate = certificate


@dataclass(frozen=True)
class WeightMatrix:
    mat: np.ndarray
    repaired: bool = False
    min_eig_floor: float = DEFAULT_SPD_FLOOR


@dataclass(frozen=True)
class FilterResult:
    action: np.ndarray
    active_rows: tuple[int, ...]
    slack_used: float
    objective: float
    solve_time: float
    iterations: int
    kkt_residual: float = 0.0
    value: float | None = field(default=None)

    def to_dict(self) -> dict:
        return {
            "action": self.action.tolist(),
            "active_rows": list(self.active_rows),
            "slack_used": self.slack_used,
            "objective": self.objective,
            "solve_time": self.solve_time,
            "iterations": self.iterations,
            "kkt_residual": self.kkt_residual,
            "value": self.value,
        }


def spd_repair(H, floor: float = DEFAULT_SPD_FLOOR) -> WeightMatrix:
    """Clamp eigenvalues of symmetric ``H`` below ``floor`` up to ``floor``."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("H must be square")
    if np.max(np.abs(H - H.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(H), initial=0.0)):
        raise ValueError("H is not symmetric")
    Hs = 0.5 * (H + H.T)
    lam, V = np.linalg.eigh(Hs)
    if lam[0] >= floor:
        return WeightMatrix(Hs, False, floor)
    lam = np.maximum(lam, floor)
    out = (V * lam) @ V.T
    return WeightMatrix(0.5 * (out + out.T), True, floor)


def _weight_array(W) -> np.ndarray:
    mat = W.mat if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("weight matrix is not positive definite; apply spd_repair first") from None
    return mat


def project_weighted(aset: AdmissibleSet, u_ref, W, x0=None) -> FilterResult:
    """``argmin 1/2 |u - u_ref|_W^2`` over the set (plus ``slack_weight/2 sigma^2`` when soft).

    ``x0``, if given, must be admissible and is used as the active-set start;
    otherwise a max-margin point is computed.  ``objective`` is reported in the
    same half-squared form.
    """
    t0 = time.perf_counter()
    Wm = _weight_array(W)
    u_ref = np.asarray(u_ref, dtype=float).reshape(-1)
    m = aset.dim
    if u_ref.size != m or Wm.shape != (m, m):
        raise ValueError("dimension mismatch between set, reference action and weight")
    if contains(aset, u_ref, tol=0.0):
        return FilterResult(u_ref.copy(), (), 0.0, 0.0, time.perf_counter() - t0, 0)

    G, h = aset.stacked()
    if not aset.soft:
        if x0 is not None and contains(aset, x0, tol=1e-9):
            start = np.asarray(x0, dtype=float).reshape(-1)
        else:
            fc = feasibility_check(aset)
            if not fc.feasible:
                raise InfeasibleSetError("admissible set is empty", fc.certificate)
            start = fc.point
        sol = solve_qp(Wm, -Wm @ u_ref, G, h, start)
        u, sigma = sol.z, 0.0
        active = sol.active
    else:
        sw = aset.slack_weight
        if sw <= 0:
            raise ValueError("soft mode needs slack_weight > 0")
        nr = aset.n_rows
        Gs = np.zeros((G.shape[0] + 1, m + 1))
        Gs[: G.shape[0], :m] = G
        Gs[:nr, m] = 1.0
        Gs[-1, m] = 1.0
        hs = np.concatenate([h, [0.0]])
        Hs = np.zeros((m + 1, m + 1))
        Hs[:m, :m] = Wm
        Hs[m, m] = sw
        fs = np.concatenate([-Wm @ u_ref, [0.0]])
        u0 = u_ref if not aset.has_box else np.clip(u_ref, aset.lower, aset.upper)
        viol = aset.b - aset.A @ u0 if nr else np.zeros(1)
        z0 = np.concatenate([u0, [max(0.0, float(viol.max(initial=0.0)))]])
        sol = solve_qp(Hs, fs, Gs, hs, z0)
        u, sigma = sol.z[:m], float(max(sol.z[m], 0.0))
        active = tuple(i for i in sol.active if i < G.shape[0])
    d = u - u_ref
    obj = 0.5 * float(d @ Wm @ d) + (0.5 * aset.slack_weight * sigma**2 if aset.soft else 0.0)
    return FilterResult(u, active, sigma, obj, time.perf_counter() - t0, sol.iterations, sol.kkt_residual)


def project_euclidean(aset: AdmissibleSet, u_ref, x0=None) -> FilterResult:
    return project_weighted(aset, u_ref, np.eye(aset.dim), x0=x0)


@dataclass(frozen=True)
class OracleOptions:
    grid_res: float = 0.05
    top_k: int = 8
    max_grid_points: int = 20000
    tol: float = 1e-7
    max_iter: int = 100
    spd_floor: float = DEFAULT_SPD_FLOOR
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None


def action_grid(lower, upper, res: float, max_points: int) -> np.ndarray:
    """Per-coordinate lattice over the box, coarsened until it fits ``max_points``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    m = lower.size
    while True:
        counts = np.maximum(np.floor((upper - lower) / res + 1e-9).astype(int) + 1, 1)
        if np.prod(counts.astype(float)) <= max_points:
            break
        res *= (np.prod(counts.astype(float)) / max_points) ** (1.0 / m) * 1.0001
    axes = [lo + res * np.arange(c) for lo, c in zip(lower, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def _pg_residual(aset, u, g) -> float:
    p = project_euclidean(aset, u + g, x0=u).action
    return float(np.linalg.norm(u - p))


def local_ascent(model, x, aset: AdmissibleSet, u0, opts: OracleOptions = OracleOptions()):
    """Projected Newton ascent from an admissible start.

    Each step solves a weighted projection whose metric is the (repaired)
    negative Hessian, then backtracks on Q along the resulting feasible
    direction.  Stops once the Euclidean projected-gradient residual is below
    ``opts.tol``.
    """
    u = np.asarray(u0, dtype=float).reshape(-1).copy()
    q = model.value(x, u)
    last = None
    for it in range(1, opts.max_iter + 1):
        g = model.grad_u(x, u)
        Wk = spd_repair(-model.hessian_u(x, u), opts.spd_floor).mat
        step = project_weighted(aset, u + np.linalg.solve(Wk, g), Wk, x0=u)
        last = step
        d = step.action - u
        if np.linalg.norm(d) <= opts.tol and _pg_residual(aset, u, g) <= opts.tol:
            return u, q, it, last
        slope = float(g @ d)
        t = 1.0
        for _ in range(50):
            cand = u + t * d
            qc = model.value(x, cand)
            if qc >= q + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            qc, cand = q, u
        if qc <= q and np.linalg.norm(cand - u) == 0.0:
            return u, q, it, last
        u, q = cand, qc
    return u, q, opts.max_iter, last


def safe_q_max(model, x, aset: AdmissibleSet, opts: OracleOptions = OracleOptions()) -> FilterResult:
    """Approximate ``argmax_{u in U(x)} Q(x, u)`` by multi-start local ascent.

    Seeds are the ``top_k`` admissible points (by Q) of a lattice over the action
    box; the max-margin point is used if no lattice point is admissible.  Soft
    sets are treated as hard.
    """
    t0 = time.perf_counter()
    hard = aset.hardened()
    lower = opts.lower if opts.lower is not None else hard.lower
    upper = opts.upper if opts.upper is not None else hard.upper
    if lower is None:
        raise ValueError("safe_q_max needs action box bounds to bound the search")
    grid = action_grid(lower, upper, opts.grid_res, opts.max_grid_points)
    feas = grid[contains_batch(hard, grid, tol=0.0)]
    if feas.shape[0]:
        vals = model.value_batch(x, feas)
        # Descending value, then lexicographically smallest action.
        order = np.lexsort(tuple(feas[:, k] for k in reversed(range(feas.shape[1]))) + (-vals,))
        seeds = feas[order[: opts.top_k]]
    else:
        fc = feasibility_check(hard)
        if not fc.feasible:
            raise InfeasibleSetError("no admissible seed: admissible set is empty", fc.certificate)
        seeds = fc.point[None, :]
    best = None
    total_iters = 0
    for s in seeds:
        u, q, iters, last = local_ascent(model, x, hard, s, opts)
        total_iters += iters
        if best is None:
            best = (u, q, last)
            continue
        bu, bq, _ = best
        tie = abs(q - bq) <= 1e-12 * (1.0 + abs(bq))
        if (q > bq and not tie) or (tie and tuple(u) < tuple(bu)):
            best = (u, q, last)
    u, q, last = best
    active = last.active_rows if last is not None else ()
    return FilterResult(u, active, 0.0, -q, time.perf_counter() - t0, total_iters, 0.0, q)
