"""Primal active-set solver for small dense convex QPs.

    minimize  1/2 z^T H z + f^T z   subject to  G z >= h

``H`` must be positive definite.  The solver needs a feasible starting point.
Ties are broken by lowest row index (blocking constraint on the way in,
multiplier on the way out), and the iteration count is capped at
``2^rows`` (at least 50) to guard against cycling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QPError(RuntimeError):
    pass


@dataclass(frozen=True)
class QPSolution:
    z: np.ndarray
    multipliers: np.ndarray
    active: tuple[int, ...]
    iterations: int
    kkt_residual: float


def _solve_eqp(H, g, Gw):
    """Step ``p`` and multipliers for min 1/2 p^T H p + g^T p s.t. Gw p = 0."""
    n = H.shape[0]
    k = Gw.shape[0]
    if k == 0:
        return np.linalg.solve(H, -g), np.zeros(0)
    K = np.zeros((n + k, n + k))
    K[:n, :n] = H
    K[:n, n:] = -Gw.T
    K[n:, :n] = Gw
    rhs = np.concatenate([-g, np.zeros(k)])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def solve_qp(H, f, G, h, z0, max_iter: int | None = None, feas_tol: float = 1e-10) -> QPSolution:
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    G = np.asarray(G, dtype=float).reshape(-1, H.shape[0])
    h = np.asarray(h, dtype=float)
    z = np.asarray(z0, dtype=float).copy()
    n_rows = G.shape[0]
    if max_iter is None:
        max_iter = max(50, 2 ** min(n_rows, 20))
    slack0 = G @ z - h
    if n_rows and slack0.min() < -1e-7 * (1.0 + np.abs(h).max()):
        raise QPError("starting point is infeasible")
    scale = 1.0 + np.abs(z).max()
    working: list[int] = []
    lam = np.zeros(0)
    for it in range(1, max_iter + 1):
        g = H @ z + f
        Gw = G[working]
        p, lam = _solve_eqp(H, g, Gw)
        if np.linalg.norm(p, np.inf) <= 1e-13 * scale:
            if lam.size == 0 or lam.min() >= -1e-12:
                return _finish(H, f, G, h, z, working, lam, it)
            # Drop the most negative multiplier; lowest index on ties.
            neg = lam.min()
            cands = [working[i] for i in range(len(working)) if lam[i] <= neg + 1e-15]
            working.remove(min(cands))
            continue
        alpha, block = 1.0, None
        Gp = G @ p
        slack = G @ z - h
        for i in range(n_rows):
            if i in working or Gp[i] >= -1e-14:
                continue
            ai = max(slack[i], 0.0) / -Gp[i]
            if ai < alpha - 1e-15 or (block is not None and abs(ai - alpha) <= 1e-15 and i < block):
                alpha, block = ai, i
        z = z + alpha * p
        if block is not None:
            working.append(block)
            working.sort()
    raise QPError(f"active-set iteration limit {max_iter} reached")


def _finish(H, f, G, h, z, working, lam, it) -> QPSolution:
    mult = np.zeros(G.shape[0])
    if working:
        mult[working] = np.maximum(lam, 0.0)
    r = H @ z + f - G.T @ mult
    return QPSolution(z, mult, tuple(working), it, float(np.linalg.norm(r, np.inf)))
