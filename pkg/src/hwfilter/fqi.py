"""Fitted Q-iteration for the structured feature model.

Each iteration computes bootstrapped targets ``y_i = r_i + gamma max_u' Q(x_i', u')``
and then minimizes the convex composite objective

    J(theta) = sum_i (y_i - theta . psi(x_i, u_i))^2
               + alpha * R_mu(theta_s) + beta * R_L2(theta_nl)

where ``R_mu`` penalizes negative curvature of ``S(x)`` on a state grid and adds
a log-det barrier, and ``R_L2`` squares a per-state bound on the third action
derivative of the nonlinear block.  ``|theta_nl|`` is handled by splitting
``theta_nl = P - M`` with ``P, M >= 0``; the resulting bound-constrained smooth
problem is solved by projected Newton steps with a barrier-aware line search.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .filters import DEFAULT_SPD_FLOOR, WeightMatrix, action_grid, spd_repair
from .qmodel import (
    FeatureMap,
    FeatureQModel,
    GaussianRBFBank,
    DimensionError,
    unconstrained_argmax,
    vech_basis,
    vech_pairs,
)
from scipy.optimize import lsq_linear

log = logging.getLogger(__name__)


class StalledStepError(RuntimeError):
    """The inner solver could not decrease the regularized objective."""


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionDataset:
    X: np.ndarray
    U: np.ndarray
    R: np.ndarray
    Xp: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        R = np.asarray(self.R, dtype=float).reshape(-1)
        Xp = np.atleast_2d(np.asarray(self.Xp, dtype=float))
        N = R.size
        if N < 1:
            raise ValueError("dataset needs at least one transition")
        if X.shape[0] != N or U.shape[0] != N or Xp.shape != X.shape:
            raise DimensionError("dataset arrays have inconsistent shapes")
        for name, arr in (("X", X), ("U", U), ("R", R), ("Xp", Xp)):
            object.__setattr__(self, name, arr)

    @property
    def N(self) -> int:
        return self.R.size

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.U.shape[1]

    def header(self) -> list[str]:
        return (
            [f"x_{i}" for i in range(self.n)]
            + [f"u_{k}" for k in range(self.m)]
            + ["r"]
            + [f"xp_{i}" for i in range(self.n)]
        )

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in np.hstack([self.X, self.U, self.R[:, None], self.Xp]):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path) -> "TransitionDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        n = sum(1 for h in header if h.startswith("x_"))
        m = sum(1 for h in header if h.startswith("u_"))
        expected = cls(np.zeros((1, n)), np.zeros((1, m)), [0.0], np.zeros((1, n))).header()
        if header != expected:
            raise ValueError(f"unexpected dataset header {header}")
        return cls(body[:, :n], body[:, n : n + m], body[:, n + m], body[:, n + m + 1 :])


@dataclass(frozen=True)
class StateGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] == 0:
            raise ValueError("state grid must be nonempty")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, low, high, per_dim: int = 7, cap: int = 2401, seed: int = 0) -> "StateGrid":
        low = np.asarray(low, dtype=float).reshape(-1)
        high = np.asarray(high, dtype=float).reshape(-1)
        axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(low, high)]
        mesh = np.stack([g.reshape(-1) for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        if mesh.shape[0] > cap:
            idx = np.sort(np.random.default_rng(seed).choice(mesh.shape[0], cap, replace=False))
            mesh = mesh[idx]
        return cls(mesh)


@dataclass(frozen=True)
class FqiConfig:
    gamma: float = 0.99
    alpha: float = 0.5
    beta: float = 0.2
    tau: float = 1e-2
    epsilon: float = 1e-3
    D_radius: float = 1.0
    theta_tol: float = 1e-6
    max_iters: int = 500
    grid: StateGrid | None = None
    grid_per_dim: int = 7
    grid_cap: int = 2401
    grid_seed: int = 0
    action_low: tuple | None = None
    action_high: tuple | None = None
    spd_floor: float = DEFAULT_SPD_FLOOR
    newton_max_iter: int = 50

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("regularization weights must be nonnegative")
        if self.tau <= 0 or self.epsilon <= 0:
            raise ValueError("tau and epsilon must be positive")
        if self.theta_tol <= 0 or self.D_radius <= 0:
            raise ValueError("theta_tol and D_radius must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


def action_box(data: TransitionDataset, cfg: FqiConfig | None = None):
    if cfg is not None and cfg.action_low is not None:
        return np.asarray(cfg.action_low, dtype=float), np.asarray(cfg.action_high, dtype=float)
    return data.U.min(axis=0), data.U.max(axis=0)


def state_grid(data: TransitionDataset, cfg: FqiConfig) -> StateGrid:
    if cfg.grid is not None:
        return cfg.grid
    return StateGrid.uniform(data.X.min(axis=0), data.X.max(axis=0), cfg.grid_per_dim, cfg.grid_cap, cfg.grid_seed)


def default_feature_map(n, m, x_low, x_high, u_low, u_high, degree: int = 2, p_nl: int = 20, seed: int = 0) -> FeatureMap:
    """Degree-``degree`` polynomial blocks plus Gaussian RBFs on a joint (x, u) lattice.

    The lattice has ``k = max(2, floor(p_nl^(1/(n+m))))`` points per axis and is
    subsampled to ``p_nl`` centers with a fixed seed; the shared width is the
    largest lattice spacing.
    """
    low = np.concatenate([np.asarray(x_low, float).reshape(-1), np.asarray(u_low, float).reshape(-1)])
    high = np.concatenate([np.asarray(x_high, float).reshape(-1), np.asarray(u_high, float).reshape(-1)])
    bank = None
    if p_nl > 0:
        d = n + m
        k = max(2, int(np.floor(p_nl ** (1.0 / d) + 1e-9)))
        axes = [np.linspace(lo, hi, k) for lo, hi in zip(low, high)]
        centers = np.stack([g.reshape(-1) for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        if centers.shape[0] > p_nl:
            idx = np.sort(np.random.default_rng(seed).choice(centers.shape[0], p_nl, replace=False))
            centers = centers[idx]
        width = float(np.max((high - low) / (k - 1)))
        bank = GaussianRBFBank(centers[:, :n], centers[:, n:], max(width, 1e-6))
    return FeatureMap(n, m, degree, degree, degree, bank)


def init_model(features: FeatureMap, grid: StateGrid, ridge: float = 1e-8) -> FeatureQModel:
    """Zero parameters except ``theta_s``, ridge-fit so that ``S(x) ~ I`` on the grid."""
    Psi = features.psi_s(grid.points)
    A = Psi.T @ Psi
    rhs = Psi.T @ np.ones(Psi.shape[0])
    coef = np.linalg.solve(A + ridge * max(np.trace(A), 1.0) * np.eye(A.shape[0]), rhs)
    theta_s = np.zeros((features.p_s, features.n_vech))
    for j, (a, b) in enumerate(vech_pairs(features.m)):
        if a == b:
            theta_s[:, j] = coef
    theta = np.zeros(features.size)
    theta[features.blocks["s"]] = theta_s.reshape(-1)
    return FeatureQModel(features, theta)


# ---------------------------------------------------------------------------
# Curvature matrix and targets
# ---------------------------------------------------------------------------


def s_theta(model: FeatureQModel, x) -> np.ndarray:
    return model.s_matrix_batch(np.asarray(x, dtype=float).reshape(1, -1))[0]


def _projected_newton(model, X, U, lower, upper, tol=1e-8, max_iter=50, floor=1e-8):
    """Batched projected (modified) Newton ascent on ``Q(x_i, .)`` over the box.

    The Newton metric is ``-H`` with eigenvalues floored at ``floor`` and
    bound-active coordinates frozen; steps are clipped to the box and
    backtracked with an Armijo test.  Returns the iterates and a convergence
    mask (projected-gradient residual below ``tol``).
    """
    U = U.copy()
    N = X.shape[0]
    done = np.zeros(N, dtype=bool)
    for _ in range(max_iter + 1):
        live = np.flatnonzero(~done)
        if live.size == 0:
            break
        Xl, Ul = X[live], U[live]
        g = model.grad_batch(Xl, Ul)
        pg = np.linalg.norm(Ul - np.clip(Ul + g, lower, upper), axis=1)
        conv = pg <= tol * (1.0 + np.abs(g).max(axis=1))
        done[live[conv]] = True
        keep = ~conv
        live, Xl, Ul, g = live[keep], Xl[keep], Ul[keep], g[keep]
        if live.size == 0 or _ == max_iter:
            break
        lam, V = np.linalg.eigh(-model.hess_batch(Xl, Ul))
        Wl = np.einsum("nij,nj,nkj->nik", V, np.maximum(lam, floor), V)
        at_bound = ((Ul <= lower + 1e-12) & (g < 0)) | ((Ul >= upper - 1e-12) & (g > 0))
        # Freeze bound-active coordinates: identity rows/cols, zero gradient.
        Wl[at_bound] = 0.0
        Wl.transpose(0, 2, 1)[at_bound] = 0.0
        idx = np.nonzero(at_bound)
        Wl[idx[0], idx[1], idx[1]] = 1.0
        gf = np.where(at_bound, 0.0, g)
        d = np.linalg.solve(Wl, gf[:, :, None])[:, :, 0]
        q0 = model.value_batch(Xl, Ul)
        # Negligible step, or a Newton decrement at the rounding level of Q.
        tiny = np.abs(d).max(axis=1) <= 1e-12 * (1.0 + np.abs(Ul).max(axis=1))
        tiny |= np.sum(g * d, axis=1) <= 1e-13 * (1.0 + np.abs(q0))
        done[live[tiny]] = True
        live, Xl, Ul, g, d, q0 = live[~tiny], Xl[~tiny], Ul[~tiny], g[~tiny], d[~tiny], q0[~tiny]
        if live.size == 0:
            continue
        t = np.ones(live.size)
        accepted = np.zeros(live.size, dtype=bool)
        Unew = Ul.copy()
        for _ls in range(40):
            cand = np.clip(Ul + t[:, None] * d, lower, upper)
            qc = model.value_batch(Xl, cand)
            ok = (qc >= q0 + 1e-4 * np.sum(g * (cand - Ul), axis=1)) & ~accepted
            Unew[ok] = cand[ok]
            accepted |= ok
            if accepted.all():
                break
            t = np.where(accepted, t, 0.5 * t)
        # No ascent along the arc: stationary to working precision.
        done[live[~accepted]] = True
        U[live] = Unew
    g = model.grad_batch(X, U)
    pg = np.linalg.norm(U - np.clip(U + g, lower, upper), axis=1)
    return U, pg <= max(tol, 1e-7) * (1.0 + np.abs(g).max(axis=1))


def box_argmax(model: FeatureQModel, X, lower, upper, tol: float = 1e-8, max_iter: int = 50, grid_points: int = 21):
    """Maximize ``Q(x_i, .)`` over the action box for every row of ``X``.

    Rows whose Hessian at the box center is negative definite (max eigenvalue
    below -1e-8) run projected Newton from the center.  The remaining rows, and
    Newton runs that do not converge, are seeded from the best point of a
    ``grid_points``-per-axis lattice and refined by the same projected Newton;
    the better of the two candidates is kept.  Returns ``(U, Q, used_grid)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    N, m = X.shape[0], model.m
    U = np.repeat(((lower + upper) / 2)[None, :], N, axis=0)
    newton = np.linalg.eigvalsh(model.hess_batch(X, U))[:, -1] < -1e-8
    conv = np.zeros(N, dtype=bool)
    if newton.any():
        U[newton], conv[newton] = _projected_newton(model, X[newton], U[newton], lower, upper, tol, max_iter)
    fallback = ~conv
    if fallback.any():
        span = float(np.max(upper - lower))
        grid = action_grid(lower, upper, span / (grid_points - 1) if span > 0 else 1.0, grid_points**m)
        rows = np.flatnonzero(fallback)
        seeds = np.empty((rows.size, m))
        G = grid.shape[0]
        step = max(1, 100_000 // G)
        for k in range(0, rows.size, step):
            chunk = rows[k : k + step]
            vals = model.value_batch(np.repeat(X[chunk], G, axis=0), np.tile(grid, (chunk.size, 1)))
            seeds[k : k + chunk.size] = grid[np.argmax(vals.reshape(chunk.size, G), axis=1)]
        refined, _ = _projected_newton(model, X[rows], seeds, lower, upper, tol, max_iter)
        better = model.value_batch(X[rows], refined) > model.value_batch(X[rows], U[rows])
        U[rows[better]] = refined[better]
    return U, model.value_batch(X, U), fallback


def compute_targets(model: FeatureQModel, data: TransitionDataset, gamma: float, lower=None, upper=None) -> np.ndarray:
    """``y_i = r_i + gamma max_{u'} Q(x_i', u')`` with the max over the action box."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if gamma == 0.0:
        return data.R.copy()
    if lower is None:
        lower, upper = action_box(data)
    _, qmax, _ = box_argmax(model, data.Xp, lower, upper)
    y = data.R + gamma * qmax
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite target values; check feature scaling")
    return y


# ---------------------------------------------------------------------------
# Regularizers
# ---------------------------------------------------------------------------


def _vech_inner(G: np.ndarray, m: int) -> np.ndarray:
    """``<G, B_j>`` for each basis matrix; G has shape (..., m, m)."""
    cols = [G[..., a, b] if a == b else G[..., a, b] + G[..., b, a] for a, b in vech_pairs(m)]
    return np.stack(cols, axis=-1)


def _spectral(S: np.ndarray, tau: float, eps: float, hessian: bool = False):
    """Value, gradient matrix and (optionally) second-order data of
    ``F(S) = sum_i min(l_i, 0)^2 - tau log(l_i + eps)`` per batch entry."""
    lam, V = np.linalg.eigh(S)
    if np.any(lam + eps <= 0):
        return np.inf, None, None
    f = np.minimum(lam, 0.0) ** 2 - tau * np.log(lam + eps)
    f1 = 2.0 * np.minimum(lam, 0.0) - tau / (lam + eps)
    Gm = np.einsum("xij,xj,xkj->xik", V, f1, V)
    if not hessian:
        return float(f.sum()), Gm, None
    f2 = 2.0 * (lam < 0) + tau / (lam + eps) ** 2
    dl = lam[:, :, None] - lam[:, None, :]
    df = f1[:, :, None] - f1[:, None, :]
    close = np.abs(dl) <= 1e-9 * (1.0 + np.abs(lam[:, :, None]))
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(close, 0.5 * (f2[:, :, None] + f2[:, None, :]), df / np.where(close, 1.0, dl))
    return float(f.sum()), Gm, (V, gamma)


def reg_mu(model: FeatureQModel, grid: StateGrid, tau: float, epsilon: float) -> float:
    """``sum_x |(-S(x))_+|_F^2 - tau log det(S(x) + eps I)``; +inf outside the barrier domain."""
    if tau <= 0 or epsilon <= 0:
        raise ValueError("tau and epsilon must be positive")
    val, _, _ = _spectral(model.s_matrix_batch(grid.points), tau, epsilon)
    return val


def reg_mu_grad(model: FeatureQModel, grid: StateGrid, tau: float, epsilon: float) -> np.ndarray:
    """Gradient of ``reg_mu`` with respect to ``theta_s`` (flattened like the model block)."""
    _, Gm, _ = _spectral(model.s_matrix_batch(grid.points), tau, epsilon)
    if Gm is None:
        raise FloatingPointError("S(x) + eps I is not positive definite on the grid")
    C = _vech_inner(Gm, model.m)
    return (model.features.psi_s(grid.points).T @ C).reshape(-1)


def _reg_mu_hessian(model, grid, tau, epsilon, Psi_s):
    val, Gm, sec = _spectral(model.s_matrix_batch(grid.points), tau, epsilon, hessian=True)
    if Gm is None:
        return np.inf, None, None
    m = model.m
    grad = (Psi_s.T @ _vech_inner(Gm, m)).reshape(-1)
    V, gam = sec
    basis = np.array(vech_basis(m))  # (J, m, m)
    T = np.einsum("xpi,jpq,xqk->xjik", V, basis, V)  # V^T B_j V per grid point
    M = np.einsum("xik,xjik,xlik->xjl", gam, T, T)
    p_s, J = Psi_s.shape[1], len(basis)
    hess = np.einsum("xa,xb,xjl->ajbl", Psi_s, Psi_s, M).reshape(p_s * J, p_s * J)
    return val, grad, hess


def l2_bound_matrix(model: FeatureQModel, points, U_ref, D_radius: float) -> np.ndarray:
    """``L_{2,r}(x)`` for every grid state (rows) and nonlinear feature (columns)."""
    bank = model.features.nonlinear
    points = np.atleast_2d(points)
    if bank is None:
        return np.zeros((points.shape[0], 0))
    return bank.third_derivative_bound(points, np.atleast_2d(U_ref), D_radius)


def l2_feature_bound(model: FeatureQModel, r: int, x, u_ref, D_radius: float) -> float:
    """Upper bound on ``sup_{|u-u_ref|<=D} |d^3_u psi_nl_r(x, u)|`` (tensor operator norm)."""
    L = l2_bound_matrix(model, np.asarray(x, float).reshape(1, -1), np.asarray(u_ref, float).reshape(1, -1), D_radius)
    return float(L[0, r])


def _resolve_uref(model, grid, u_ref_map):
    if callable(u_ref_map):
        return np.array([u_ref_map(x) for x in grid.points]).reshape(grid.points.shape[0], model.m)
    return np.broadcast_to(np.asarray(u_ref_map, dtype=float), (grid.points.shape[0], model.m))


def reg_l2(model: FeatureQModel, grid: StateGrid, u_ref_map, D_radius: float) -> float:
    """``sum_x (sum_r |theta_nl_r| L_{2,r}(x))^2``."""
    L = l2_bound_matrix(model, grid.points, _resolve_uref(model, grid, u_ref_map), D_radius)
    if L.shape[1] == 0:
        return 0.0
    lhat = L @ np.abs(model.theta_nl)
    return float(lhat @ lhat)


def reg_l2_grad(model: FeatureQModel, grid: StateGrid, u_ref_map, D_radius: float) -> np.ndarray:
    """Gradient in ``theta_nl`` (the subgradient ``0`` is used at ``theta_r = 0``)."""
    L = l2_bound_matrix(model, grid.points, _resolve_uref(model, grid, u_ref_map), D_radius)
    if L.shape[1] == 0:
        return np.zeros(0)
    lhat = L @ np.abs(model.theta_nl)
    return 2.0 * (L.T @ lhat) * np.sign(model.theta_nl)


# ---------------------------------------------------------------------------
# Inner solve
# ---------------------------------------------------------------------------


@dataclass
class _Problem:
    """Split parametrization ``z = (theta_c, theta_b, theta_s, [P, M] or theta_nl)``."""

    model: FeatureQModel
    Phi: np.ndarray
    y: np.ndarray
    grid: StateGrid
    Psi_s: np.ndarray
    L: np.ndarray
    cfg: FqiConfig
    split: bool = field(init=False)

    def __post_init__(self):
        self.split = self.cfg.beta > 0 and self.model.features.p_nl > 0
        blocks = self.model.features.blocks
        self.n_rest = blocks["nl"].start
        self.s_slice = blocks["s"]
        self.p_nl = self.model.features.p_nl
        self.PhiTPhi = self.Phi.T @ self.Phi
        self.PhiTy = self.Phi.T @ self.y
        self.yTy = float(self.y @ self.y)
        self.LTL = self.L.T @ self.L

    def to_z(self, theta):
        if not self.split:
            return theta.copy()
        nl = theta[self.n_rest :]
        return np.concatenate([theta[: self.n_rest], np.maximum(nl, 0.0), np.maximum(-nl, 0.0)])

    def to_theta(self, z):
        if not self.split:
            return z.copy()
        P = z[self.n_rest : self.n_rest + self.p_nl]
        M = z[self.n_rest + self.p_nl :]
        return np.concatenate([z[: self.n_rest], P - M])

    def evaluate(self, z, hessian: bool = False):
        theta = self.to_theta(z)
        cfg = self.cfg
        ls = self.yTy - 2.0 * theta @ self.PhiTy + theta @ self.PhiTPhi @ theta
        g_theta = 2.0 * (self.PhiTPhi @ theta - self.PhiTy)
        H_theta = 2.0 * self.PhiTPhi if hessian else None
        val = ls
        if cfg.alpha > 0:
            model = self.model.with_theta(theta)
            if hessian:
                rv, rg, rh = _reg_mu_hessian(model, self.grid, cfg.tau, cfg.epsilon, self.Psi_s)
            else:
                rv = reg_mu(model, self.grid, cfg.tau, cfg.epsilon)
                rg = rh = None
            if not np.isfinite(rv):
                return np.inf, None, None
            val += cfg.alpha * rv
            if hessian:
                g_theta[self.s_slice] += cfg.alpha * rg
                H_theta[self.s_slice, self.s_slice] += cfg.alpha * rh
        if not self.split:
            if cfg.beta > 0 and self.p_nl:
                raise AssertionError("unreachable")
            return val, g_theta, H_theta
        PM = z[self.n_rest :]
        s = PM[: self.p_nl] + PM[self.p_nl :]
        val += cfg.beta * float(s @ self.LTL @ s)
        if not hessian:
            return val, None, None
        # Chain rule through theta_nl = P - M, plus the split regularizer on P + M.
        nr, p = self.n_rest, self.p_nl
        Jm = np.zeros((theta.size, z.size))
        Jm[:nr, :nr] = np.eye(nr)
        Jm[nr:, nr : nr + p] = np.eye(p)
        Jm[nr:, nr + p :] = -np.eye(p)
        g = Jm.T @ g_theta
        H = Jm.T @ H_theta @ Jm
        gs = 2.0 * cfg.beta * (self.LTL @ s)
        Hs = 2.0 * cfg.beta * self.LTL
        g[nr:] += np.concatenate([gs, gs])
        H[nr:, nr:] += np.block([[Hs, Hs], [Hs, Hs]])
        return val, g, H


def _newton_direction(prob: _Problem, z, g, H):
    scale = 1.0 / np.sqrt(np.maximum(np.diag(H), 1e-300))
    Hs = H * scale[:, None] * scale[None, :]
    Hs += 1e-12 * np.eye(Hs.shape[0])
    gs = g * scale
    if not prob.split:
        try:
            L = np.linalg.cholesky(Hs)
            ds = -np.linalg.solve(L.T, np.linalg.solve(L, gs))
        except np.linalg.LinAlgError:
            ds = -np.linalg.lstsq(Hs, gs, rcond=None)[0]
        return ds * scale
    # Bound-constrained Newton subproblem (P + dP >= 0, M + dM >= 0) as bounded
    # least squares: 1/2 d'Hd + g'd = 1/2 |L'd + L^-1 g|^2 + const.
    nr = prob.n_rest
    L = np.linalg.cholesky(Hs)
    rhs = -np.linalg.solve(L, gs)
    lb = np.full(z.size, -np.inf)
    lb[nr:] = -z[nr:] / scale[nr:]
    sol = lsq_linear(L.T, rhs, bounds=(lb, np.full(z.size, np.inf)), method="bvls", tol=1e-12)
    return np.maximum(sol.x, lb) * scale


def _solve_inner(prob: _Problem, theta0: np.ndarray):
    cfg = prob.cfg
    z = prob.to_z(theta0)
    f0, _, _ = prob.evaluate(z)
    if not np.isfinite(f0):
        raise StalledStepError("incoming parameters lie outside the log-det barrier domain")
    f = f0
    for it in range(cfg.newton_max_iter):
        _, g, H = prob.evaluate(z, hessian=True)
        d = _newton_direction(prob, z, g, H)
        slope = float(g @ d)
        if -slope <= 1e-13 * (1.0 + abs(f)):
            break
        t = 1.0
        for _ in range(60):
            zc = z + t * d
            if prob.split:
                zc[prob.n_rest :] = np.maximum(zc[prob.n_rest :], 0.0)
            fc, _, _ = prob.evaluate(zc)
            if np.isfinite(fc) and fc <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            if -slope <= 1e-8 * (1.0 + abs(f)):
                break
            raise StalledStepError(
                f"line search failed at Newton iteration {it}: objective {f:.6e}, decrement {-slope:.3e}"
            )
        z, f = zc, fc
    if prob.split:
        # Canonical split: at most one of P_r, M_r is nonzero.
        nr, p = prob.n_rest, prob.p_nl
        common = np.minimum(z[nr : nr + p], z[nr + p :])
        z[nr : nr + p] -= common
        z[nr + p :] -= common
        f = min(f, prob.evaluate(z)[0])
    return prob.to_theta(z), f0, f


@dataclass
class StepInfo:
    objective_before: float
    objective_after: float
    targets: np.ndarray


def objective(model: FeatureQModel, data: TransitionDataset, y: np.ndarray, cfg: FqiConfig, grid: StateGrid, U_ref) -> float:
    """The regularized least-squares objective at ``model`` for fixed targets."""
    r = y - model.features.design(data.X, data.U) @ model.theta
    val = float(r @ r)
    if cfg.alpha > 0:
        val += cfg.alpha * reg_mu(model, grid, cfg.tau, cfg.epsilon)
    if cfg.beta > 0:
        val += cfg.beta * reg_l2(model, grid, U_ref, cfg.D_radius)
    return val


def reference_actions(model: FeatureQModel, grid: StateGrid, lower, upper) -> np.ndarray:
    """Maximizer of the current model over the action box at each grid state."""
    U, _, _ = box_argmax(model, grid.points, lower, upper)
    return U


def fqi_step_detail(model: FeatureQModel, data: TransitionDataset, cfg: FqiConfig, grid: StateGrid | None = None, Phi=None) -> tuple[FeatureQModel, StepInfo]:
    grid = grid if grid is not None else state_grid(data, cfg)
    lower, upper = action_box(data, cfg)
    y = compute_targets(model, data, cfg.gamma, lower, upper)
    Phi = Phi if Phi is not None else model.features.design(data.X, data.U)
    if cfg.beta > 0 and model.features.p_nl:
        U_ref = reference_actions(model, grid, lower, upper)
        L = l2_bound_matrix(model, grid.points, U_ref, cfg.D_radius)
    else:
        L = np.zeros((grid.points.shape[0], model.features.p_nl))
    prob = _Problem(model, Phi, y, grid, model.features.psi_s(grid.points), L, cfg)
    theta, f0, f1 = _solve_inner(prob, model.theta)
    return model.with_theta(theta), StepInfo(f0, f1, y)


def fqi_step(model: FeatureQModel, data: TransitionDataset, cfg: FqiConfig, grid: StateGrid | None = None) -> FeatureQModel:
    """One regularized fitted-Q update starting from (and targeting with) ``model``."""
    return fqi_step_detail(model, data, cfg, grid)[0]


@dataclass
class FitResult:
    model: FeatureQModel
    trace: list[tuple[int, float, float]]
    converged: bool
    grid: StateGrid

    @property
    def status(self) -> str:
        return "converged" if self.converged else "max_iters"

    def save_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "delta_theta", "objective"])
            for row in self.trace:
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def fit(data: TransitionDataset, cfg: FqiConfig, init: FeatureQModel | None = None, p_nl: int = 20) -> FitResult:
    """Iterate ``fqi_step`` until ``|theta_{k+1} - theta_k| < theta_tol`` or ``max_iters``."""
    grid = state_grid(data, cfg)
    if init is None:
        lower, upper = action_box(data, cfg)
        fmap = default_feature_map(data.n, data.m, data.X.min(0), data.X.max(0), lower, upper, p_nl=p_nl)
        init = init_model(fmap, grid)
    model = init
    Phi = model.features.design(data.X, data.U)
    trace = []
    for k in range(1, cfg.max_iters + 1):
        new, info = fqi_step_detail(model, data, cfg, grid, Phi)
        delta = float(np.linalg.norm(new.theta - model.theta))
        trace.append((k, delta, info.objective_after))
        log.debug("fqi iter %d: |dtheta|=%.3e objective=%.6e", k, delta, info.objective_after)
        model = new
        if delta < cfg.theta_tol:
            return FitResult(model, trace, True, grid)
    return FitResult(model, trace, False, grid)


# ---------------------------------------------------------------------------
# Weight extraction and error model
# ---------------------------------------------------------------------------


def extract_w(model, x, u_ref, floor: float = DEFAULT_SPD_FLOOR) -> WeightMatrix:
    """``spd_repair(-hessian_u(x, u_ref), floor)``."""
    return spd_repair(-model.hessian_u(x, u_ref), floor)


def hessian_error_rho(model, truth, probe_states, u_ref_map=None, floor: float = DEFAULT_SPD_FLOOR) -> float:
    """Largest spectral norm of ``W_hat(x) - W(x)`` over the probe states.

    ``W`` is the true negative Hessian at the true reference action (the
    unconstrained maximizer of ``truth`` unless ``u_ref_map`` is given).
    """
    rho = 0.0
    for x in probe_states:
        x = np.asarray(x, dtype=float)
        if u_ref_map is None:
            u_ref = unconstrained_argmax(truth, x, np.zeros(truth.m))
        else:
            u_ref = np.asarray(u_ref_map(x) if callable(u_ref_map) else u_ref_map, dtype=float)
        W = -truth.hessian_u(x, u_ref)
        W_hat = extract_w(model, x, u_ref, floor).mat
        if W_hat.shape != W.shape:
            raise DimensionError("model and truth have different action dimensions")
        rho = max(rho, float(np.linalg.norm(W_hat - W, 2)))
    return rho


def save_fit(result: FitResult, model_path, trace_path) -> None:
    from .qmodel import save_model

    save_model(result.model, model_path)
    result.save_trace(trace_path)
