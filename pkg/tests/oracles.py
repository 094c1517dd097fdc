"""Reference computations that share no code with the package under test."""

import itertools

import numpy as np


def fd_grad(f, u, h=1e-6):
    u = np.asarray(u, dtype=float)
    g = np.zeros_like(u)
    for i in range(u.size):
        e = np.zeros_like(u)
        e[i] = h
        g[i] = (f(u + e) - f(u - e)) / (2 * h)
    return g


def fd_hessian(f, u, h=1e-4):
    """Second central differences of a scalar function."""
    u = np.asarray(u, dtype=float)
    m = u.size
    H = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            ei = np.zeros(m)
            ej = np.zeros(m)
            ei[i] = h
            ej[j] = h
            H[i, j] = (f(u + ei + ej) - f(u + ei - ej) - f(u - ei + ej) + f(u - ei - ej)) / (4 * h * h)
    return H


def fd_jacobian(g, u, h=1e-6):
    """Central-difference Jacobian of a vector function (rows = outputs)."""
    u = np.asarray(u, dtype=float)
    cols = []
    for i in range(u.size):
        e = np.zeros_like(u)
        e[i] = h
        cols.append((np.asarray(g(u + e)) - np.asarray(g(u - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def grid_argmin(f, lower, upper, res, feasible=None):
    """Brute-force minimizer of ``f`` over a lattice, optionally filtered."""
    axes = [np.arange(lo, hi + res / 2, res) for lo, hi in zip(lower, upper)]
    best, best_u = np.inf, None
    for pt in itertools.product(*axes):
        u = np.array(pt)
        if feasible is not None and not feasible(u):
            continue
        v = f(u)
        if v < best:
            best, best_u = v, u
    return best_u, best


def value_iteration_1d(a, b, gamma, x_grid, u_grid, tol=1e-10, max_iter=20000):
    """Tabular value iteration for ``x' = a x + b u``, ``r = -x^2 - u^2``.

    ``V`` is linearly interpolated on ``x_grid`` (clamped at the ends) and the
    max over actions is by enumeration of ``u_grid``.  Returns ``V`` and a
    function ``Q(x, u)``.
    """
    X, U = np.meshgrid(x_grid, u_grid, indexing="ij")
    R = -(X**2) - U**2
    Xn = a * X + b * U
    V = np.zeros_like(x_grid)
    for _ in range(max_iter):
        Vn = np.max(R + gamma * np.interp(Xn, x_grid, V), axis=1)
        if np.max(np.abs(Vn - V)) < tol:
            V = Vn
            break
        V = Vn

    def Q(x, u):
        return -(x**2) - u**2 + gamma * np.interp(a * x + b * u, x_grid, V)

    return V, Q


def riccati_scalar(a, b, gamma, q=1.0, r=1.0, iters=100000):
    """Fixed point of the discounted scalar Riccati recursion (value = -P x^2)."""
    P = 0.0
    for _ in range(iters):
        Pn = q + gamma * a * a * P - (gamma * a * b * P) ** 2 / (r + gamma * b * b * P)
        if abs(Pn - P) < 1e-15:
            return Pn
        P = Pn
    return P


def lattice(lower, upper, res):
    axes = [np.arange(lo, hi + res / 2, res) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def grid_argmin_batch(f, lower, upper, res, feasible=None):
    """Vectorized ``grid_argmin``: ``f`` and ``feasible`` take an (N, m) array."""
    P = lattice(lower, upper, res)
    if feasible is not None:
        P = P[feasible(P)]
    vals = f(P)
    i = int(np.argmin(vals))
    return P[i], float(vals[i])
