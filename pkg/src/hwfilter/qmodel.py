"""Q-function representations with exact action derivatives.

Two families are provided:

* ``QuadraticQModel``: an analytic concave quadratic in the action with an
  optional cubic perturbation whose Hessian-Lipschitz constant is known by
  construction.  Used as ground truth in tests and certification.
* ``FeatureQModel``: the structured linear-in-parameters model

      Q(x, u) = th_c . psi_c(x) + sum_k g_k(x) u_k - 1/2 u^T S(x) u
                + th_nl . psi_nl(x, u)

  with ``g(x) = Theta_b^T psi_b(x)`` and ``S(x) = sum_{a,j} th_s[a, j]
  psi_s[a](x) B_j``.  The quadratic block enters with a minus sign so that a
  positive definite ``S`` means a concave model (sign tag ``"D1"``).

All models are immutable; every method is a pure function of its inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Protocol, Sequence

import numpy as np

BASIS_ORDER = "column-major-lower"
SIGN_CONVENTION = "D1"


class DimensionError(ValueError):
    """Raised when state or action dimensions do not match the model."""


class NonConcaveError(RuntimeError):
    """Raised when Newton ascent meets a Hessian that is not negative definite."""

    def __init__(self, message: str, iterate: np.ndarray):
        super().__init__(message)
        self.iterate = np.asarray(iterate, dtype=float)


class QModel(Protocol):
    m: int

    def value(self, x: np.ndarray, u: np.ndarray) -> float: ...

    def grad_u(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def hessian_u(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def value_batch(self, x: np.ndarray, U: np.ndarray) -> np.ndarray: ...


def vech_basis(m: int) -> list[np.ndarray]:
    """Symmetric basis ``B_j`` with ``[vech(uu^T/2)]_j = u^T B_j u / 2``.

    Slots walk the lower triangle column by column: (0,0), (1,0), ..., (m-1,0),
    (1,1), (2,1), ...  Diagonal slots hold ``e_a e_a^T`` and off-diagonal slots
    ``e_a e_b^T + e_b e_a^T``.
    """
    if m < 1:
        raise ValueError("action dimension must be >= 1")
    basis = []
    for col in range(m):
        for row in range(col, m):
            B = np.zeros((m, m))
            B[row, col] = 1.0
            B[col, row] = 1.0
            basis.append(B)
    return basis


def vech_pairs(m: int) -> list[tuple[int, int]]:
    return [(row, col) for col in range(m) for row in range(col, m)]


def _as_vec(a, dim: int, name: str) -> np.ndarray:
    v = np.asarray(a, dtype=float).reshape(-1)
    if v.shape[0] != dim:
        raise DimensionError(f"{name} has length {v.shape[0]}, expected {dim}")
    return v


# ---------------------------------------------------------------------------
# Analytic quadratic family
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticQModel:
    """``Q(u) = offset - 1/2 (u-c)^T W (u-c) + sum_r k_r/6 (a_r . (u-c))^3``.

    The state argument is accepted and ignored.  The cubic terms vanish to
    second order at the center, so the center stays the stationary point and
    ``-hessian_u(center) == W``.  Their Hessian is Lipschitz with constant
    ``sum_r |k_r| |a_r|^3`` (exposed as ``L2``).
    """

    center: np.ndarray
    weight: np.ndarray
    offset: float = 0.0
    cubic_dirs: np.ndarray | None = None
    cubic_coefs: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        W = np.asarray(self.weight, dtype=float)
        if W.shape != (c.size, c.size):
            raise DimensionError(f"weight shape {W.shape} does not match center length {c.size}")
        if not np.allclose(W, W.T, atol=1e-12):
            raise ValueError("weight must be symmetric")
        if np.linalg.eigvalsh(W)[0] <= 0:
            raise ValueError("weight must be positive definite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "weight", 0.5 * (W + W.T))
        object.__setattr__(self, "offset", float(self.offset))
        if self.cubic_dirs is None:
            dirs = np.zeros((0, c.size))
            coefs = np.zeros(0)
        else:
            dirs = np.atleast_2d(np.asarray(self.cubic_dirs, dtype=float))
            coefs = np.asarray(self.cubic_coefs, dtype=float).reshape(-1)
            if dirs.shape[1] != c.size or coefs.size != dirs.shape[0]:
                raise DimensionError("cubic_dirs must be (r, m) with r coefficients")
        object.__setattr__(self, "cubic_dirs", dirs)
        object.__setattr__(self, "cubic_coefs", coefs)

    @property
    def m(self) -> int:
        return self.center.size

    @property
    def L2(self) -> float:
        norms = np.linalg.norm(self.cubic_dirs, axis=1)
        return float(np.sum(np.abs(self.cubic_coefs) * norms**3))

    def value_batch(self, x, U) -> np.ndarray:
        D = np.atleast_2d(np.asarray(U, dtype=float)) - self.center
        if D.shape[1] != self.m:
            raise DimensionError(f"actions have dimension {D.shape[1]}, expected {self.m}")
        quad = 0.5 * np.einsum("ni,ij,nj->n", D, self.weight, D)
        proj = D @ self.cubic_dirs.T
        return self.offset - quad + (proj**3 @ self.cubic_coefs) / 6.0

    def value(self, x, u) -> float:
        return float(self.value_batch(x, _as_vec(u, self.m, "u")[None, :])[0])

    def grad_u(self, x, u) -> np.ndarray:
        d = _as_vec(u, self.m, "u") - self.center
        proj = self.cubic_dirs @ d
        return -self.weight @ d + self.cubic_dirs.T @ (0.5 * self.cubic_coefs * proj**2)

    def hessian_u(self, x, u) -> np.ndarray:
        d = _as_vec(u, self.m, "u") - self.center
        proj = self.cubic_dirs @ d
        H = -self.weight + np.einsum("r,ri,rj->ij", self.cubic_coefs * proj, self.cubic_dirs, self.cubic_dirs)
        return 0.5 * (H + H.T)

    def to_dict(self) -> dict:
        return {
            "kind": "quadratic",
            "center": self.center.tolist(),
            "weight": self.weight.tolist(),
            "offset": self.offset,
            "cubic_dirs": self.cubic_dirs.tolist(),
            "cubic_coefs": self.cubic_coefs.tolist(),
        }


# ---------------------------------------------------------------------------
# Feature model
# ---------------------------------------------------------------------------


def monomial_exponents(n: int, degree: int) -> list[tuple[int, ...]]:
    """Index tuples of all monomials in ``n`` variables up to ``degree``.

    Order: constant, then degree 1, then degree 2, ... each in
    ``combinations_with_replacement`` order.
    """
    out: list[tuple[int, ...]] = []
    for d in range(degree + 1):
        out.extend(combinations_with_replacement(range(n), d))
    return out


def poly_features(X: np.ndarray, exponents: Sequence[tuple[int, ...]]) -> np.ndarray:
    X = np.atleast_2d(X)
    n = X.shape[1]
    width = max((len(e) for e in exponents), default=0)
    if width == 0:
        return np.ones((X.shape[0], len(exponents)))
    # Pad each monomial's index list with a column of ones.
    idx = np.array([tuple(e) + (n,) * (width - len(e)) for e in exponents], dtype=int)
    Xp = np.hstack([X, np.ones((X.shape[0], 1))])
    return np.prod(Xp[:, idx], axis=2)


class UnsupportedFeatureError(ValueError):
    """Raised when a nonlinear feature has no registered third-derivative bound."""


class NonlinearBank:
    """Base class for banks of nonlinear features ``psi_nl(x, u)``.

    Subclasses vectorize over samples and features.  ``third_derivative_bound``
    is the registration point for the Hessian-Lipschitz regularizer; a bank
    that does not override it is rejected there.
    """

    kind = "abstract"
    size = 0

    def value(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_u(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess_u(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def third_derivative_bound(self, X: np.ndarray, U_ref: np.ndarray, radius: float) -> np.ndarray:
        raise UnsupportedFeatureError(f"no third-derivative bound registered for {self.kind!r} features")

    def to_dict(self) -> dict:
        raise NotImplementedError


# Local maxima of phi(t) = max_{0<=s<=t} |s^3 - 3 s| * exp(-t^2 / 2).
_RBF_T1 = float(np.sqrt(3.0 - np.sqrt(6.0)))
_RBF_T2 = float(np.sqrt(3.0 + np.sqrt(6.0)))


def _rbf_envelope(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    inner = np.where(t <= 1.0, 3.0 * t - t**3, np.where(t <= 2.0, 2.0, t**3 - 3.0 * t))
    return inner * np.exp(-0.5 * t**2)


def rbf_third_derivative_sup(t0: np.ndarray) -> np.ndarray:
    """``sup_{t >= t0} phi(t)``; phi is unimodal between its two local maxima."""
    t0 = np.maximum(np.asarray(t0, dtype=float), 0.0)
    best = _rbf_envelope(t0)
    for tc in (_RBF_T1, _RBF_T2):
        best = np.where(t0 <= tc, np.maximum(best, _rbf_envelope(tc)), best)
    return best


RBF_C3 = float(_rbf_envelope(_RBF_T1))


@dataclass(frozen=True)
class GaussianRBFBank(NonlinearBank):
    """Isotropic Gaussians ``exp(-(|x-cx|^2 + |u-cu|^2) / (2 w^2))`` on joint (x, u) centers."""

    centers_x: np.ndarray
    centers_u: np.ndarray
    width: float
    kind = "gaussian_rbf"

    def __post_init__(self):
        cx = np.atleast_2d(np.asarray(self.centers_x, dtype=float))
        cu = np.atleast_2d(np.asarray(self.centers_u, dtype=float))
        if cx.shape[0] != cu.shape[0]:
            raise DimensionError("centers_x and centers_u must have the same number of rows")
        if not self.width > 0:
            raise ValueError("RBF width must be positive")
        object.__setattr__(self, "centers_x", cx)
        object.__setattr__(self, "centers_u", cu)
        object.__setattr__(self, "width", float(self.width))

    @property
    def size(self) -> int:
        return self.centers_x.shape[0]

    def _state_factor(self, X):
        dx = X[:, None, :] - self.centers_x[None, :, :]
        return np.exp(-0.5 * np.sum(dx * dx, axis=2) / self.width**2)

    def value(self, X, U):
        du = U[:, None, :] - self.centers_u[None, :, :]
        return self._state_factor(X) * np.exp(-0.5 * np.sum(du * du, axis=2) / self.width**2)

    def grad_u(self, X, U):
        du = U[:, None, :] - self.centers_u[None, :, :]
        val = self._state_factor(X) * np.exp(-0.5 * np.sum(du * du, axis=2) / self.width**2)
        return -(du / self.width**2) * val[:, :, None]

    def hess_u(self, X, U):
        du = U[:, None, :] - self.centers_u[None, :, :]
        w2 = self.width**2
        val = self._state_factor(X) * np.exp(-0.5 * np.sum(du * du, axis=2) / w2)
        outer = np.einsum("nri,nrj->nrij", du, du) / w2**2
        eye = np.eye(U.shape[1]) / w2
        return val[:, :, None, None] * (outer - eye)

    def third_derivative_bound(self, X, U_ref, radius):
        # Operator norm of a symmetric 3-tensor is max_{|v|=1} |T[v,v,v]|.  Along
        # a unit direction the u-Gaussian gives (3s - s^3) e^{-q/2} / w^3 with
        # s^2 <= q = |u-cu|^2 / w^2, and q is bounded below on the ball.
        X = np.atleast_2d(X)
        U_ref = np.atleast_2d(U_ref)
        dist = np.linalg.norm(U_ref[:, None, :] - self.centers_u[None, :, :], axis=2)
        t0 = np.maximum(dist - radius, 0.0) / self.width
        return self._state_factor(X) * rbf_third_derivative_sup(t0) / self.width**3

    def to_dict(self):
        return {
            "kind": self.kind,
            "centers_x": self.centers_x.tolist(),
            "centers_u": self.centers_u.tolist(),
            "width": self.width,
        }


@dataclass(frozen=True)
class LinearActionBank(NonlinearBank):
    """Features ``u_k`` for selected action coordinates; third derivative is zero."""

    coords: tuple[int, ...]
    kind = "linear_action"

    @property
    def size(self) -> int:
        return len(self.coords)

    def value(self, X, U):
        return U[:, list(self.coords)]

    def grad_u(self, X, U):
        g = np.zeros((U.shape[0], self.size, U.shape[1]))
        for r, k in enumerate(self.coords):
            g[:, r, k] = 1.0
        return g

    def hess_u(self, X, U):
        return np.zeros((U.shape[0], self.size, U.shape[1], U.shape[1]))

    def third_derivative_bound(self, X, U_ref, radius):
        return np.zeros((np.atleast_2d(X).shape[0], self.size))

    def to_dict(self):
        return {"kind": self.kind, "coords": list(self.coords)}


def bank_from_dict(d: dict | None) -> NonlinearBank | None:
    if d is None:
        return None
    if d["kind"] == GaussianRBFBank.kind:
        return GaussianRBFBank(np.array(d["centers_x"]), np.array(d["centers_u"]), d["width"])
    if d["kind"] == LinearActionBank.kind:
        return LinearActionBank(tuple(d["coords"]))
    raise UnsupportedFeatureError(f"unknown nonlinear feature kind {d['kind']!r}")


@dataclass(frozen=True)
class FeatureMap:
    """Feature layout: polynomial state features and an optional nonlinear bank."""

    n: int
    m: int
    deg_c: int = 2
    deg_b: int = 2
    deg_s: int = 2
    nonlinear: NonlinearBank | None = None
    exps_c: list = field(init=False, repr=False, compare=False)
    exps_b: list = field(init=False, repr=False, compare=False)
    exps_s: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be >= 1")
        object.__setattr__(self, "exps_c", monomial_exponents(self.n, self.deg_c))
        object.__setattr__(self, "exps_b", monomial_exponents(self.n, self.deg_b))
        object.__setattr__(self, "exps_s", monomial_exponents(self.n, self.deg_s))

    @property
    def n_vech(self) -> int:
        return self.m * (self.m + 1) // 2

    @property
    def p_c(self) -> int:
        return len(self.exps_c)

    @property
    def p_b(self) -> int:
        return len(self.exps_b)

    @property
    def p_s(self) -> int:
        return len(self.exps_s)

    @property
    def p_nl(self) -> int:
        return 0 if self.nonlinear is None else self.nonlinear.size

    @property
    def blocks(self) -> dict[str, slice]:
        sizes = [
            ("c", self.p_c),
            ("b", self.p_b * self.m),
            ("s", self.p_s * self.n_vech),
            ("nl", self.p_nl),
        ]
        out, start = {}, 0
        for name, size in sizes:
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def size(self) -> int:
        return self.blocks["nl"].stop

    def psi_c(self, X):
        return poly_features(X, self.exps_c)

    def psi_b(self, X):
        return poly_features(X, self.exps_b)

    def psi_s(self, X):
        return poly_features(X, self.exps_s)

    def quad_monomials(self, U: np.ndarray) -> np.ndarray:
        """``vech(uu^T/2)`` per row, i.e. ``u^T B_j u / 2``."""
        return np.stack([U[:, a] * U[:, b] * (0.5 if a == b else 1.0) for a, b in vech_pairs(self.m)], axis=1)

    def design(self, X, U) -> np.ndarray:
        """Row ``i`` is psi(x_i, u_i) laid out to match the parameter vector."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if X.shape[1] != self.n or U.shape[1] != self.m:
            raise DimensionError(f"expected (.., {self.n}) states and (.., {self.m}) actions")
        N = X.shape[0]
        cols = [
            self.psi_c(X),
            (self.psi_b(X)[:, :, None] * U[:, None, :]).reshape(N, -1),
            -(self.psi_s(X)[:, :, None] * self.quad_monomials(U)[:, None, :]).reshape(N, -1),
        ]
        if self.nonlinear is not None:
            cols.append(self.nonlinear.value(X, U))
        return np.concatenate(cols, axis=1)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "deg_c": self.deg_c,
            "deg_b": self.deg_b,
            "deg_s": self.deg_s,
            "nonlinear": None if self.nonlinear is None else self.nonlinear.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMap":
        return cls(d["n"], d["m"], d["deg_c"], d["deg_b"], d["deg_s"], bank_from_dict(d.get("nonlinear")))


@dataclass(frozen=True)
class FeatureQModel:
    """Linear-in-theta Q model over a ``FeatureMap``."""

    features: FeatureMap
    theta: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float).reshape(-1).copy()
        if th.size != self.features.size:
            raise DimensionError(f"theta has length {th.size}, expected {self.features.size}")
        if not np.all(np.isfinite(th)):
            raise ValueError("theta must be finite")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    @property
    def n(self) -> int:
        return self.features.n

    @property
    def m(self) -> int:
        return self.features.m

    def block(self, name: str) -> np.ndarray:
        return self.theta[self.features.blocks[name]]

    @property
    def theta_b(self) -> np.ndarray:
        return self.block("b").reshape(self.features.p_b, self.m)

    @property
    def theta_s(self) -> np.ndarray:
        return self.block("s").reshape(self.features.p_s, self.features.n_vech)

    @property
    def theta_nl(self) -> np.ndarray:
        return self.block("nl")

    def with_theta(self, theta) -> "FeatureQModel":
        return FeatureQModel(self.features, theta)

    def _check(self, X, U):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if X.shape[1] != self.n:
            raise DimensionError(f"state has dimension {X.shape[1]}, expected {self.n}")
        if U.shape[1] != self.m:
            raise DimensionError(f"action has dimension {U.shape[1]}, expected {self.m}")
        if X.shape[0] == 1 and U.shape[0] > 1:
            X = np.repeat(X, U.shape[0], axis=0)
        return X, U

    def s_matrix_batch(self, X) -> np.ndarray:
        """``S(x)`` for each row of ``X``; shape (N, m, m)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        coef = self.features.psi_s(X) @ self.theta_s  # (N, n_vech)
        S = np.zeros((X.shape[0], self.m, self.m))
        for j, (a, b) in enumerate(vech_pairs(self.m)):
            S[:, a, b] += coef[:, j]
            if a != b:
                S[:, b, a] += coef[:, j]
        return S

    def value_batch(self, X, U) -> np.ndarray:
        X, U = self._check(X, U)
        return self.features.design(X, U) @ self.theta

    def grad_batch(self, X, U) -> np.ndarray:
        X, U = self._check(X, U)
        g = self.features.psi_b(X) @ self.theta_b
        g -= np.einsum("nij,nj->ni", self.s_matrix_batch(X), U)
        bank = self.features.nonlinear
        if bank is not None:
            g += np.einsum("nri,r->ni", bank.grad_u(X, U), self.theta_nl)
        return g

    def hess_batch(self, X, U) -> np.ndarray:
        X, U = self._check(X, U)
        H = -self.s_matrix_batch(X)
        bank = self.features.nonlinear
        if bank is not None:
            H = H + np.einsum("nrij,r->nij", bank.hess_u(X, U), self.theta_nl)
        return 0.5 * (H + np.swapaxes(H, 1, 2))

    def value(self, x, u) -> float:
        return float(self.value_batch(_as_vec(x, self.n, "x")[None], _as_vec(u, self.m, "u")[None])[0])

    def grad_u(self, x, u) -> np.ndarray:
        return self.grad_batch(_as_vec(x, self.n, "x")[None], _as_vec(u, self.m, "u")[None])[0]

    def hessian_u(self, x, u) -> np.ndarray:
        return self.hess_batch(_as_vec(x, self.n, "x")[None], _as_vec(u, self.m, "u")[None])[0]

    def to_dict(self) -> dict:
        return {
            "kind": "feature",
            "basis_order": BASIS_ORDER,
            "sign_convention": SIGN_CONVENTION,
            "features": self.features.to_dict(),
            "theta": {name: self.block(name).tolist() for name in ("c", "b", "s", "nl")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureQModel":
        if d.get("basis_order") != BASIS_ORDER or d.get("sign_convention") != SIGN_CONVENTION:
            raise ValueError("model file uses an unsupported basis ordering or sign convention")
        fmap = FeatureMap.from_dict(d["features"])
        theta = np.concatenate([np.asarray(d["theta"][k], dtype=float) for k in ("c", "b", "s", "nl")])
        return cls(fmap, theta)


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)


def load_model(path):
    with open(path) as fh:
        d = json.load(fh)
    if d.get("kind") == "feature":
        return FeatureQModel.from_dict(d)
    if d.get("kind") == "quadratic":
        return QuadraticQModel(
            np.array(d["center"]),
            np.array(d["weight"]),
            d["offset"],
            np.array(d["cubic_dirs"]).reshape(-1, len(d["center"])),
            np.array(d["cubic_coefs"]),
        )
    raise ValueError(f"unknown model kind {d.get('kind')!r}")


# ---------------------------------------------------------------------------
# Generic operations
# ---------------------------------------------------------------------------


def eval_q(model: QModel, x, u) -> float:
    return model.value(x, u)


def grad_u(model: QModel, x, u) -> np.ndarray:
    return model.grad_u(x, u)


def hessian_u(model: QModel, x, u) -> np.ndarray:
    return model.hessian_u(x, u)


def unconstrained_argmax(model: QModel, x, u0, tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Damped Newton ascent with step halving.

    Raises ``NonConcaveError`` if the Hessian at an iterate is not negative
    definite, and ``RuntimeError`` if the gradient tolerance is not met.
    """
    u = np.asarray(u0, dtype=float).reshape(-1).copy()
    for _ in range(max_iter):
        g = model.grad_u(x, u)
        if np.linalg.norm(g) <= tol:
            return u
        H = model.hessian_u(x, u)
        try:
            L = np.linalg.cholesky(-H)
        except np.linalg.LinAlgError:
            raise NonConcaveError(f"Hessian not negative definite at iterate u={u.tolist()}", u) from None
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        q0 = model.value(x, u)
        t = 1.0
        for _ in range(60):
            cand = u + t * step
            if model.value(x, cand) >= q0 - 1e-14 * (1.0 + abs(q0)):
                break
            t *= 0.5
        u = cand
    if np.linalg.norm(model.grad_u(x, u)) <= tol:
        return u
    raise RuntimeError(f"Newton ascent did not reach |grad| <= {tol} in {max_iter} iterations")
