"""Closed-form performance bounds for the weighted projection and a harness
that checks them on randomized instances.

Notation: ``W = -hess Q(x, u_ref)``, ``S = {u : |u - u_ref|_W <= D}``,
``hess Q <= -mu^2 I`` on ``S`` and ``hess Q`` is ``L2``-Lipschitz.
``u_ref`` is the unconstrained maximizer of ``Q(x, .)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import qmc

from .admissible import AdmissibleSet, feasibility_check
from .filters import OracleOptions, project_euclidean, project_weighted, safe_q_max
from .qmodel import QuadraticQModel


class ErrorModelViolation(ValueError):
    """``rho >= mu^2``: the learned-metric error model does not apply."""


class NotInRegimeError(ValueError):
    """``beta_ratio <= 1``: the Euclidean projection is already weighted-closer."""


class A2ViolationError(ValueError):
    """The action Hessian is not negative definite at ``witness``."""

    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


@dataclass(frozen=True)
class BoundInputs:
    mu: float
    L2: float
    D_radius: float
    G: float = 0.0
    rho: float = 0.0
    delta: float = 0.0
    beta_ratio: float | None = None

    def __post_init__(self):
        vals = [self.mu, self.L2, self.D_radius, self.G, self.rho, self.delta]
        if self.beta_ratio is not None:
            vals.append(self.beta_ratio)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("bound inputs must be finite")
        if self.L2 < 0 or self.G < 0 or self.rho < 0 or self.delta < 0:
            raise ValueError("L2, G, rho and delta must be nonnegative")
        if self.D_radius <= 0:
            raise ValueError("D_radius must be positive")

    @property
    def c_ratio(self) -> float:
        if self.beta_ratio is None:
            raise NotInRegimeError("beta_ratio not set")
        return (self.beta_ratio**2 - 1.0) / 2.0

    @property
    def error_model_holds(self) -> bool:
        return self.rho < self.mu**2


def _check_mu(b: BoundInputs) -> None:
    if b.mu <= 0:
        raise ValueError("mu must be positive")


def _check_rho(b: BoundInputs) -> None:
    _check_mu(b)
    if not b.error_model_holds:
        raise ErrorModelViolation(f"rho={b.rho:.3g} >= mu^2={b.mu ** 2:.3g}")


def theorem1_bound(b: BoundInputs) -> float:
    """``L2 D^3 / (3 mu^3)``: gap between the weighted projection and the safe optimum."""
    _check_mu(b)
    return b.L2 * b.D_radius**3 / (3.0 * b.mu**3)


def theorem2_threshold(b: BoundInputs) -> float:
    """Smallest ``delta`` for which the weighted projection provably beats Euclidean."""
    _check_mu(b)
    c = b.c_ratio
    if c <= 0:
        raise NotInRegimeError("beta_ratio must exceed 1")
    return math.sqrt(b.L2 * b.D_radius**3 / (3.0 * c * b.mu**3))


def theorem2_holds(b: BoundInputs) -> bool:
    return b.delta >= theorem2_threshold(b)


def lemma2_gap(b: BoundInputs) -> float:
    """``sqrt(2 rho) D / mu^2``: action error caused by a metric error of norm ``rho``."""
    _check_rho(b)
    return math.sqrt(2.0 * b.rho) * b.D_radius / b.mu**2


def theorem3_bound(b: BoundInputs) -> float:
    return theorem1_bound(b) + b.G * lemma2_gap(b)


def theorem4_margin(b: BoundInputs) -> float:
    """``c delta^2 - L2 D^3/(3 mu^3) - G sqrt(2 rho) D / mu^2``; the learned weighted
    action is no worse than the Euclidean one whenever this is ``>= 0``."""
    c = b.c_ratio
    if c <= 0:
        raise NotInRegimeError("beta_ratio must exceed 1")
    return c * b.delta**2 - theorem3_bound(b)


def theorem4_holds(b: BoundInputs) -> bool:
    return theorem4_margin(b) >= 0.0


# ---------------------------------------------------------------------------
# Sampled constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantEstimate:
    """Sampled (hence optimistic) estimates of ``mu``, ``L2`` and ``G`` on ``S``."""

    mu: float
    L2: float
    G: float
    D_radius: float
    samples: int
    pairs: int
    estimated: bool = True

    def to_inputs(self, **kw) -> BoundInputs:
        return BoundInputs(mu=self.mu, L2=self.L2, D_radius=self.D_radius, G=self.G, **kw)


def weighted_ball_points(W, u_ref, D_radius: float, count: int, seed: int = 0) -> np.ndarray:
    """``count`` scrambled-Sobol points in ``{|u - u_ref|_W <= D}``."""
    W = np.asarray(W, dtype=float)
    m = W.shape[0]
    L = np.linalg.cholesky(W)
    sob = qmc.Sobol(d=m, scramble=True, seed=seed)
    pts = np.empty((0, m))
    while pts.shape[0] < count:
        z = 2.0 * sob.random(max(64, 2 ** int(np.ceil(np.log2(4 * count))))) - 1.0
        pts = np.vstack([pts, z[np.sum(z * z, axis=1) <= 1.0]])
    z = pts[:count]
    return np.asarray(u_ref, dtype=float) + D_radius * np.linalg.solve(L.T, z.T).T


def estimate_constants(model, x, u_ref, D_radius: float, samples: int = 512, pairs: int = 256, seed: int = 0) -> ConstantEstimate:
    """Estimate ``mu``, ``L2`` and ``G`` from samples of the weighted ball.

    Interior points and their radial projections onto the ball boundary are
    both evaluated.  Raises ``A2ViolationError`` if any sampled Hessian is not
    negative definite.
    """
    if samples < 1 or pairs < 0:
        raise ValueError("need at least one sample")
    if D_radius <= 0:
        raise ValueError("D_radius must be positive")
    u_ref = np.asarray(u_ref, dtype=float).reshape(-1)
    H0 = model.hessian_u(x, u_ref)
    W = -0.5 * (H0 + H0.T)
    if np.linalg.eigvalsh(W)[0] <= 0:
        raise A2ViolationError("Hessian at u_ref is not negative definite", u_ref)
    inner = weighted_ball_points(W, u_ref, D_radius, samples, seed)
    d = inner - u_ref
    nrm = np.sqrt(np.einsum("ni,ij,nj->n", d, W, d))
    boundary = u_ref + d * (D_radius / np.where(nrm > 0, nrm, 1.0))[:, None]
    pts = np.vstack([inner, boundary])
    hess = np.array([model.hessian_u(x, u) for u in pts])
    top = np.linalg.eigvalsh(hess)[:, -1]
    if np.any(top >= 0):
        i = int(np.argmax(top))
        raise A2ViolationError(f"Hessian not negative definite at sample {i}", pts[i])
    mu2 = float(-top.max())
    G = float(max(np.linalg.norm(model.grad_u(x, u)) for u in pts))
    rng = np.random.default_rng(seed)
    L2 = 0.0
    for _ in range(pairs):
        i, j = rng.choice(pts.shape[0], 2, replace=False)
        dist = np.linalg.norm(pts[i] - pts[j])
        if dist > 0:
            L2 = max(L2, float(np.linalg.norm(hess[i] - hess[j], 2) / dist))
    return ConstantEstimate(math.sqrt(mu2), L2, G, D_radius, samples, pairs)


# ---------------------------------------------------------------------------
# Certification harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CertConfig:
    instances: int = 100
    seed: int = 0
    dims: tuple = (1, 2, 4)
    max_rows: int = 4
    cond_max: float = 100.0
    box_halfwidth: float = 2.0
    cubic_fraction: float = 0.9
    rho_fraction: float = 0.5
    force_rho_violation: bool = False
    D_radius: float | None = None
    estimate: bool = False
    tol: float = 1e-9

    def __post_init__(self):
        if self.instances < 0 or self.max_rows < 1 or self.cond_max < 1:
            raise ValueError("invalid certification settings")
        if self.box_halfwidth <= 0 or not 0 <= self.cubic_fraction < 1:
            raise ValueError("box_halfwidth must be positive and cubic_fraction in [0, 1)")
        if self.D_radius is not None and self.D_radius <= 0:
            raise ValueError("D_radius must be positive")


@dataclass
class Instance:
    model: QuadraticQModel
    aset: AdmissibleSet
    u_ref: np.ndarray
    W: np.ndarray
    W_hat: np.ndarray
    rho: float


def random_spd(rng, m: int, cond_max: float) -> np.ndarray:
    """Random SPD matrix with eigenvalues log-uniform in ``[1, cond_max]``."""
    Qm, _ = np.linalg.qr(rng.normal(size=(m, m)))
    lam = np.exp(rng.uniform(0.0, np.log(cond_max), size=m))
    lam[0] = 1.0
    if m > 1:
        lam[-1] = cond_max ** rng.uniform(0.5, 1.0)
    W = (Qm * lam) @ Qm.T
    return 0.5 * (W + W.T)


def random_halfspaces(rng, u_ref, k: int, lower, upper) -> AdmissibleSet:
    """``k`` halfspaces that each exclude ``u_ref``; resampled until feasible."""
    m = u_ref.size
    for _ in range(100):
        A = rng.normal(size=(k, m))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        b = A @ u_ref + rng.uniform(0.1, 1.0, size=k)
        aset = AdmissibleSet(A, b, lower, upper, dim=m)
        if feasibility_check(aset).margin > 1e-3:
            return aset
    raise RuntimeError("could not sample a feasible constraint set")


def make_instance(rng, m: int, cfg: CertConfig, cubic: bool = True) -> Instance:
    W = random_spd(rng, m, cfg.cond_max)
    u_ref = rng.normal(scale=0.5, size=m)
    lower, upper = u_ref - cfg.box_halfwidth, u_ref + cfg.box_halfwidth
    aset = random_halfspaces(rng, u_ref, int(rng.integers(1, cfg.max_rows + 1)), lower, upper)
    dirs = coefs = None
    if cubic:
        dirs = rng.normal(size=(m, m))
        raw = rng.choice([-1.0, 1.0], size=m) * rng.uniform(0.2, 1.0, size=m)
        L2_raw = float(np.sum(np.abs(raw) * np.linalg.norm(dirs, axis=1) ** 3))
        # Every filter output lies in the box, so its W-distance is at most
        # D_box; this L2 keeps mu^2 >= (1 - cubic_fraction) lambda_min on that ball.
        lam = np.linalg.eigvalsh(W)
        D_box = math.sqrt(lam[-1]) * cfg.box_halfwidth * math.sqrt(m)
        target = rng.uniform(0.0, cfg.cubic_fraction) * lam[0] ** 1.5 / D_box
        coefs = raw * target / L2_raw
    model = QuadraticQModel(u_ref, W, 0.0, dirs, coefs)
    E = rng.normal(size=(m, m))
    E = E + E.T
    # Log-uniform over six decades so that small-error instances occur.
    rho_target = cfg.rho_fraction * 10.0 ** rng.uniform(-6.0, 0.0) * float(np.linalg.eigvalsh(W)[0])
    if cfg.force_rho_violation:
        rho_target = 1.5 * float(np.linalg.eigvalsh(W)[-1])
    nE = np.linalg.norm(E, 2)
    E = E * (rho_target / nE) if nE > 0 else np.zeros_like(E)
    W_hat = W + E
    if np.linalg.eigvalsh(W_hat)[0] <= 1e-6:
        # Keep the perturbed metric usable for projection; rho is measured below.
        lam, V = np.linalg.eigh(W_hat)
        W_hat = (V * np.maximum(lam, 1e-6)) @ V.T
    rho = float(np.linalg.norm(W_hat - W, 2))
    return Instance(model, aset, u_ref, W, W_hat, rho)


@dataclass
class InstanceRecord:
    index: int
    m: int
    constants: dict
    premises: dict
    checks: dict
    status: str

    def flat(self) -> dict:
        row = {"index": self.index, "m": self.m, "status": self.status}
        row.update({f"const_{k}": v for k, v in self.constants.items()})
        row.update({f"premise_{k}": v for k, v in self.premises.items()})
        for name, c in self.checks.items():
            for k, v in c.items():
                row[f"{name}_{k}"] = v
        return row


def _wnorm(d, W) -> float:
    return float(math.sqrt(max(d @ W @ d, 0.0)))


def certify_instance(inst: Instance, index: int = 0, cfg: CertConfig = CertConfig()) -> InstanceRecord:
    model, aset, u_ref, W = inst.model, inst.aset, inst.u_ref, inst.W
    x = np.zeros(0)
    tol = cfg.tol
    u_W = project_weighted(aset, u_ref, W).action
    u_I = project_euclidean(aset, u_ref).action
    u_hat = project_weighted(aset, u_ref, inst.W_hat).action
    u_star = safe_q_max(model, x, aset, OracleOptions(lower=aset.lower, upper=aset.upper)).action
    q = {k: model.value(x, u) for k, u in (("W", u_W), ("I", u_I), ("hat", u_hat), ("star", u_star))}
    dists = {k: _wnorm(u - u_ref, W) for k, u in (("W", u_W), ("I", u_I), ("hat", u_hat), ("star", u_star))}
    D_meas = max(dists.values())
    D = cfg.D_radius if cfg.D_radius is not None else max(D_meas, 1e-12)
    lam = np.linalg.eigvalsh(W)
    L2 = model.L2
    mu2 = float(lam[0] - L2 * D / math.sqrt(lam[0]))
    G = float(math.sqrt(lam[-1]) * D + 0.5 * L2 * D**2 / lam[0])
    delta = dists["W"]
    beta = dists["I"] / delta if delta > 0 else float("nan")
    constants = {"mu2": mu2, "L2": L2, "D": D, "G": G, "rho": inst.rho, "delta": delta, "beta_ratio": beta}
    premises = {
        "a2": mu2 > 0,
        "inside_ball": D_meas <= D * (1 + 1e-12),
        "beta_regime": bool(delta > 0 and beta > 1 + 1e-12),
        "error_model": bool(mu2 > 0 and inst.rho < mu2),
    }
    checks: dict = {}
    if premises["a2"] and premises["inside_ball"]:
        b = BoundInputs(mu=math.sqrt(mu2), L2=L2, D_radius=D, G=G, rho=inst.rho, delta=delta,
                        beta_ratio=beta if premises["beta_regime"] else None)
        gap1 = abs(q["W"] - q["star"])
        bound1 = theorem1_bound(b)
        checks["thm1"] = {"bound": bound1, "observed": gap1, "satisfied": gap1 <= bound1 + tol}
        if premises["beta_regime"]:
            thr = theorem2_threshold(b)
            diff = q["W"] - q["I"]
            lower_bound = b.c_ratio * delta**2 - bound1
            checks["thm2"] = {
                "bound": thr,
                "observed": diff,
                "in_premise": delta >= thr,
                "satisfied": (diff >= -tol if delta >= thr else True) and diff >= lower_bound - tol,
            }
        if premises["error_model"]:
            gap2 = float(np.linalg.norm(u_hat - u_W))
            bound2 = lemma2_gap(b)
            checks["lemma2"] = {"bound": bound2, "observed": gap2, "satisfied": gap2 <= bound2 + tol}
            gap3 = abs(q["hat"] - q["star"])
            bound3 = theorem3_bound(b)
            checks["thm3"] = {"bound": bound3, "observed": gap3, "satisfied": gap3 <= bound3 + tol}
            if premises["beta_regime"]:
                margin = theorem4_margin(b)
                diff4 = q["hat"] - q["I"]
                checks["thm4"] = {
                    "bound": margin,
                    "observed": diff4,
                    "in_premise": margin > 0,
                    "satisfied": diff4 >= margin - tol and (diff4 >= -tol if margin > 0 else True),
                }
    if cfg.estimate and premises["a2"]:
        est = estimate_constants(model, x, u_ref, D)
        est4 = estimate_constants(model, x, u_ref, D, samples=4 * est.samples, pairs=4 * est.pairs, seed=1)
        stable = abs(est4.L2 - est.L2) <= 0.1 * max(est4.L2, 1e-12) + 1e-12
        checks["estimate"] = {
            "bound": L2,
            "observed": est4.L2,
            "stable": bool(stable),
            "satisfied": est4.L2 <= L2 * (1 + 1e-9) + 1e-12 and est4.mu**2 >= mu2 - 1e-9 and est4.G <= G * (1 + 1e-9),
        }
    if not premises["a2"]:
        status = "assumption A2 violated"
    elif not premises["error_model"]:
        status = "error model violated"
    elif all(c["satisfied"] for c in checks.values()):
        status = "satisfied"
    else:
        status = "violated"
    if status == "error model violated" and not all(c["satisfied"] for c in checks.values()):
        status = "violated"
    return InstanceRecord(index, u_ref.size, constants, premises, checks, status)


@dataclass
class CertReport:
    records: list = field(default_factory=list)

    @property
    def violations(self) -> list:
        return [r for r in self.records if r.status == "violated"]

    def summary(self) -> dict:
        out = {"instances": len(self.records), "violations": len(self.violations)}
        for r in self.records:
            out[f"status:{r.status}"] = out.get(f"status:{r.status}", 0) + 1
        names = sorted({n for r in self.records for n in r.checks})
        for n in names:
            cs = [r.checks[n] for r in self.records if n in r.checks]
            out[n] = {
                "checked": len(cs),
                "in_premise": sum(1 for c in cs if c.get("in_premise", True)),
                "satisfied": sum(1 for c in cs if c["satisfied"]),
            }
        return out

    def to_json(self, path) -> None:
        payload = {"summary": self.summary(), "instances": [asdict(r) for r in self.records]}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, default=_json_default)

    def to_csv(self, path) -> None:
        rows = [r.flat() for r in self.records]
        keys = sorted({k for row in rows for k in row}, key=lambda k: (k not in ("index", "m", "status"), k))
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for row in rows:
                w.writerow(row)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def run_certification(cfg: CertConfig = CertConfig()) -> CertReport:
    """Certify ``cfg.instances`` random instances (seeded per instance)."""
    report = CertReport()
    for i in range(cfg.instances):
        rng = np.random.default_rng([cfg.seed, i])
        m = int(cfg.dims[i % len(cfg.dims)])
        inst = make_instance(rng, m, cfg)
        report.records.append(certify_instance(inst, i, cfg))
    return report
