"""Planar double integrator with spherical obstacles for head-to-head filter runs.

State ``x = (p0, p1, v0, v1)``, action = acceleration.  The nominal controller is
an LQR tracker of a constant-velocity reference line; the evaluation Q-model is
the LQR action-value of the tracking error ``e = x - x_ref``, so the nominal
action is exactly its unconstrained maximizer.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are

from .admissible import InfeasibleRowError, Obstacle, build_zcbf_constraints
from .bounds import BoundInputs, theorem4_margin
from .filters import (
    DEFAULT_SPD_FLOOR,
    InfeasibleSetError,
    OracleOptions,
    project_euclidean,
    project_weighted,
    safe_q_max,
)
from .qp import QPError

log = logging.getLogger(__name__)

FILTER_KINDS = ("none", "euclidean", "weighted", "qmax")
CSV_COLUMNS = ["step", "t", "p0", "p1", "v0", "v1", "uref0", "uref1", "u0", "u1", "h_min", "q_applied", "solve_us", "filter"]
EXTRA_COLUMNS = ["q_euclid", "slack", "margin"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvState:
    p: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(2))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(2))

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.p, self.v])


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.1
    horizon: int = 150
    obstacles: tuple = ()
    start_p: tuple = (0.0, 0.0)
    start_v: tuple = (0.0, 0.0)
    ref_velocity: tuple = (1.0, 0.0)
    action_low: tuple = (-10.0, -10.0)
    action_high: tuple = (10.0, 10.0)
    alpha0: float = 2.0
    alpha1: float = 2.0
    q_state: tuple = (10.0, 2.0, 1.0, 0.5)
    r_input: tuple = (0.1, 0.1)
    soft: bool = False
    slack_weight: float = 1e3
    noise_std: float = 0.0
    spd_floor: float = DEFAULT_SPD_FLOOR
    qmax_grid_res: float = 0.25
    qmax_top_k: int = 4
    qmax_max_grid: int = 2500

    def __post_init__(self):
        if self.dt <= 0 or self.horizon < 1:
            raise ConfigError("dt must be positive and horizon >= 1")
        if len(self.q_state) != 4 or len(self.r_input) != 2:
            raise ConfigError("q_state needs 4 entries and r_input 2")
        if min(self.q_state) < 0 or min(self.r_input) <= 0:
            raise ConfigError("LQR weights must be nonnegative (input weights positive)")
        if np.any(np.asarray(self.action_low) > np.asarray(self.action_high)):
            raise ConfigError("action_low must not exceed action_high")
        obs = tuple(o if isinstance(o, Obstacle) else Obstacle(**o) for o in self.obstacles)
        object.__setattr__(self, "obstacles", obs)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=float)

    def reference(self, t: float) -> np.ndarray:
        """Reference state at time ``t``: constant-velocity line from ``start_p``."""
        vel = np.asarray(self.ref_velocity, dtype=float)
        return np.concatenate([np.asarray(self.start_p, dtype=float) + vel * t, vel])


def double_integrator(dt: float) -> tuple[np.ndarray, np.ndarray]:
    I2 = np.eye(2)
    A = np.block([[I2, dt * I2], [np.zeros((2, 2)), I2]])
    B = np.vstack([0.5 * dt**2 * I2, dt * I2])
    return A, B


class LQRQModel:
    """``Q(e, u) = -(e'Qe + u'Ru + (Ae + Bu)' P (Ae + Bu))`` with ``P`` the DARE solution."""

    def __init__(self, A, B, Qs, R):
        self.A, self.B = np.asarray(A, float), np.asarray(B, float)
        self.Qs, self.R = np.asarray(Qs, float), np.asarray(R, float)
        try:
            self.P = solve_discrete_are(self.A, self.B, self.Qs, self.R)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise ConfigError(f"Riccati solve failed: {exc}") from None
        self.M = self.R + self.B.T @ self.P @ self.B
        self.K = np.linalg.solve(self.M, self.B.T @ self.P @ self.A)

    @classmethod
    def from_config(cls, cfg: EnvConfig) -> "LQRQModel":
        A, B = double_integrator(cfg.dt)
        return cls(A, B, np.diag(cfg.q_state), np.diag(cfg.r_input))

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def value_batch(self, e, U) -> np.ndarray:
        e = np.asarray(e, dtype=float).reshape(-1)
        U = np.atleast_2d(U)
        nxt = (self.A @ e)[None, :] + U @ self.B.T
        return -(e @ self.Qs @ e + np.einsum("ni,ij,nj->n", U, self.R, U) + np.einsum("ni,ij,nj->n", nxt, self.P, nxt))

    def value(self, e, u) -> float:
        return float(self.value_batch(e, np.asarray(u, dtype=float)[None, :])[0])

    def grad_u(self, e, u) -> np.ndarray:
        e, u = np.asarray(e, float), np.asarray(u, float)
        return -2.0 * (self.R @ u + self.B.T @ self.P @ (self.A @ e + self.B @ u))

    def hessian_u(self, e, u) -> np.ndarray:
        return -2.0 * self.M

    def argmax(self, e) -> np.ndarray:
        return -self.K @ np.asarray(e, dtype=float)


def step_dynamics(s: EnvState, u, dt: float) -> EnvState:
    """Exact zero-order-hold update of the double integrator."""
    u = np.asarray(u, dtype=float)
    return EnvState(s.p + s.v * dt + 0.5 * u * dt**2, s.v + u * dt, s.t + dt)


def clamp_action(u, lower, upper) -> tuple[np.ndarray, bool]:
    c = np.clip(u, lower, upper)
    return c, bool(np.any(c != u))


def nominal_controller(s: EnvState, ref, cfg: EnvConfig, lqr: LQRQModel | None = None) -> np.ndarray:
    """``u = -K (x - x_ref)`` clipped to the action box."""
    lqr = lqr or LQRQModel.from_config(cfg)
    return np.clip(-lqr.K @ (s.x - np.asarray(ref, dtype=float)), cfg.lower, cfg.upper)


@dataclass
class RolloutRecord:
    filter_kind: str
    dt: float
    t: np.ndarray
    P: np.ndarray
    V: np.ndarray
    Uref: np.ndarray
    U: np.ndarray
    H: np.ndarray
    q_applied: np.ndarray
    q_euclid: np.ndarray
    solve_time: np.ndarray
    slack: np.ndarray
    margin: np.ndarray
    tracking_error: np.ndarray
    faults: list = field(default_factory=list)
    clamps: int = 0
    repaired_steps: int = 0

    @property
    def steps(self) -> int:
        return self.U.shape[0]

    @property
    def h_min_series(self) -> np.ndarray:
        if self.H.shape[1] == 0:
            return np.full(self.H.shape[0], np.inf)
        return self.H.min(axis=1)

    @property
    def min_h(self) -> float:
        return float(self.h_min_series.min())

    @property
    def same_state_gain(self) -> np.ndarray:
        """``Q(x_k, u_k) - Q(x_k, u_I,k)`` at the record's own states."""
        return self.q_applied - self.q_euclid

    def summary(self) -> dict:
        st = self.solve_time * 1e6
        return {
            "filter": self.filter_kind,
            "steps": self.steps,
            "min_h": self.min_h,
            "tracking_rmse": float(np.sqrt(np.mean(self.tracking_error**2))) if self.steps else 0.0,
            "cum_q": float(self.q_applied.sum()),
            "cum_same_state_gain": float(self.same_state_gain.sum()),
            "solve_us_median": float(np.median(st)) if self.steps else 0.0,
            "solve_us_mean": float(np.mean(st)) if self.steps else 0.0,
            "solve_us_max": float(np.max(st)) if self.steps else 0.0,
            "max_slack": float(self.slack.max()) if self.steps else 0.0,
            "faults": len(self.faults),
            "clamps": self.clamps,
            "repaired_steps": self.repaired_steps,
        }

    def to_csv(self, path=None, timing: bool = True) -> str:
        """Per-step CSV; with ``timing=False`` the ``solve_us`` column is blanked."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS + EXTRA_COLUMNS)
        hmin = self.h_min_series
        for k in range(self.steps):
            w.writerow(
                [k, repr(float(self.t[k]))]
                + [repr(float(v)) for v in (*self.P[k], *self.V[k], *self.Uref[k], *self.U[k])]
                + [repr(float(hmin[k])), repr(float(self.q_applied[k]))]
                + [repr(float(self.solve_time[k] * 1e6)) if timing else ""]
                + [self.filter_kind]
                + [repr(float(v)) for v in (self.q_euclid[k], self.slack[k], self.margin[k])]
            )
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _weight(kind_source, q_eval, e, u_ref, floor):
    from .fqi import extract_w

    if isinstance(kind_source, str):
        if kind_source != "analytic":
            raise ConfigError(f"unknown w_source {kind_source!r}")
        return extract_w(q_eval, e, u_ref, floor)
    return extract_w(kind_source, e, u_ref, floor)


def _step_margin(W_true, W_used, u_ref, u_sel, u_I) -> float:
    """Sufficient-condition margin for the weighted action to beat the Euclidean one at one step."""
    lam = np.linalg.eigvalsh(W_true)
    wn = lambda d: math.sqrt(max(float(d @ W_true @ d), 0.0))
    delta = wn(u_sel - u_ref)
    if delta <= 0:
        return float("nan")
    beta = wn(u_I - u_ref) / delta
    if beta <= 1 + 1e-12:
        return float("nan")
    D = max(delta, wn(u_I - u_ref))
    rho = float(np.linalg.norm(W_used - W_true, 2))
    if rho >= lam[0]:
        return float("nan")
    b = BoundInputs(mu=math.sqrt(lam[0]), L2=0.0, D_radius=D, G=math.sqrt(lam[-1]) * D, rho=rho, delta=delta, beta_ratio=beta)
    return theorem4_margin(b)


def rollout(cfg: EnvConfig, filter_kind: str, q_eval: LQRQModel | None = None, w_source="analytic", seed: int = 0) -> RolloutRecord:
    """Closed-loop run of one filter; deterministic given ``(cfg, seed)``."""
    if filter_kind not in FILTER_KINDS:
        raise ConfigError(f"filter_kind must be one of {FILTER_KINDS}")
    lqr = LQRQModel.from_config(cfg)
    q_eval = q_eval or lqr
    rng = np.random.default_rng(seed)
    s = EnvState(cfg.start_p, cfg.start_v, 0.0)
    for i, o in enumerate(cfg.obstacles):
        if o.h(s.p) < 0:
            raise ConfigError(f"initial state violates obstacle {i}")
    T = cfg.horizon
    rows = {k: [] for k in ("t", "P", "V", "Uref", "U", "H", "q", "qI", "time", "slack", "margin", "track")}
    faults, clamps, repaired = [], 0, 0
    W_true = -q_eval.hessian_u(np.zeros(4), np.zeros(2))
    opts = OracleOptions(grid_res=cfg.qmax_grid_res, top_k=cfg.qmax_top_k, max_grid_points=cfg.qmax_max_grid, lower=cfg.lower, upper=cfg.upper)

    def log_state(state):
        rows["t"].append(state.t)
        rows["P"].append(state.p)
        rows["V"].append(state.v)
        rows["H"].append([o.h(state.p) for o in cfg.obstacles])

    log_state(s)
    for k in range(T):
        ref = cfg.reference(s.t)
        e = s.x - ref
        u_ref = nominal_controller(s, ref, cfg, lqr)
        try:
            aset = build_zcbf_constraints(
                s.p, s.v, cfg.obstacles, cfg.alpha0, cfg.alpha1, cfg.lower, cfg.upper, cfg.soft, cfg.slack_weight
            )
            slack = 0.0
            W_used = W_true
            if filter_kind == "none":
                u, dt_solve = u_ref.copy(), 0.0
            elif filter_kind == "euclidean":
                res = project_euclidean(aset, u_ref)
                u, dt_solve, slack = res.action, res.solve_time, res.slack_used
            elif filter_kind == "weighted":
                wm = _weight(w_source, q_eval, e, u_ref, cfg.spd_floor)
                repaired += int(wm.repaired)
                W_used = wm.mat
                res = project_weighted(aset, u_ref, wm.mat)
                u, dt_solve, slack = res.action, res.solve_time, res.slack_used
            else:
                res = safe_q_max(q_eval, e, aset, opts)
                u, dt_solve = res.action, res.solve_time
            u_I = u if filter_kind == "euclidean" else project_euclidean(aset, u_ref).action
        except (InfeasibleSetError, InfeasibleRowError, QPError) as exc:
            faults.append({"step": k, "error": type(exc).__name__, "detail": str(exc)})
            log.warning("rollout %s aborted at step %d: %s", filter_kind, k, exc)
            break
        u, clamped = clamp_action(u, cfg.lower, cfg.upper)
        clamps += int(clamped)
        rows["Uref"].append(u_ref)
        rows["U"].append(u)
        rows["q"].append(q_eval.value(e, u))
        rows["qI"].append(q_eval.value(e, u_I))
        rows["time"].append(dt_solve)
        rows["slack"].append(slack)
        rows["margin"].append(_step_margin(W_true, W_used, u_ref, u, u_I) if filter_kind == "weighted" else float("nan"))
        rows["track"].append(float(np.linalg.norm(e[:2])))
        s = step_dynamics(s, u, cfg.dt)
        if cfg.noise_std > 0:
            s = EnvState(s.p, s.v + cfg.noise_std * math.sqrt(cfg.dt) * rng.normal(size=2), s.t)
        log_state(s)
    n_obs = len(cfg.obstacles)
    as2 = lambda key, width: np.asarray(rows[key], dtype=float).reshape(len(rows[key]), width)
    return RolloutRecord(
        filter_kind,
        cfg.dt,
        np.asarray(rows["t"]),
        as2("P", 2),
        as2("V", 2),
        as2("Uref", 2),
        as2("U", 2),
        as2("H", n_obs),
        np.asarray(rows["q"], dtype=float),
        np.asarray(rows["qI"], dtype=float),
        np.asarray(rows["time"], dtype=float),
        np.asarray(rows["slack"], dtype=float),
        np.asarray(rows["margin"], dtype=float),
        np.asarray(rows["track"], dtype=float),
        faults,
        clamps,
        repaired,
    )


def compare_metrics(records: list[RolloutRecord], baseline: RolloutRecord) -> list[dict]:
    """One summary row per record, with Q-differences against ``baseline``."""
    out = []
    for r in records:
        if r.steps != baseline.steps:
            raise ValueError(f"horizon mismatch: {r.filter_kind} has {r.steps} steps, baseline {baseline.steps}")
        row = r.summary()
        diff = r.q_applied - baseline.q_applied
        row["cum_q_diff_vs_baseline"] = float(diff.sum())
        row["max_abs_q_diff_vs_baseline"] = float(np.abs(diff).max()) if diff.size else 0.0
        row["baseline"] = baseline.filter_kind
        out.append(row)
    return out


def q_difference_series(record: RolloutRecord, baseline: RolloutRecord) -> np.ndarray:
    if record.steps != baseline.steps:
        raise ValueError("horizon mismatch")
    return record.q_applied - baseline.q_applied


def write_summary_csv(rows: list[dict], path) -> None:
    keys = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def default_scenario(**overrides) -> EnvConfig:
    """Reference line along x passing just below an obstacle centre."""
    base = dict(obstacles=(Obstacle((5.0, 0.3), 1.0, 0.2),))
    base.update(overrides)
    return EnvConfig(**base)


def random_scenario(seed: int, **overrides) -> EnvConfig:
    """Seeded scenario: 1-3 obstacles near a straight reference line, start at rest."""
    rng = np.random.default_rng(seed)
    speed = rng.uniform(0.6, 1.4)
    heading = rng.uniform(-0.3, 0.3)
    direction = np.array([math.cos(heading), math.sin(heading)])
    normal = np.array([-direction[1], direction[0]])
    obstacles = []
    along = rng.uniform(3.5, 5.0)
    for _ in range(int(rng.integers(1, 4))):
        radius = rng.uniform(0.5, 1.2)
        centre = along * direction + rng.uniform(-0.6, 0.6) * normal
        obstacles.append(Obstacle(centre, radius, 0.2))
        along += rng.uniform(4.0, 6.0)
    base = dict(obstacles=tuple(obstacles), ref_velocity=tuple(speed * direction))
    base.update(overrides)
    return EnvConfig(**base)


def save_summary_json(rows: list[dict], path) -> None:
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=2)
