"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (stalled
solver, fit not converged, safety fault), 4 certification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bounds import run_certification
from .config import ExperimentConfig, load_config
from .fqi import StalledStepError, TransitionDataset, action_box, default_feature_map, fit, init_model, state_grid
from .qmodel import NonConcaveError, load_model, save_model
from .qp import QPError
from .sim import (
    ConfigError,
    LQRQModel,
    compare_metrics,
    default_scenario,
    random_scenario,
    rollout,
    save_summary_json,
    write_summary_csv,
)

log = logging.getLogger("hwfilter")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CERT = 0, 2, 3, 4


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def collect_dataset(cfg: ExperimentConfig) -> TransitionDataset:
    """Seeded nominal-controller rollouts in error coordinates with action noise."""
    env = cfg.env()
    c = cfg.section("collect")
    lqr = LQRQModel.from_config(env)
    rng = np.random.default_rng(cfg.seed)
    spread = np.asarray(c["init_spread"], dtype=float)
    X, U, R, Xp = [], [], [], []
    for _ in range(int(c["rollouts"])):
        e = rng.uniform(-spread, spread)
        for _ in range(int(c["horizon"])):
            u = np.clip(lqr.argmax(e) + c["action_noise"] * rng.normal(size=2), env.lower, env.upper)
            e_next = lqr.A @ e + lqr.B @ u
            X.append(e)
            U.append(u)
            R.append(-(e @ lqr.Qs @ e + u @ lqr.R @ u))
            Xp.append(e_next)
            e = e_next
    return TransitionDataset(np.array(X), np.array(U), np.array(R), np.array(Xp))


def cmd_collect(cfg: ExperimentConfig, args) -> int:
    data = collect_dataset(cfg)
    path = Path(args.dataset) if args.dataset else _out_dir(args) / "dataset.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    data.save_csv(path)
    info = {
        "N": data.N,
        "state_low": data.X.min(0).tolist(),
        "state_high": data.X.max(0).tolist(),
        "action_low": data.U.min(0).tolist(),
        "action_high": data.U.max(0).tolist(),
        "path": str(path),
    }
    print(json.dumps(info))
    return EXIT_OK


def cmd_fit(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    data = TransitionDataset.load_csv(args.dataset or out / "dataset.csv")
    fcfg = cfg.fqi()
    extra = cfg.section("fqi")
    grid = state_grid(data, fcfg)
    u_low, u_high = action_box(data, fcfg)
    fmap = default_feature_map(
        data.n, data.m, data.X.min(0), data.X.max(0), u_low, u_high,
        degree=int(extra["degree"]), p_nl=int(extra["p_nl"]), seed=cfg.seed,
    )
    result = fit(data, fcfg, init_model(fmap, grid))
    save_model(result.model, out / "model.json")
    result.save_trace(out / "trace.csv")
    print(json.dumps({"status": result.status, "iterations": len(result.trace), "last_delta": result.trace[-1][1]}))
    return EXIT_OK if result.converged else EXIT_NUMERIC


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    report = run_certification(cfg.bounds())
    report.to_json(out / "certification.json")
    report.to_csv(out / "certification.csv")
    summary = report.summary()
    print(json.dumps(summary))
    return EXIT_CERT if report.violations else EXIT_OK


def _scenarios(cfg: ExperimentConfig, count: int):
    env_over = cfg.section("env")
    if count <= 0:
        return [("default", default_scenario(**_plain(env_over)) if "obstacles" not in env_over else cfg.env())]
    return [(f"s{i:03d}", random_scenario(cfg.seed * 100003 + i, **_plain(env_over, drop=("obstacles",)))) for i in range(count)]


def _plain(d: dict, drop=()) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k not in drop}


def _w_source(sim: dict):
    if sim["w_source"] == "analytic":
        return "analytic"
    if sim["w_source"] != "learned" or not sim.get("model"):
        raise ConfigError("w_source must be 'analytic' or 'learned' (with simulate.model set)")
    return load_model(sim["model"])


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    sim = cfg.section("simulate")
    w_source = _w_source(sim)
    rows, faults = [], 0
    for name, env in _scenarios(cfg, int(sim["scenarios"])):
        recs = {}
        for kind in sim["filters"]:
            rec = rollout(env, kind, w_source=w_source, seed=cfg.seed)
            rec.to_csv(out / f"{name}_{kind}.csv")
            recs[kind] = rec
            faults += len(rec.faults)
        base = recs.get("euclidean", next(iter(recs.values())))
        aligned = [r for r in recs.values() if r.steps == base.steps]
        for row in compare_metrics(aligned, base):
            rows.append({"scenario": name, **row})
    write_summary_csv(rows, out / "summary.csv")
    save_summary_json(rows, out / "summary.json")
    print(json.dumps({"rollouts": len(rows), "faults": faults, "min_h": min(r["min_h"] for r in rows)}))
    return EXIT_NUMERIC if faults else EXIT_OK


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    b = cfg.section("bench")
    times = {k: [] for k in b["filters"]}
    for _, env in _scenarios(cfg, int(b["scenarios"])):
        for kind in b["filters"]:
            times[kind].extend((rollout(env, kind, seed=cfg.seed).solve_time * 1e6).tolist())
    rows = []
    for kind, ts in times.items():
        ts = np.asarray(ts)
        rows.append({
            "filter": kind,
            "steps": int(ts.size),
            "solve_us_median": float(np.median(ts)),
            "solve_us_mean": float(ts.mean()),
            "solve_us_p95": float(np.percentile(ts, 95)),
            "solve_us_max": float(ts.max()),
        })
    write_summary_csv(rows, out / "bench.csv")
    save_summary_json(rows, out / "bench.json")
    print(json.dumps(rows))
    return EXIT_OK


COMMANDS = {"collect": cmd_collect, "fit": cmd_fit, "verify": cmd_verify, "simulate": cmd_simulate, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override, e.g. fqi.alpha=0.3")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="hwfilter", description="Hessian-weighted safety filter experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("collect", "fit"):
            sp.add_argument("--dataset", help="dataset CSV path (default: <out>/dataset.csv)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StalledStepError, QPError, NonConcaveError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
