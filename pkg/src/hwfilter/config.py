"""Experiment configuration: one JSON file with a section per module.

Unknown keys are rejected; ``apply_overrides`` applies ``section.key=value``
strings (values parsed as JSON when possible).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, fields

from .bounds import CertConfig
from .fqi import FqiConfig
from .sim import ConfigError, EnvConfig

DEFAULTS = {
    "seed": 0,
    "env": {},
    "collect": {"rollouts": 400, "horizon": 5, "action_noise": 1.0, "init_spread": [2.0, 2.0, 1.0, 1.0]},
    "fqi": {"p_nl": 0, "degree": 2, "grid_per_dim": 3, "max_iters": 2000},
    "bounds": {},
    "simulate": {"filters": ["euclidean", "weighted", "qmax"], "scenarios": 0, "w_source": "analytic", "model": None},
    "bench": {"filters": ["euclidean", "weighted", "qmax"], "scenarios": 5},
}

_FQI_EXTRA = {"p_nl", "degree"}


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


@dataclass
class ExperimentConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def env(self) -> EnvConfig:
        return EnvConfig(**_tuplify(self.raw["env"]))

    def fqi(self) -> FqiConfig:
        kw = {k: v for k, v in self.raw["fqi"].items() if k not in _FQI_EXTRA}
        return FqiConfig(**_tuplify(kw))

    def bounds(self) -> CertConfig:
        kw = dict(self.raw["bounds"])
        kw.setdefault("seed", self.seed)
        return CertConfig(**_tuplify(kw))

    def section(self, name: str) -> dict:
        return self.raw[name]


def _tuplify(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, list) and k != "obstacles":
            v = tuple(v)
        out[k] = v
    return out


def _merge(base: dict, upd: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k in DEFAULTS and not path:
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def validate(raw: dict) -> ExperimentConfig:
    allowed = {
        "env": _field_names(EnvConfig),
        "fqi": _field_names(FqiConfig) | _FQI_EXTRA,
        "bounds": _field_names(CertConfig),
        "collect": set(DEFAULTS["collect"]),
        "simulate": set(DEFAULTS["simulate"]),
        "bench": set(DEFAULTS["bench"]),
    }
    for sec, names in allowed.items():
        bad = set(raw[sec]) - names
        if bad:
            raise ConfigError(f"unknown key(s) in section {sec!r}: {sorted(bad)}")
    cfg = ExperimentConfig(raw)
    try:
        # Construct each typed section once so invariant violations surface early.
        cfg.env()
        cfg.fqi()
        cfg.bounds()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path=None, overrides=(), seed: int | None = None) -> ExperimentConfig:
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        raw = _merge(raw, user)
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    return validate(raw)


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section in override {key!r}")
            node = node[p]
        if len(parts) == 1 and parts[0] not in raw:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return raw
