"""Experiment config: JSON validation, defaults, canonical form and object builders."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from importlib import resources
from typing import Any

import jsonschema
import numpy as np

from .engine import RunConfig
from .problems import HeterogeneousProblem, QuadraticProblem, hetero_quad_family, quad_problem
from .timemodel import INF, ClusterModel, delay_from_dict, make_cluster

__all__ = [
    "ConfigError",
    "OUT_ENV",
    "build_cluster",
    "build_problem",
    "canonical_json",
    "config_hash",
    "load_config",
    "normalize",
    "output_dir",
    "run_config",
    "schema",
    "set_path",
]

OUT_ENV = "MINDFLAYER_OUT"

_METHOD_DEFAULTS = {
    "mindflayer": {"clip": "median", "gamma": "theory"},
    "vecna": {"clip": "median", "gamma": "theory"},
    "rennala": {"S": "tune", "gamma": "tune"},
    "asgd": {"gamma": "tune"},
    "minibatch": {"gamma": "tune"},
}


class ConfigError(ValueError):
    pass


def schema() -> dict:
    text = resources.files("mindflayer").joinpath("config_schema.json").read_text()
    return json.loads(text)


def _validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors[:5]:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            msgs.append(f"{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(msgs))


def normalize(raw: dict) -> dict:
    """Validate ``raw`` and return the canonical config with every default filled in.

    ``normalize(normalize(c)) == normalize(c)`` for any valid ``c``.
    """
    _validate(raw)
    cfg = copy.deepcopy(raw)
    prob = cfg["problem"]
    prob.setdefault("d", 1000)
    prob.setdefault("noise_std", 0.0003)
    cl = cfg["cluster"]
    cl.setdefault("tau", "sqrt(i+1)")
    cl.setdefault("delay", {"kind": "constant", "c": 0.0})
    if isinstance(cl["tau"], list) and len(cl["tau"]) != cl["n"]:
        raise ConfigError(f"cluster/tau: {len(cl['tau'])} values for n={cl['n']}")
    if isinstance(cl["delay"], list) and len(cl["delay"]) != cl["n"]:
        raise ConfigError(f"cluster/delay: {len(cl['delay'])} laws for n={cl['n']}")
    # canonical delay literals carry every parameter
    if isinstance(cl["delay"], list):
        cl["delay"] = [delay_from_dict(d).to_dict() for d in cl["delay"]]
    else:
        cl["delay"] = delay_from_dict(cl["delay"]).to_dict()
    if prob["problem"] == "hetero_quadratic":
        prob.setdefault("n", cl["n"])
        prob.setdefault("shift_scale", 0.1)
        prob.setdefault("seed", 0)
        if prob["n"] != cl["n"]:
            raise ConfigError(f"problem/n={prob['n']} does not match cluster/n={cl['n']}")

    methods = cfg.setdefault("methods", [{"name": "mindflayer"}])
    labels = set()
    for m in methods:
        for key, val in _METHOD_DEFAULTS[m["name"]].items():
            m.setdefault(key, val)
        m.setdefault("label", m["name"])
        if m["label"] in labels:
            raise ConfigError(f"methods: duplicate label {m['label']!r}; set distinct 'label' fields")
        labels.add(m["label"])
        if m["name"] == "vecna" and prob["problem"] != "hetero_quadratic":
            raise ConfigError("methods: vecna needs problem 'hetero_quadratic'")
        if m["name"] != "vecna" and prob["problem"] == "hetero_quadratic":
            raise ConfigError(f"methods: {m['name']} runs on the homogeneous 'quadratic' problem only")
        if isinstance(m.get("clip"), list) and len(m["clip"]) != cl["n"]:
            raise ConfigError(f"methods/{m['label']}/clip: {len(m['clip'])} values for n={cl['n']}")

    cfg.setdefault("eps", 1e-4)
    cfg.setdefault("time_budget", None)
    cfg.setdefault("iter_budget", 10_000)
    cfg.setdefault("stop_rule", "first_hit")
    cfg.setdefault("seed", 0)
    cfg.setdefault("seeds", [0])
    cfg.setdefault("output_dir", None)
    tuning = cfg.setdefault("tuning", {})
    tuning.setdefault("gamma_grid", None)
    tuning.setdefault("S_grid", [1, 2, 4, 8, 16])
    tuning.setdefault("seeds", [1000, 1001, 1002])
    hist = cfg.setdefault("histogram", {})
    hist.setdefault("method", "rennala")
    hist.setdefault("S", 1)
    hist.setdefault("clip", "median")
    hist.setdefault("draws", 10_000)
    hist.setdefault("K", "auto")
    hist.setdefault("bin_width", None)
    hist.setdefault("max_bins", 2_000_000)
    if "sweep" in cfg:
        cfg["sweep"].setdefault("mode", "simulate")
        cfg["sweep"].setdefault("draws", 10_000)
    _validate(cfg)
    return cfg


def load_config(path: str) -> dict:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return normalize(raw)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def set_path(cfg: dict, path: str, value: Any) -> dict:
    """Copy of ``cfg`` with the dotted ``path`` (e.g. ``cluster.delay.s``) set to ``value``."""
    out = copy.deepcopy(cfg)
    keys = path.split(".")
    node = out
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"sweep axis {path!r}: no key {key!r}")
        node = node[key]
    if not isinstance(node, dict):
        raise ConfigError(f"sweep axis {path!r}: {keys[-2]!r} is not an object")
    node[keys[-1]] = value
    return out


def output_dir(cfg: dict, override: str | None = None) -> str:
    return override or cfg.get("output_dir") or os.environ.get(OUT_ENV) or "mindflayer_out"


def build_cluster(cfg: dict) -> ClusterModel:
    cl = cfg["cluster"]
    delay = cl["delay"]
    laws = [delay_from_dict(d) for d in delay] if isinstance(delay, list) else delay_from_dict(delay)
    return make_cluster(cl["n"], cl["tau"], laws)


def build_problem(cfg: dict) -> QuadraticProblem | HeterogeneousProblem:
    p = cfg["problem"]
    if p["problem"] == "quadratic":
        return quad_problem(p["d"], p["noise_std"])
    rng = np.random.Generator(np.random.PCG64(p["seed"]))
    return hetero_quad_family(p["d"], p["n"], p["shift_scale"], p["noise_std"], rng)


def run_config(cfg: dict) -> RunConfig:
    tb = cfg["time_budget"]
    return RunConfig(
        eps=cfg["eps"],
        time_budget=INF if tb is None else float(tb),
        iter_budget=cfg["iter_budget"],
        stop_rule=cfg["stop_rule"],
    )
