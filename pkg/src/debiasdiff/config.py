"""Run configuration: defaults, JSON loading, validation and per-stage hashing."""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any

from . import io

ENV_RUN_DIR = "DEBIASDIFF_RUN_DIR"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "dataset": {"n": 4000, "n_test": 4000, "rho": 0.95, "sigma": 1.0, "seed": 0},
    "schedule": {"T": 100, "beta_min": 1e-3, "beta_max": 0.2},
    "pretrain": {"steps": 2000, "lr": 1e-3, "batch": 64, "p_drop": 0.1},
    "grouper": {"E": 4, "omega": 1.0, "steps": 500, "lr": 1e-2, "M": 16, "harden": False},
    "invtrain": {"delta": 0.3, "lambda": 1.0, "steps": 8000, "lr": 1e-3, "batch": 64, "width": 128,
                 "full": False},
    "eval": {"samples_per_prompt": 128, "seeds": [0, 1, 2, 3, 4], "k": 3, "w_cfg": 0.0,
             "aug_samples": 2000, "aug_seeds": [0, 1, 2, 3, 4]},
    "paths": {"run_dir": "runs/default"},
}

# stage -> config sections it consumes (upstream sections included)
STAGE_SECTIONS = {
    "synth": ["dataset"],
    "pretrain": ["seed", "dataset", "schedule", "pretrain"],
    "infer-groups": ["seed", "dataset", "schedule", "pretrain", "grouper"],
    "train-guidance": ["seed", "dataset", "schedule", "pretrain", "grouper", "invtrain"],
}


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, over: dict, prefix: str, unknown: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        name = f"{prefix}{key}"
        if key not in base:
            unknown.append(f"{name}: unknown field")
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                unknown.append(f"{name}: expected an object")
            else:
                out[key] = _merge(base[key], value, name + ".", unknown)
        else:
            out[key] = value
    return out


def parse_config(text: str, source: str = "<config>") -> tuple[dict, list[str]]:
    """Parse and merge over defaults. Returns the config and any unknown-field violations."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{source}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{source}: top level must be a JSON object"])
    problems: list[str] = []
    return _merge(DEFAULTS, raw, "", problems), problems


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def violations(cfg: dict) -> list[str]:
    """Every range or type problem in ``cfg``; empty when valid."""
    out: list[str] = []

    def check(path: str, ok_type, cond, rule: str):
        section, _, key = path.rpartition(".")
        value = cfg[section][key] if section else cfg[key]
        if not ok_type(value):
            out.append(f"{path}={value!r}: expected {'an integer' if ok_type is _int else 'a number'}")
        elif not cond(value):
            out.append(f"{path}={value!r}: must satisfy {rule}")

    check("seed", _int, lambda v: v >= 0, "seed >= 0")
    check("dataset.n", _int, lambda v: v >= 8, "n >= 8")
    check("dataset.n_test", _int, lambda v: v >= 8, "n_test >= 8")
    check("dataset.rho", _num, lambda v: 0 <= v <= 1, "0 <= rho <= 1")
    check("dataset.sigma", _num, lambda v: v > 0, "sigma > 0")
    check("dataset.seed", _int, lambda v: v >= 0, "seed >= 0")
    check("schedule.T", _int, lambda v: v >= 10, "T >= 10")
    check("schedule.beta_min", _num, lambda v: 0 < v < 1, "0 < beta_min < 1")
    check("schedule.beta_max", _num, lambda v: 0 < v < 1, "0 < beta_max < 1")
    s = cfg["schedule"]
    if _num(s["beta_min"]) and _num(s["beta_max"]) and s["beta_min"] > s["beta_max"]:
        out.append(f"schedule.beta_min={s['beta_min']!r}: must not exceed beta_max={s['beta_max']!r}")
    check("pretrain.steps", _int, lambda v: v >= 1, "steps >= 1")
    check("pretrain.lr", _num, lambda v: v > 0, "lr > 0")
    check("pretrain.batch", _int, lambda v: v >= 1, "batch >= 1")
    check("pretrain.p_drop", _num, lambda v: 0 <= v < 1, "0 <= p_drop < 1")
    check("grouper.E", _int, lambda v: 2 <= v <= 8, "2 <= E <= 8")
    check("grouper.omega", _num, lambda v: v >= 0, "omega >= 0")
    check("grouper.steps", _int, lambda v: v >= 1, "steps >= 1")
    check("grouper.lr", _num, lambda v: v > 0, "lr > 0")
    check("grouper.M", _int, lambda v: v >= 1, "M >= 1")
    if not isinstance(cfg["grouper"]["harden"], bool):
        out.append(f"grouper.harden={cfg['grouper']['harden']!r}: expected true or false")
    check("invtrain.delta", _num, lambda v: 0 <= v <= 1, "0 <= delta <= 1")
    check("invtrain.lambda", _num, lambda v: v >= 0, "lambda >= 0")
    check("invtrain.steps", _int, lambda v: v >= 1, "steps >= 1")
    check("invtrain.lr", _num, lambda v: v > 0, "lr > 0")
    check("invtrain.batch", _int, lambda v: v >= 1, "batch >= 1")
    check("invtrain.width", _int, lambda v: v >= 1, "width >= 1")
    if not isinstance(cfg["invtrain"]["full"], bool):
        out.append(f"invtrain.full={cfg['invtrain']['full']!r}: expected true or false")
    check("eval.samples_per_prompt", _int, lambda v: v >= 32, "samples_per_prompt >= 32")
    check("eval.k", _int, lambda v: v >= 1, "k >= 1")
    check("eval.w_cfg", _num, lambda v: v >= 0, "w_cfg >= 0")
    check("eval.aug_samples", _int, lambda v: v >= 0 and v % 2 == 0, "aug_samples >= 0 and even")
    for key in ("seeds", "aug_seeds"):
        seeds = cfg["eval"][key]
        if not isinstance(seeds, list) or not seeds or not all(_int(v) and v >= 0 for v in seeds):
            out.append(f"eval.{key}={seeds!r}: expected a non-empty list of non-negative integers")
    if not isinstance(cfg["paths"]["run_dir"], str):
        out.append(f"paths.run_dir={cfg['paths']['run_dir']!r}: expected a string")
    return out


def load_config(path: str | Path | None) -> dict:
    """Defaults, overlaid with the file at ``path`` (if any); raises ConfigError listing every problem."""
    if path is None:
        cfg, problems = default_config(), []
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"{path}: config file not found"])
        cfg, problems = parse_config(path.read_text(), str(path))
    problems += violations(cfg)
    if problems:
        raise ConfigError(problems)
    if os.environ.get(ENV_RUN_DIR):
        cfg["paths"]["run_dir"] = os.environ[ENV_RUN_DIR]
    return cfg


def validate_file(path: str | Path) -> list[str]:
    try:
        load_config(path)
    except ConfigError as exc:
        return exc.violations
    return []


def set_field(cfg: dict, dotted: str, value) -> dict:
    out = copy.deepcopy(cfg)
    *parents, key = dotted.split(".")
    node = out
    for p in parents:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError([f"{dotted}: unknown field"])
        node = node[p]
    if key not in node or isinstance(node[key], (dict, list)):
        raise ConfigError([f"{dotted}: unknown field" if key not in node else f"{dotted}: not a scalar field"])
    if not _num(node[key]):
        raise ConfigError([f"{dotted}: sweep axis must be a numeric field"])
    node[key] = int(value) if _int(node[key]) and float(value).is_integer() else float(value)
    return out


def stage_hash(cfg: dict, stage: str, extra: dict | None = None) -> str:
    keys = STAGE_SECTIONS.get(stage, list(DEFAULTS))
    doc = {k: cfg[k] for k in keys if k != "paths"}
    if extra:
        doc["extra"] = extra
    return io.config_hash(doc)
