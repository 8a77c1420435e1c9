"""Experiment configuration: a YAML document with fixed sections.

Unknown sections or keys are errors. Every value has a default, so an empty
document is a valid config for the default base-to-novel run.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from fractions import Fraction
from pathlib import Path

import yaml

from .exceptions import ConfigError

SECTIONS = ("encoder", "prompts", "ot", "attack", "loss", "data", "run")

DEFAULTS = {
    "encoder": {
        "n_layers": 12,
        "d_emb": 16,
        "d_hidden": 32,
        "d_feat": 32,
        "alignment": 0.92,
        "pixel_scale": 0.25,
    },
    "prompts": {"length": 4, "depth": 9, "n_templates": 60},
    "ot": {"enabled": True, "eta": 0.05, "tol": 1e-6, "max_iter": 200},
    "attack": {"epsilon": 1.0 / 255.0, "step_size": None, "steps": 2, "norm": "inf", "target": "hand"},
    "loss": {"alpha": 0.3, "tau": 0.01, "sp_enabled": True, "kl_direction": "natural"},
    "data": {"n_classes": 10, "d_in": 64, "samples_per_class": 64, "noise": 0.08, "shots": 16},
    "run": {"seed": 0, "epochs": 50, "lr": 0.0025, "batch_size": None, "task": "base2novel"},
}

_CHOICES = {
    ("attack", "target"): ("hand", "tuned"),
    ("loss", "kl_direction"): ("natural", "adversarial"),
    ("run", "task"): ("base2novel", "fewshot"),
}
_NULLABLE = {("attack", "step_size"), ("run", "batch_size")}


def _number(value, key):
    """Float from a number or a fraction string such as ``"1/255"``."""
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got {value!r}", key)
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(f"{key}: expected a number, got {value!r}", key)


def _coerce(section, name, value, default):
    key = f"{section}.{name}"
    if value is None:
        if (section, name) in _NULLABLE:
            return None
        raise ConfigError(f"{key}: may not be null", key)
    if (section, name) == ("attack", "norm"):
        if str(value).lower() in ("inf", "infinity"):
            return "inf"
        p = _number(value, key)
        if p <= 1:
            raise ConfigError(f"{key}: norm order must be > 1 or 'inf'", key)
        return p
    if (section, name) in _CHOICES:
        if value not in _CHOICES[section, name]:
            raise ConfigError(f"{key}: expected one of {_CHOICES[section, name]}, got {value!r}", key)
        return value
    ref = default
    if default is None:
        ref = 0.0 if (section, name) == ("attack", "step_size") else 0
    if isinstance(ref, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}", key)
        return value
    if isinstance(ref, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key)
        return value
    x = _number(value, key)
    if not math.isfinite(x):
        raise ConfigError(f"{key}: must be finite", key)
    return x


def _validate(cfg):
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg}", key)

    need(cfg["prompts"]["length"] >= 1, "prompts.length", "must be >= 1")
    need(1 <= cfg["prompts"]["depth"] <= cfg["encoder"]["n_layers"], "prompts.depth",
         "must be in [1, encoder.n_layers]")
    need(cfg["prompts"]["n_templates"] >= 1, "prompts.n_templates", "must be >= 1")
    need(0 <= cfg["encoder"]["alignment"] <= 1, "encoder.alignment", "must be in [0, 1]")
    need(cfg["ot"]["eta"] > 0, "ot.eta", "must be positive")
    need(cfg["ot"]["tol"] > 0, "ot.tol", "must be positive")
    need(cfg["ot"]["max_iter"] >= 1, "ot.max_iter", "must be >= 1")
    need(cfg["attack"]["epsilon"] > 0, "attack.epsilon", "must be positive")
    need(cfg["attack"]["steps"] >= 1, "attack.steps", "must be >= 1")
    step = cfg["attack"]["step_size"]
    need(step is None or step > 0, "attack.step_size", "must be positive")
    need(cfg["loss"]["tau"] > 0, "loss.tau", "must be positive")
    need(cfg["loss"]["alpha"] >= 0, "loss.alpha", "must be non-negative")
    need(cfg["data"]["n_classes"] >= 2, "data.n_classes", "must be >= 2")
    need(cfg["data"]["noise"] > 0, "data.noise", "must be positive")
    need(1 <= cfg["data"]["shots"] <= cfg["data"]["samples_per_class"], "data.shots",
         "must be in [1, data.samples_per_class]")
    need(cfg["run"]["epochs"] >= 1, "run.epochs", "must be >= 1")
    need(cfg["run"]["lr"] > 0, "run.lr", "must be positive")
    bs = cfg["run"]["batch_size"]
    need(bs is None or bs >= 1, "run.batch_size", "must be >= 1")
    need(cfg["run"]["seed"] >= 0, "run.seed", "must be non-negative")


def resolve(raw: dict | None) -> dict:
    """Merge ``raw`` over the defaults, type-check it, and return a fresh dict."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping of sections")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}", section)
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping", section)
        for name, value in values.items():
            if name not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key {section}.{name}", f"{section}.{name}")
            cfg[section][name] = _coerce(section, name, value, DEFAULTS[section][name])
    _validate(cfg)
    return cfg


def load(path) -> dict:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return resolve(raw)


def set_path(cfg: dict, dotted: str, value) -> dict:
    """Copy of a resolved config with ``section.key`` replaced, re-validated."""
    section, _, name = dotted.partition(".")
    raw = copy.deepcopy(cfg)
    raw.setdefault(section, {})
    if not isinstance(raw[section], dict) or not name:
        raise ConfigError(f"bad config path {dotted!r}", dotted)
    raw[section][name] = value
    return resolve(raw)


def digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def dump(cfg: dict) -> str:
    """YAML text of a resolved config in fixed section order."""
    ordered = {s: {k: cfg[s][k] for k in DEFAULTS[s]} for s in SECTIONS}
    return yaml.safe_dump(ordered, sort_keys=False, default_flow_style=False)


def estimator_params(cfg: dict) -> dict:
    """Keyword arguments for :class:`sptrlab.SPTRClassifier`."""
    e, p, o, a, l, r = (cfg[s] for s in ("encoder", "prompts", "ot", "attack", "loss", "run"))
    return dict(
        seed=r["seed"], n_layers=e["n_layers"], d_emb=e["d_emb"], d_hidden=e["d_hidden"],
        d_feat=e["d_feat"], alignment=e["alignment"], pixel_scale=e["pixel_scale"],
        n_templates=p["n_templates"], prompt_length=p["length"], prompt_depth=p["depth"],
        alpha=l["alpha"], tau=l["tau"], sp_enabled=l["sp_enabled"], kl_direction=l["kl_direction"],
        ot_enabled=o["enabled"], ot_eta=o["eta"], ot_tol=o["tol"], ot_max_iter=o["max_iter"],
        epsilon=a["epsilon"], attack_step=a["step_size"], attack_steps=a["steps"],
        attack_norm=a["norm"], attack_target=a["target"],
        lr=r["lr"], epochs=r["epochs"], batch_size=r["batch_size"], random_state=r["seed"],
    )
