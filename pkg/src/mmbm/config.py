"""Run configuration: one TOML file with a section per pipeline stage.

TOML has no null, so "unset" is spelled ``0``, ``""`` or ``[]`` where noted
in :data:`DEFAULTS`; :func:`reference_config` renders every default.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_VAR = "MMBM_CONFIG"

POLICIES = ("pi_star", "retrained", "disturbed", "single", "lmql", "cloning", "linear_q")

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0, "log_level": "INFO"},
    "data": {"source": "synth", "trajectories": ""},
    "synth": {
        "preset": "default", "width": 8, "height": 8, "regions": [], "magnitudes": [], "field_seed": 100,
        "gamma": 0.95, "episode_length": 40, "episodes": 500, "noise": 0.0, "explore_start": True,
        "phi": [0.5, 0.3, 0.2], "schedule": [],
    },
    "ingest": {
        "path": "", "agent_id": "avatar", "timestamp": "time", "action": "zone", "categorical": {},
        "numeric": [], "time_format": "", "logging_interval": 600.0, "max_gap": 0.0, "delimiter": ",",
    },
    "actions": {"mode": "auto", "features": [], "brackets": {}, "fallback": "all"},
    "signals": {"names": [], "normalization": {}, "zone_tags": {}, "guildless": ["", "none", "-1"],
                "window_length": 6, "extractors": {}},
    "split": {"train_fraction": 0.8},
    "train": {"backend": "tabular", "target": "demonstrated", "learning_rate": 0.0, "gamma": 0.95,
              "batch_size": 256, "max_epochs": 0, "target_sync_interval": 1000, "convergence_tol": 0.0,
              "key_features": []},
    "neural": {"embedding_dim": 8, "fc1_width": 16, "fc2_width": 32},
    "lp": {"sample_size": 0, "dedupe": True, "tie_break": True},
    "solve": {"cohorts": []},
    "predict": {"policies": list(POLICIES), "sigma": 0.05, "single_index": 0, "margin": 0.8,
                "margin_mode": "fixed", "lmql_backend": "neural", "retrain_backend": "tabular",
                "in_sample": False, "cloning_epochs": 300, "cloning_l2": 1e-3},
    "trends": {"window_width": 0, "stride": 0, "windows": 8, "sample_size": 5000, "min_count": 50},
}

COMMENTS: dict[str, str] = {
    "run.seed": "global seed; --seed overrides",
    "data.source": "synth | log | file",
    "data.trajectories": "canonical trajectory file when source = file",
    "synth.preset": "default | regime | custom (custom uses regions/magnitudes)",
    "synth.regions": "list of cell-index lists, one per signal",
    "synth.schedule": "list of {t = step, phi = [...]}; empty = fixed phi",
    "synth.explore_start": "first action of each episode uniform over A(s)",
    "ingest.categorical": "column -> vocabulary list, or \"auto\" to learn it",
    "ingest.time_format": "strptime format; empty = integer epoch seconds",
    "ingest.max_gap": "seconds; 0 = twice logging_interval",
    "actions.mode": "declared | inferred | auto (declared for synth, inferred for logs)",
    "actions.features": "state-key features for A(s); empty = full state (logs: action column + level bracket)",
    "actions.fallback": "all | error, for state keys absent from the map",
    "signals.names": "extractor names in order; empty = keep the signals already in the file",
    "signals.normalization": "name -> unit_mean_abs | none (default unit_mean_abs)",
    "signals.extractors": "name -> {kind, feature(s), window_length, params}",
    "train.target": "demonstrated | max",
    "train.learning_rate": "0 = backend default (tabular 1.0, neural 0.01)",
    "train.max_epochs": "0 = backend default (tabular 5000, neural 200)",
    "train.convergence_tol": "0 = backend default (tabular 1e-22, neural 1e-4 relative plateau)",
    "train.key_features": "tabular state key; empty = the A(s) key",
    "lp.sample_size": "0 = use every transition",
    "solve.cohorts": "filters such as \"level>=50\" or \"class==Warrior,level<=49\"",
    "predict.policies": ", ".join(POLICIES),
    "predict.lmql_backend": "neural | tabular",
    "trends.window_width": "0 = span / windows",
    "trends.stride": "0 = window_width",
}

_CHOICES: dict[str, tuple[str, ...]] = {
    "data.source": ("synth", "log", "file"),
    "synth.preset": ("default", "regime", "custom"),
    "actions.mode": ("auto", "declared", "inferred"),
    "actions.fallback": ("all", "error"),
    "train.backend": ("tabular", "neural"),
    "train.target": ("demonstrated", "max"),
    "predict.lmql_backend": ("tabular", "neural"),
    "predict.retrain_backend": ("tabular", "neural"),
    "predict.margin_mode": ("fixed", "trainable"),
    "run.log_level": ("DEBUG", "INFO", "WARNING", "ERROR"),
}

def _check_type(path: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a table, got {value!r}")
    if path in _CHOICES and value not in _CHOICES[path]:
        raise ConfigError(path, f"must be one of {list(_CHOICES[path])}, got {value!r}")
    return value


def validate(raw: Mapping[str, Any]) -> dict[str, dict[str, Any]]:
    """Merge ``raw`` over the defaults; unknown keys and bad values raise ConfigError."""
    cfg = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(section, f"unknown section; known: {sorted(DEFAULTS)}")
        if not isinstance(body, dict):
            raise ConfigError(section, "expected a table")
        for key, value in body.items():
            path = f"{section}.{key}"
            if key not in DEFAULTS[section]:
                raise ConfigError(path, f"unknown key; known: {sorted(DEFAULTS[section])}")
            cfg[section][key] = _check_type(path, DEFAULTS[section][key], value)
    _semantic(cfg)
    return cfg


def _semantic(cfg: dict[str, dict[str, Any]]) -> None:
    for path in ("synth.gamma", "train.gamma"):
        s, k = path.split(".")
        if not 0.0 <= cfg[s][k] < 1.0:
            raise ConfigError(path, f"must be in [0, 1), got {cfg[s][k]}")
    if not 0.0 <= cfg["synth"]["noise"] <= 1.0:
        raise ConfigError("synth.noise", "must be in [0, 1]")
    phi = cfg["synth"]["phi"]
    if any(p < 0 for p in phi) or abs(sum(phi) - 1.0) > 1e-9:
        raise ConfigError("synth.phi", f"must be non-negative and sum to 1, got {phi}")
    for i, entry in enumerate(cfg["synth"]["schedule"]):
        if not isinstance(entry, dict) or set(entry) != {"t", "phi"}:
            raise ConfigError(f"synth.schedule[{i}]", "expected {t = int, phi = [..]}")
    for path in ("synth.episodes", "synth.episode_length", "synth.width", "synth.height", "train.batch_size",
                 "train.target_sync_interval", "trends.windows"):
        s, k = path.split(".")
        if cfg[s][k] < 1:
            raise ConfigError(path, "must be >= 1")
    for path in ("train.learning_rate", "train.max_epochs", "train.convergence_tol", "lp.sample_size",
                 "trends.window_width", "trends.stride", "trends.sample_size", "trends.min_count",
                 "predict.sigma", "predict.margin", "ingest.max_gap"):
        s, k = path.split(".")
        if cfg[s][k] < 0:
            raise ConfigError(path, "must be >= 0")
    if not 0.0 < cfg["split"]["train_fraction"] <= 1.0:
        raise ConfigError("split.train_fraction", "must be in (0, 1]")
    for p in cfg["predict"]["policies"]:
        if p not in POLICIES:
            raise ConfigError("predict.policies", f"unknown policy {p!r}; known: {list(POLICIES)}")
    for name, mode in cfg["signals"]["normalization"].items():
        if mode not in ("unit_mean_abs", "none"):
            raise ConfigError(f"signals.normalization.{name}", "must be unit_mean_abs or none")
    if cfg["data"]["source"] == "log" and not cfg["ingest"]["path"]:
        raise ConfigError("ingest.path", "required when data.source = log")
    if cfg["data"]["source"] == "file" and not cfg["data"]["trajectories"]:
        raise ConfigError("data.trajectories", "required when data.source = file")


def load(path: str | Path | None = None) -> dict[str, dict[str, Any]]:
    """Read and validate a config file; ``None`` falls back to $MMBM_CONFIG, then defaults."""
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    if path is None:
        return validate({})
    p = Path(path)
    if not p.exists():
        raise ConfigError("--config", f"file not found: {p}")
    with open(p, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("--config", f"{p}: {exc}") from None
    return validate(raw)


def digest(cfg: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{json.dumps(k)} = {_toml_value(x)}" for k, x in v.items()) + "}"
    raise TypeError(v)


def reference_config() -> str:
    """Every key with its default value, as a loadable TOML document."""
    out = ["# mmbm reference configuration: every key at its default value", ""]
    for section, body in DEFAULTS.items():
        out.append(f"[{section}]")
        for key, value in body.items():
            note = COMMENTS.get(f"{section}.{key}")
            if note:
                out.append(f"# {note}")
            out.append(f"{key} = {_toml_value(value)}")
        out.append("")
    return "\n".join(out)
