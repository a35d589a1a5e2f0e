"""Run configuration: an INI file of ``[section] key = value`` pairs.

Values are resolved in this order, later sources winning:

1. built-in defaults (the full-scale hyperparameters)
2. the named profile (``desk`` shrinks the run to laptop scale)
3. the config file
4. environment variables ``BTM_<SECTION>__<KEY>`` (e.g. ``BTM_CONDENSE__IPC=100``)
5. ``--set section.key=value`` flags

Every key has a typed default; unknown keys and unparsable values raise
:class:`ConfigError` naming the offending ``section.key``.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
import os
from pathlib import Path


class ConfigError(ValueError):
    """Bad configuration; the message names the key path."""


DEFAULTS: dict[str, dict] = {
    "run": {"out_dir": "runs/default"},
    "data": {
        "dir": "",  # empty -> <out_dir>/data
        "csv": "",  # raw CSV to preprocess instead of generating
        "label_column": "label",
        "n_samples": 10_000,
        "n_features": 20,
        "prevalence": 0.05,
        "class_separation": 2.0,
        "noise_scale": 1.0,
        "missing_rate": 0.02,
        "seed": 0,
        "balance_train": False,
    },
    "network": {"hidden": "64", "dropout": 0.25},
    "expert": {
        "n_experts": 50,
        "seeds": "",  # comma list; empty -> 0 .. n_experts-1
        "lr": 0.02,
        "momentum": 0.9,
        "epochs": 100,
        "batch_size": 256,
        "snapshot_every": 1,
    },
    "bezier": {
        "lr": 1e-2,
        "tol": 1e-5,
        "max_iters": 300,
        "mc_samples": 2,
        "batch_size": 256,
        "full_batch": False,
    },
    "condense": {
        "method": "btm",
        "ipc": 50,
        "init": "real",
        "init_seed": 0,
        "segment_scheme": "fixed",
        "segment_length": 0.2,
        "t_start_max": 0.8,
        "student_steps": 30,
        "mtt_student_steps": 80,
        "expert_epochs": 5,
        "meta_lr": 100.0,
        "meta_momentum": 0.9,
        "eta_s": 0.01,
        "eta_s_lr": 1e-4,
        "eta_s_momentum": 0.5,
        "batch_size": 0,  # 0 -> max(2 * ipc, 256)
        "max_iters": 40_000,
        "eval_every": 10,
        "eval_epochs": 50,
        "seed": 0,
    },
    "eval": {
        "lr": 0.05,
        "momentum": 0.9,
        "epochs": 100,
        "n_seeds": 10,
        "batch_size": 256,
        "synthetic": "",  # empty -> the condense output for (method, ipc)
        "include_full": False,
    },
    "theory": {"n_t": 257, "n_t_pred": 65, "n_x": 256, "seed": 0},
}

PROFILES: dict[str, dict[str, dict]] = {
    "paper": {},
    "desk": {
        "expert": {"n_experts": 10},
        "condense": {"max_iters": 2000},
    },
}

ENV_PREFIX = "BTM_"


def _parse(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None
    return text


def _apply(cfg: dict, section: str, key: str, raw) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"{section}.{key}: unknown section {section!r}")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"{section}.{key}: unknown key")
    cfg[section][key] = _parse(f"{section}.{key}", raw, DEFAULTS[section][key])


def load_config(
    path: str | Path | None = None,
    profile: str = "paper",
    overrides: list[str] | None = None,
    environ: dict | None = None,
) -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in PROFILES[profile].items():
        cfg[section].update(values)

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)

    environ = os.environ if environ is None else environ
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX) and "__" in name:
            section, key = name[len(ENV_PREFIX):].lower().split("__", 1)
            _apply(cfg, section, key, environ[name])

    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _apply(cfg, section, key, raw)
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form; stable across runs and key order."""
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def int_list(cfg: dict, section: str, key: str) -> list[int]:
    text = str(cfg[section][key]).strip()
    if not text:
        return []
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{section}.{key}: expected a comma-separated list of ints, got {text!r}") from None
