"""Run configuration: one JSON document drives the whole pipeline.

Every tunable has an explicit default; resolving a user config deep-merges
it over the defaults, rejects unknown keys, and returns a fully
materialized document, so serialized configs are self-contained and
parse -> serialize -> parse is a fixed point.
"""

import copy
import hashlib
import json
from dataclasses import replace

from .pretrain import PretrainConfig
from .strategies import (ALL_KINDS, BN_KINDS, PL_KINDS, TENT_KINDS,
                         default_config)
from .world import WorldConfig

_GRADIENT_KINDS = TENT_KINDS + PL_KINDS

DEFAULT_CONFIG = {
    "seed": 7,
    "precision": "float64",
    "out_dir": "runs/default",
    "jobs": 1,
    "world": {
        "height": 48,
        "width": 64,
        "classes": 8,
        "n_train": 2000,
        "n_source_memory": 64,
        "n_source_eval": 32,
        "val_episodes": 4,
        "deploy_episodes": 4,
        "subsequences": 4,
        "frames_per_subsequence": 100,
        "severity": 1.0,
    },
    "pretrain": {
        "epochs": 6,
        "learning_rate": 2.5e-4,
        "sgd_momentum": 0.9,
        "weight_decay": 5e-4,
        "batch_size": 1,
        "bn_momentum": 0.1,
        "class_balance_power": 0.75,
        "dr_levels": [2, 3, 4],
    },
    "validation": {
        "adapt_iters_grid": [1],
    },
    "strategies": {
        "NA": {},
        "N_BN": {"bn_momentum": 0.1, "bn_momentum_grid": [0.1, 0.25, 0.5]},
        "C_BN": {"bn_momentum": 0.1, "bn_momentum_grid": [0.1, 0.25, 0.5]},
        "N_TENT": {"eta": 1.0, "eta_grid": [0.1, 1.0, 10.0], "adapt_iters": 1},
        "C_TENT": {"eta": 0.01, "eta_grid": [0.001, 0.01, 0.1], "adapt_iters": 1},
        "C_TENT_SR": {"eta": 0.01, "eta_grid": [0.001, 0.01, 0.1], "adapt_iters": 1,
                      "sr_weight": 1.0, "sr_batch": 1},
        "CLASS_R_TENT": {"eta": 0.1, "eta_grid": [0.01, 0.1, 1.0], "adapt_iters": 1,
                         "reset_window": 1, "reset_threshold": 1.0},
        "ORACLE_R_TENT": {"eta": 1.0, "eta_grid": [0.1, 1.0, 10.0], "adapt_iters": 1},
        "N_PL": {"eta": 1e-4, "eta_grid": [1e-5, 1e-4, 1e-3], "adapt_iters": 1},
        "C_PL": {"eta": 1e-4, "eta_grid": [1e-5, 1e-4, 1e-3], "adapt_iters": 1},
        "C_PL_SR": {"eta": 1e-4, "eta_grid": [1e-5, 1e-4, 1e-3], "adapt_iters": 1,
                    "sr_weight": 2.0, "sr_batch": 1},
        "CLASS_R_PL": {"eta": 1e-4, "eta_grid": [1e-5, 1e-4, 1e-3], "adapt_iters": 1,
                       "reset_window": 1, "reset_threshold": 1.0},
        "ORACLE_R_PL": {"eta": 1e-4, "eta_grid": [1e-5, 1e-4, 1e-3], "adapt_iters": 1},
        "N_ST_RANDOM": {},
        "N_ST_NN": {},
    },
}


class ConfigError(ValueError):
    pass


def _merge(defaults, user, path):
    out = {}
    for key, dval in defaults.items():
        if key in user:
            uval = user[key]
            if isinstance(dval, dict):
                if not isinstance(uval, dict):
                    raise ConfigError(f"{path}{key}: expected a mapping")
                out[key] = _merge(dval, uval, f"{path}{key}.")
            else:
                if isinstance(uval, dict):
                    raise ConfigError(f"{path}{key}: unexpected mapping")
                out[key] = uval
        else:
            out[key] = copy.deepcopy(dval)
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(path + k for k in unknown)}")
    return out


def resolve_config(user=None):
    """Materialize every default; reject unknown keys."""
    cfg = _merge(DEFAULT_CONFIG, user or {}, "")
    if cfg["precision"] not in ("float64", "float32"):
        raise ConfigError("precision must be float64 or float32")
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be >= 1")
    world_config(cfg)       # raises on inconsistent world parameters
    pretrain_config(cfg, 0)
    return cfg


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def config_hash(cfg):
    """Experiment identity: excludes where outputs land and how many workers ran."""
    if isinstance(cfg, dict):
        cfg = {k: v for k, v in cfg.items() if k not in ("out_dir", "jobs")}
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:16]


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return resolve_config(json.load(fh))


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(cfg))


def apply_overrides(cfg, assignments):
    """Apply `a.b.c=value` overrides on a resolved config; returns the log."""
    updated = copy.deepcopy(cfg)
    log = []
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value: {item!r}")
        key_path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = updated
        parts = key_path.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config path: {key_path}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config path: {key_path}")
        log.append(f"override {key_path}: {node[parts[-1]]!r} -> {value!r}")
        node[parts[-1]] = value
    return resolve_config(updated), log


# ---------------------------------------------------------------------------
# typed views
# ---------------------------------------------------------------------------

def world_config(cfg):
    return WorldConfig(**cfg["world"])


def pretrain_config(cfg, dr_level):
    section = {k: v for k, v in cfg["pretrain"].items() if k != "dr_levels"}
    return PretrainConfig(dr_level=dr_level, **section)


def strategy_base(cfg, kind):
    """The single (non-grid) StrategyConfig for one kind."""
    section = {k: v for k, v in cfg["strategies"][kind].items()
               if not k.endswith("_grid")}
    return default_config(kind, **section)


def strategy_grid(cfg):
    """Expand every strategy section into its validation grid."""
    grid = []
    iters_grid = cfg["validation"]["adapt_iters_grid"]
    for kind in ALL_KINDS:
        section = cfg["strategies"][kind]
        base = strategy_base(cfg, kind)
        variants = [base]
        if kind in _GRADIENT_KINDS and "eta_grid" in section:
            variants = [replace(base, eta=float(e)) for e in section["eta_grid"]]
        elif kind in BN_KINDS and "bn_momentum_grid" in section:
            variants = [replace(base, bn_momentum=float(a)) for a in section["bn_momentum_grid"]]
        if kind in _GRADIENT_KINDS and list(iters_grid) != [1]:
            variants = [replace(v, adapt_iters=int(it)) for v in variants for it in iters_grid]
        grid.extend(variants)
    return grid
