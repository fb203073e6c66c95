"""YAML experiment configs with a versioned schema; unknown keys are errors."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"config error at {path or '<root>'}: {message}")


@dataclass(frozen=True)
class Field:
    kind: Any  # int, float, bool, str, list or a nested schema dict
    default: Any = None
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    item: Any = None  # element kind (or nested schema dict) for lists
    required: bool = False


def _coerce(value, kind, path):
    if kind is None:
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(kind, dict):
        return validate(value, kind, path)
    raise TypeError(f"unsupported field kind {kind!r}")


def _field_value(value, spec: Field, path: str):
    if spec.kind is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        out = [_coerce(v, spec.item, f"{path}[{k}]") for k, v in enumerate(value)]
    elif spec.kind is None:
        out = value
    else:
        out = _coerce(value, spec.kind, path)
    if spec.check is not None and not spec.check(out):
        raise ConfigError(path, f"value {value!r} violates: {spec.rule}")
    return out


def validate(obj, schema: dict, path: str = "") -> dict:
    """Validate ``obj`` against ``schema`` and fill in defaults."""
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise ConfigError(path, f"expected a mapping, got {type(obj).__name__}")
    unknown = sorted(set(obj) - set(schema))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, f"unknown key (allowed: {', '.join(sorted(schema))})")
    out = {}
    for key, spec in schema.items():
        sub = f"{path}.{key}" if path else key
        if isinstance(spec, dict):
            out[key] = validate(obj.get(key), spec, sub)
        elif key in obj:
            out[key] = _field_value(obj[key], spec, sub)
        elif spec.required:
            raise ConfigError(sub, "missing required key")
        else:
            out[key] = copy.deepcopy(spec.default)
    return out


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _seed(x):
    return 0 <= x < 2**64


def _prob(x):
    return 0 < x < 1


def _pos_list(xs):
    return len(xs) > 0 and all(x > 0 for x in xs)


def _nonneg_list(xs):
    return len(xs) > 0 and all(x >= 0 for x in xs)


def _segments(xs):
    def ok(s):
        return (
            isinstance(s, list)
            and len(s) == 3
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in s)
            and 0 <= s[0] <= s[1]
            and s[2] >= 1
        )

    return len(xs) > 0 and all(ok(s) for s in xs)


TARGET = {
    "label": Field(str, ""),
    "d": Field(int, 100, _pos, "d >= 1"),
    "r0": Field(int, 10, _nonneg, "r0 >= 0"),
    "diag_base": Field(float, 3.0, _pos, "diag_base > 0"),
    "offdiag_scale": Field(float, 0.8, _nonneg, "offdiag_scale >= 0"),
    "kappa_center": Field(float, 0.0, _nonneg, "kappa_center >= 0 (0 disables matching)"),
    "kappa_tol": Field(float, 0.15, _pos, "kappa_tol > 0"),
    "diagonal": Field(bool, False),
}

LOCALITY_SCAN = {
    "schema_version": Field(int, SCHEMA_VERSION, lambda v: v == SCHEMA_VERSION, f"schema_version == {SCHEMA_VERSION}"),
    "seed": Field(int, 0, _seed, "0 <= seed < 2**64"),
    "eps_rloc": Field(float, 1e-3, _pos, "eps_rloc > 0"),
    "time_segments": Field(
        list,
        [[0.005, 0.5, 50], [0.55, 3.0, 50]],
        _segments,
        "each segment is [start, stop, count] with 0 <= start <= stop, count >= 1",
        item=None,
    ),
    "bound_times": Field(list, [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 3.5, 5.0], _pos_list, "all times > 0", item=float),
    "targets": Field(list, [], lambda v: len(v) > 0, "at least one target", item=TARGET),
    "heatmap_target": Field(int, 0, _nonneg, "index >= 0"),
    "heatmap_max_cells": Field(int, 200, _pos, "> 0"),
}

GAUSSIAN_TRADEOFF = {
    "schema_version": LOCALITY_SCAN["schema_version"],
    "seed": Field(int, 0, _seed, "0 <= seed < 2**64"),
    "d": Field(int, 101, lambda v: v >= 2, "d >= 2"),
    "h": Field(float, 0.2, _pos, "h > 0"),
    "N": Field(int, 1000, _pos, "N >= 1"),
    "N_gen": Field(int, 10_000, lambda v: v >= 2, "N_gen >= 2"),
    "n_steps": Field(int, 1000, lambda v: v >= 2, "n_steps >= 2"),
    "beta_1": Field(float, 1e-4, _prob, "0 < beta_1 < 1"),
    "beta_N": Field(float, 0.05, _prob, "0 < beta_N < 1"),
    "radii": Field(list, [2, 4, 6, 8, 10, 12, 16, 20, 25, 35, 50, 75, 100], _nonneg_list, "radii >= 0", item=int),
    "heatmap_radii": Field(list, [4, 12, 35], lambda v: all(x >= 0 for x in v), "radii >= 0", item=int),
    "reps": Field(int, 30, lambda v: v >= 1, "reps >= 1"),
    "eps_rloc": Field(float, 1e-3, _pos, "eps_rloc > 0"),
    "method": Field(str, "sde", lambda v: v in ("sde", "moment"), "one of sde, moment"),
    "exact_covariance": Field(bool, False),
}

CIR = {
    "schema_version": LOCALITY_SCAN["schema_version"],
    "seed": Field(int, 0, _seed, "0 <= seed < 2**64"),
    "process": {
        "a": Field(float, 1.136, _pos, "a > 0"),
        "b": Field(float, 1.1, _pos, "b > 0"),
        "sigma": Field(float, 0.4205, _nonneg, "sigma >= 0"),
        "h": Field(float, 0.01, _pos, "h > 0"),
        "dt": Field(float, 1.0, _pos, "dt > 0"),
        "N": Field(int, 50, _pos, "N >= 1"),
        "M": Field(int, 50, _pos, "M >= 1"),
    },
    "schedule": {
        "T": Field(float, 0.05, _pos, "T > 0"),
        "beta_0": Field(float, 1e-4, _prob, "0 < beta_0 < 1"),
        "beta_T": Field(float, 0.5, _prob, "0 < beta_T < 1"),
        "step": Field(float, 0.001, _pos, "step > 0"),
    },
    "radii": Field(list, [0, 2, 20], _nonneg_list, "radii >= 0", item=int),
    "train": {
        "learning_rate": Field(float, 5e-5, _nonneg, "learning_rate >= 0"),
        "batch_size": Field(int, 100, _pos, "batch_size >= 1"),
        "n_epochs": Field(int, 4000, _nonneg, "n_epochs >= 0"),
        "n_train_points": Field(int, 5000, _pos, "n_train_points >= 1"),
        "weighting": Field(str, "noise", lambda v: v in ("dsm", "noise"), "one of dsm, noise"),
        "parametrization": Field(str, "residual", lambda v: v in ("score", "noise", "residual"), "one of score, noise, residual"),
        "noise_mode": Field(str, "independent", lambda v: v in ("independent", "shared"), "one of independent, shared"),
        "positions": Field(str, "auto", lambda v: v in ("interior", "all", "auto"), "one of interior, all, auto"),
    },
    "generate": {
        "n_series": Field(int, 100, _pos, "n_series >= 1"),
    },
    "evaluate": {
        "max_lag": Field(int, 10, _nonneg, "max_lag >= 0"),
        "n_bins": Field(int, 50, _pos, "n_bins >= 1"),
    },
}

VERIFY = {
    "schema_version": LOCALITY_SCAN["schema_version"],
    "seed": Field(int, 0, _seed, "0 <= seed < 2**64"),
}

SCHEMAS = {
    "locality-scan": LOCALITY_SCAN,
    "gaussian-tradeoff": GAUSSIAN_TRADEOFF,
    "cir": CIR,
    "verify": VERIFY,
}


def _scan_targets(dims_r0, center=175.0):
    return [
        {"label": f"d{d}_r{r0}", "d": d, "r0": r0, "diag_base": 3.0, "offdiag_scale": 0.8, "kappa_center": center}
        for d, r0 in dims_r0
    ]


PRESETS = {
    "locality-scan": {
        "paper": {"targets": _scan_targets([(250, 10), (500, 10), (1000, 10)])},
        "bandwidth": {"targets": _scan_targets([(1000, 5), (1000, 10), (1000, 20)], center=0.0)},
        "smoke": {
            "targets": [
                {"label": "d60_r3", "d": 60, "r0": 3, "diag_base": 3.0, "offdiag_scale": 0.5},
                {"label": "diagonal", "d": 60, "r0": 0, "diagonal": True},
            ],
            "time_segments": [[0.01, 2.0, 20]],
        },
    },
    "gaussian-tradeoff": {
        "paper": {},
        "smoke": {"d": 21, "reps": 3, "N_gen": 1000, "radii": [1, 2, 4, 8, 20], "heatmap_radii": [2, 8]},
    },
    "cir": {
        "paper": {},
        "smoke": {
            "process": {"M": 10, "N": 20},
            "radii": [0, 2],
            "train": {"n_epochs": 5, "n_train_points": 500},
            "generate": {"n_series": 20},
        },
    },
    "verify": {"paper": {}, "smoke": {}},
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(command: str, path: str | Path | None = None, preset: str = "paper") -> dict:
    """Validated config for ``command``: preset values overlaid by the YAML file."""
    if command not in SCHEMAS:
        raise KeyError(f"no config schema for command {command!r}")
    presets = PRESETS[command]
    if preset not in presets:
        raise ConfigError("preset", f"unknown preset {preset!r} (choose from {', '.join(presets)})")
    raw = copy.deepcopy(presets[preset])
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("", f"cannot parse {path}: {exc}") from None
        if user is not None and not isinstance(user, dict):
            raise ConfigError("", "top level must be a mapping")
        raw = _merge(raw, user or {})
    return validate(raw, SCHEMAS[command])
