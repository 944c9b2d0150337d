"""Run configuration: JSON file + dotted-key overrides -> hashed run layout.

The resolved config is a plain dict with three sections (data, train, run).
Its canonical-JSON digest names the run directory, so identical configs
always land in the same place and re-runs overwrite byte-identically.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import __version__
from .data import DomainPairSpec
from .errors import ConfigError
from .serialize import canonical_json, config_hash, dumps_report, write_bytes_if_changed
from .training import METHODS, TrainConfig

RUN_DEFAULTS = {
    "methods": ["pt", "vat", "optima"],
    "seeds": [1, 2, 3],
    "n_splits": 16,
    "split_seed": 0,
    "reference": "optima",
    "metric": "accuracy",
    "ttest": "welch",
    "paired": False,
    "workers": 1,
    "out_root": "runs",
    "grid_resolution": 200,
}


def default_config() -> dict:
    return {
        "data": DomainPairSpec().as_dict(),
        "train": TrainConfig().as_dict(),
        # per-method partial overrides of the train section, keyed by id
        "methods": {},
        "run": dict(RUN_DEFAULTS),
    }


def _parse_override(raw: str) -> tuple[str, object]:
    if "=" not in raw:
        raise ConfigError(f"override {raw!r} must look like section.key=value")
    key, value = raw.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value  # bare strings need no quotes
    return key.strip(), parsed


def resolve_config(path: str | None = None,
                   overrides: list[str] | None = None) -> dict:
    """Defaults, then the config file, then dotted CLI overrides."""
    config = default_config()

    train_keys = set(config["train"])

    def apply(section: str, key: str, value) -> None:
        if section not in config:
            raise ConfigError(f"unknown config section {section!r}; "
                              f"expected one of {sorted(config)}")
        if section == "methods":
            if key not in METHODS:
                raise ConfigError(f"methods.{key}: unknown method id; valid: "
                                  f"{', '.join(sorted(METHODS))}")
            if not isinstance(value, dict) or set(value) - train_keys:
                raise ConfigError(f"methods.{key} must map train keys "
                                  f"({', '.join(sorted(train_keys))}) to values")
            config["methods"].setdefault(key, {}).update(value)
            return
        if key not in config[section]:
            raise ConfigError(f"unknown key {section}.{key}; valid keys: "
                              f"{', '.join(sorted(config[section]))}")
        config[section][key] = value

    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err.msg}, line {err.lineno})")
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        for section, entries in loaded.items():
            if not isinstance(entries, dict):
                raise ConfigError(f"{path}: section {section!r} must be an object")
            for key, value in entries.items():
                apply(section, key, value)

    for raw in overrides or []:
        dotted, value = _parse_override(raw)
        parts = dotted.split(".")
        if len(parts) == 3 and parts[0] == "methods":
            apply("methods", parts[1], {parts[2]: value})
        elif len(parts) == 2:
            apply(parts[0], parts[1], value)
        else:
            raise ConfigError(f"override key {dotted!r} must be section.key "
                              f"or methods.<id>.<train key>")

    _validate(config)
    return config


def _validate(config: dict) -> None:
    for method in config["run"]["methods"]:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; valid ids: "
                              f"{', '.join(sorted(METHODS))}")
    if config["run"]["reference"] not in METHODS:
        raise ConfigError(f"unknown reference method "
                          f"{config['run']['reference']!r}")
    if not config["run"]["seeds"]:
        raise ConfigError("run.seeds must not be empty")
    try:
        data_spec(config)
        train_config(config)
        for method in config["methods"]:
            train_config(config, method=method)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err))


def data_spec(config: dict) -> DomainPairSpec:
    return DomainPairSpec(**config["data"])


def train_config(config: dict, seed: int | None = None,
                 method: str | None = None) -> TrainConfig:
    """Train section plus any per-method override section, seed applied last."""
    entries = dict(config["train"])
    if method is not None:
        entries.update(config["methods"].get(method, {}))
    cfg = TrainConfig(**entries)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


class RunLayout:
    """Directory layout of one run, named by the resolved config's hash."""

    def __init__(self, config: dict):
        self.config = config
        self.hash = config_hash(config)
        self.root = Path(config["run"]["out_root"]) / self.hash

    def path(self, *parts) -> Path:
        out = self.root.joinpath(*parts)
        out.parent.mkdir(parents=True, exist_ok=True)
        return out

    @property
    def data_dir(self) -> Path:
        return self.path("data", "x").parent

    def ensure_manifest(self) -> Path:
        """Write the manifest before any computation; no timestamps, so the
        bytes are identical across reruns of the same config."""
        manifest = {
            "config": self.config,
            "config_hash": self.hash,
            "versions": {"promptshift": __version__, "numpy": np.__version__},
        }
        path = self.path("manifest.json")
        write_bytes_if_changed(path, dumps_report(manifest).encode("utf-8"))
        return path

    def checkpoint_path(self, method: str, seed: int) -> Path:
        return self.path("checkpoints", f"{method}_seed{seed}.ck")

    def report_path(self, kind: str, name: str) -> Path:
        return self.path("reports", kind, f"{name}.json")

    def plot_path(self, name: str) -> Path:
        return self.path("plots", f"{name}.svg")

    def log_path(self, method: str, seed: int) -> Path:
        return self.path("logs", f"{method}_seed{seed}.jsonl")


def write_json(path: Path, payload) -> None:
    write_bytes_if_changed(path, dumps_report(payload).encode("utf-8"))


def canonical(config: dict) -> str:
    return canonical_json(config)
