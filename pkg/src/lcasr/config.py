"""Flat JSON run configuration validated against a registry of known keys."""

from __future__ import annotations

import json
import os
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Any, Optional

from .decode import WindowPlan
from .encoder import ModelConfig
from .training import TrainConfig

OUTPUT_ROOT_ENV = "LCASR_OUTPUT_ROOT"
RESOLVED_NAME = "config.resolved.json"


class ConfigError(ValueError):
    pass


def _dataclass_keys(cls, skip=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not MISSING else f.default_factory()  # type: ignore[misc]
        out[f.name] = default
    return out


MODEL_KEYS = _dataclass_keys(ModelConfig, skip=("vocab_size",))
TRAIN_KEYS = _dataclass_keys(TrainConfig)
DECODE_KEYS = {"scheme": "swa", "window_seconds": 20.0, "stride_ratio": 0.125, "central_ratio": 0.75}
EVAL_KEYS = {
    "context_seconds": 20.0,
    "source": "no_context",
    "total_seconds": 3600.0,
    "score_window_seconds": 20.0,
}
GENERAL_KEYS = {"vocab_size": 256, "output_dir": None, "max_steps": None}

KEYS: dict[str, Any] = {**MODEL_KEYS, **TRAIN_KEYS, **DECODE_KEYS, **EVAL_KEYS, **GENERAL_KEYS}
_INT_KEYS = {k for k, v in KEYS.items() if isinstance(v, int) and not isinstance(v, bool)}
_INT_KEYS |= {"window_frames", "frontend_channels", "max_steps"}
_FLOAT_KEYS = {k for k, v in KEYS.items() if isinstance(v, float)} | {"s0"}
_BOOL_KEYS = {k for k, v in KEYS.items() if isinstance(v, bool)}
_TRUE, _FALSE = ("true", "1", "yes"), ("false", "0", "no")


def _coerce(key: str, value):
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
        return None
    if key == "rotary_theta" and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value  # named preset, checked when the model is built
    if key in _BOOL_KEYS:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in _TRUE + _FALSE:
            return value.lower() in _TRUE
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if key in _INT_KEYS:
        try:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if key in _FLOAT_KEYS:
        try:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return value


class RunConfig:
    """Resolved key/value settings: defaults, then a config file, then explicit overrides."""

    def __init__(self, values: Optional[dict] = None):
        self.values = dict(KEYS)
        self.explicit: set = set()
        if values:
            self.update(values)

    def update(self, values: dict) -> None:
        unknown = sorted(set(values) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            self.values[k] = _coerce(k, v)
        self.explicit |= set(values)

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a flat JSON object")
        nested = [k for k, v in doc.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: nested values are not allowed ({', '.join(nested)})")
        return cls(doc)

    @staticmethod
    def parse_overrides(items) -> dict:
        out = {}
        for item in items or ():
            key, sep, value = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            out[key.strip()] = value
        return out

    def model_config(self, vocab_size: int) -> ModelConfig:
        kw = {k: self.values[k] for k in MODEL_KEYS}
        try:
            return ModelConfig(vocab_size=vocab_size, **kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: self.values[k] for k in TRAIN_KEYS})

    def window_plan(self) -> WindowPlan:
        try:
            return WindowPlan(
                self.values["scheme"],
                self.values["window_seconds"],
                self.values["stride_ratio"],
                self.values["central_ratio"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def to_json(self) -> str:
        return json.dumps(self.values, indent=1, sort_keys=True)

    def write_resolved(self, outdir) -> Path:
        path = Path(outdir) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


def default_output_dir(command: str) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command
