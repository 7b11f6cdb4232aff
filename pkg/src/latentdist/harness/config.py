"""Flat ``key = value`` configuration files and the reference desk configuration."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping

from ..datagen import SyntheticSpec
from ..trainer import TrainConfig

__all__ = [
    "ConfigError",
    "read_config",
    "format_config",
    "REFERENCE_DATA",
    "REFERENCE_TRAIN",
    "build_synthetic_spec",
    "build_train_config",
    "parse_pairs",
    "parse_float_list",
    "parse_int_list",
]


class ConfigError(ValueError):
    pass


# reference desk configuration used by the experiment commands
REFERENCE_DATA: dict[str, Any] = {
    "num_classes": 4,
    "feature_dim": 16,
    "spread": 1.0,
    "samples_per_class": 400,
    "test_per_class": 100,
    "data_seed": 0,
    "separation": 5.0,
    "confusable_pairs": ((0, 1), (2, 3)),
    "confusable_distance": 2.5,
}

REFERENCE_TRAIN: dict[str, Any] = {
    "hidden_dim": 128,
    "head_dim": 64,
    "lr": 3e-3,
    "max_epoch": 30,
    "lr_decay_epochs": (20, 25),
}


def _normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[_normalize_key(key)] = value.strip()
    return out


def _render(value: Any) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ",".join(f"{a}-{b}" for a, b in value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def format_config(values: Mapping[str, Any], prefix: str = "# ") -> str:
    return "".join(f"{prefix}{k} = {_render(v)}\n" for k, v in sorted(values.items()))


def parse_pairs(text: str) -> tuple[tuple[int, int], ...]:
    if not text.strip():
        return ()
    pairs = []
    for item in text.split(","):
        a, b = item.split("-")
        pairs.append((int(a), int(b)))
    return tuple(pairs)


def parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(value: Any, template: Any, key: str) -> Any:
    if not isinstance(value, str):
        return value
    try:
        if key == "confusable_pairs":
            return parse_pairs(value)
        if key == "spread":
            parts = parse_float_list(value)
            return parts[0] if len(parts) == 1 else parts
        if isinstance(template, bool):
            return _parse_bool(value)
        if isinstance(template, int):
            return int(value)
        if isinstance(template, float):
            return float(value)
        if isinstance(template, tuple):
            return parse_float_list(value) if template and isinstance(template[0], float) else parse_int_list(value)
        if template is None:
            return None if value.lower() in ("", "none") else int(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def build_synthetic_spec(values: Mapping[str, Any]) -> SyntheticSpec:
    merged = dict(REFERENCE_DATA)
    merged.update({k: v for k, v in values.items() if k in REFERENCE_DATA})
    kwargs = {k: _coerce(v, REFERENCE_DATA[k], k) for k, v in merged.items()}
    kwargs["seed"] = kwargs.pop("data_seed")
    try:
        return SyntheticSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def build_train_config(values: Mapping[str, Any]) -> TrainConfig:
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    defaults = TrainConfig()
    merged = dict(REFERENCE_TRAIN)
    merged.update({k: v for k, v in values.items() if k in fields})
    kwargs = {k: _coerce(v, getattr(defaults, k), k) for k, v in merged.items()}
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
