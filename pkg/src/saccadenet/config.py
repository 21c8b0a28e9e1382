"""JSON config loading with schema validation for the config dataclasses."""

from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path
from typing import Any, TypeVar

from pydantic import TypeAdapter, ValidationError

T = TypeVar("T")


class ConfigError(ValueError):
    """Invalid config; the message names the offending field and file."""


def _unknown_keys(cls, data: Any, path: str) -> list[str]:
    if not (dataclasses.is_dataclass(cls) and isinstance(data, dict)):
        return []
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    bad = [f"{path}.{k}" if path else k for k in data if k not in names]
    for k, v in data.items():
        if k in names:
            bad += _unknown_keys(hints[k], v, f"{path}.{k}" if path else k)
    return bad


def load_config(cls: type[T], data: Any, where: str = "config") -> T:
    """Validate ``data`` (a dict) into ``cls``; unknown and invalid fields are errors."""
    if data is None:
        data = {}
    bad = _unknown_keys(cls, data, "")
    if bad:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(bad)}")
    try:
        return TypeAdapter(cls).validate_python(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise ConfigError(f"{where}: field {loc}: {first['msg']}") from None


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None


def to_jsonable(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    return obj
