"""JSON config loading with dotted-path overrides.

Top-level keys are :class:`EngineConfig` fields. ``backends`` maps a role
("proposal", "critic", "teacher") to a backend spec, e.g.::

    {"G": 8, "backends": {"proposal": {"kind": "http", "base_url": "http://host:8000",
                                       "model_name": "proposal", "api_key_env": "API_KEY"}}}

Overrides look like ``K=3`` or ``backends.critic.max_retries=5``; values are
parsed as JSON when possible, otherwise taken as strings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

from dcrkit.core import EngineConfig, ValidationError

_NESTED = {"backends", "toy"}


class ConfigError(ValidationError):
    pass


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    fields = {f.name for f in dataclasses.fields(EngineConfig)}
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        if keys[0] not in fields:
            raise ConfigError(f"unknown config key: {keys[0]!r}")
        if len(keys) > 1 and keys[0] not in _NESTED:
            raise ConfigError(f"{keys[0]!r} has no sub-keys")
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {path!r}")
        node[keys[-1]] = _parse_value(value)
    return data


def build_config(data: dict[str, Any]) -> EngineConfig:
    fields = {f.name for f in dataclasses.fields(EngineConfig)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return EngineConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> tuple[EngineConfig, dict[str, Any]]:
    """Return the config and the resolved raw mapping (for hashing/manifests)."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = apply_overrides(data, overrides)
    return build_config(data), data


def config_hash(data: dict[str, Any]) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
