"""Run configuration as a flat ``key = value`` file with dotted keys.

Example::

    # data
    data.path = reactions.csv
    data.group_column = additive
    mode = metarf
    seed = 7
    n_train_groups = 4
    forest.n_trees = 200
    meta.inner_lr = 0.002
    tsne.momentum = 0.5, 0.8, 250

Keys mirror the dataclass fields: ``data.*`` for the table schema, ``out``
for the output directory and every :class:`PipelineConfig` field at the top
level, with ``forest.*``, ``meta.*`` and ``tsne.*`` for the nested parts.
Tuples are comma separated; ``none`` clears an optional value.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import metarf.forest
import metarf.head
import metarf.tsne
from metarf.data import Schema
from metarf.pipeline import PipelineConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    group_column: str = "group"
    yield_column: str = "yield"
    id_column: str | None = "id"
    feature_columns: tuple[str, ...] | None = None

    def schema(self) -> Schema:
        return Schema(self.group_column, self.yield_column, self.id_column, self.feature_columns)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    out: str = "out"


def _hints(cls) -> dict[str, Any]:
    # the dataclasses use postponed annotations; resolve them in one namespace
    ns = {**vars(typing), **vars(metarf.forest), **vars(metarf.head), **vars(metarf.tsne), **globals()}
    return typing.get_type_hints(cls, globalns=ns)


def _split_type(tp) -> tuple[Any, bool]:
    """``(inner type, optional)`` for ``X | None``."""
    args = typing.get_args(tp)
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def _coerce(text: str, tp, key: str):
    inner, optional = _split_type(tp)
    s = text.strip()
    if optional and s.lower() in ("none", "null", ""):
        return None
    try:
        if inner is bool:
            low = s.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(s)
        if inner is int:
            return int(s)
        if inner is float:
            return float(s)
        if inner is str:
            return s
        if typing.get_origin(inner) is tuple:
            args = typing.get_args(inner)
            parts = [p.strip() for p in s.split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(p, args[0], key) for p in parts)
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(_coerce(p, a, key) for p, a in zip(parts, args))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _target(key: str) -> list[str]:
    head = key.split(".", 1)[0]
    if head in ("data", "out"):
        return key.split(".")
    return ["pipeline", *key.split(".")]


def _set(obj, path: list[str], text: str, key: str):
    names = {f.name for f in fields(obj)}
    name = path[0]
    if name not in names:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, name)
    if len(path) == 1:
        if is_dataclass(current):
            raise ConfigError(f"{key!r} is a section; set one of its fields")
        return replace(obj, **{name: _coerce(text, _hints(type(obj))[name], key)})
    if not is_dataclass(current):
        raise ConfigError(f"unknown config key {key!r}")
    return replace(obj, **{name: _set(current, path[1:], text, key)})


def apply_overrides(config: RunConfig, items: Mapping[str, str] | Iterable[tuple[str, str]]) -> RunConfig:
    pairs = items.items() if isinstance(items, Mapping) else items
    for key, text in pairs:
        try:
            config = _set(config, _target(key.strip()), text, key.strip())
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: {exc}") from None
    return config


def parse_config_text(text: str, origin: str = "<config>") -> list[tuple[str, str]]:
    out = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip()))
    return out


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return apply_overrides(base or RunConfig(), parse_config_text(path.read_text(encoding="utf-8"), str(path)))


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def flatten(config: RunConfig) -> list[tuple[str, str]]:
    """Every leaf as ``(dotted key, text)``; :func:`apply_overrides` inverts it."""

    def walk(obj, prefix: str):
        for f in fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if is_dataclass(v):
                yield from walk(v, f"{key}.")
            else:
                yield key, _format(v)

    out = []
    for key, text in walk(config, ""):
        out.append((key[len("pipeline.") :] if key.startswith("pipeline.") else key, text))
    return out


def dump_config(config: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten(config))


def to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)
