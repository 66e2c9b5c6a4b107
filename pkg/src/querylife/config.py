"""Run configuration: one strict JSON file per run.

Every section maps onto a dataclass.  Unknown keys, wrong types and failed
invariants raise :class:`ConfigError` naming the dotted path of the culprit,
for example ``genfilt.threshold`` or ``schedule.stages[1].epochs``.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence, Union

from .corpus.synth import CorpusConfig
from .corpus.training import OptimConfig, StageConfig, default_schedule
from .encoders import EncoderConfig
from .eval import EvalConfig
from .genfilt import GenFiltConfig
from .losses import LossConfig

OUT_DIR_ENV = "QUERYLIFE_OUT_DIR"
PRESETS = ("reference", "no-qma", "no-qmf", "no-genfilt")
PRECISIONS = ("float32", "float64")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


@dataclass
class ScheduleConfig:
    stages: list[StageConfig] = field(default_factory=default_schedule)
    optimizer: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if len(self.stages) != 3:
            raise ValueError("schedule.stages must list exactly three stages")


@dataclass
class RunConfig:
    seed: int
    encoder: EncoderConfig
    losses: LossConfig
    genfilt: GenFiltConfig
    schedule: ScheduleConfig
    eval: EvalConfig
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    data_dir: str = "data"
    out_dir: str = "runs"
    precision: str = "float32"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ValueError(f"run.precision must be one of {PRECISIONS}")


REQUIRED = ("seed", "encoder", "losses", "genfilt", "schedule", "eval")


# ------------------------------------------------------------------ parsing

def _join(path: str, key: str | int) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else key


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _convert(value: Any, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _convert(value, a, path)
            except ConfigError as err:
                errors.append(err.message)
        raise ConfigError(path, "; ".join(errors))
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        item = args[0] if args else Any
        items = [_convert(v, item, _join(path, i)) for i, v in enumerate(value)]
        return items if origin is list else tuple(items)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return {str(k): _convert(v, args[1], _join(path, str(k))) for k, v in value.items()}
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {_type_name(tp)}")


_MSG_PATH = re.compile(r"^[a-z_]+\.([a-z_]+)\b\s*(.*)$", re.S)


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(_join(path, unknown[0]), f"unknown key (allowed: {', '.join(sorted(fields))})")
    missing = [n for n, f in fields.items() if n not in raw and f.default is dataclasses.MISSING
               and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError(path, f"missing required keys: {', '.join(missing)}")
    kwargs = {k: _convert(v, hints[k], _join(path, k)) for k, v in raw.items()}
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except ValueError as err:
        if isinstance(err, ConfigError):
            raise
        msg = str(err)
        m = _MSG_PATH.match(msg)
        if m and m.group(1) in fields:
            raise ConfigError(_join(path, m.group(1)), m.group(2) or msg) from None
        raise ConfigError(path, msg) from None
    return obj


def config_from_dict(raw: Any) -> RunConfig:
    if not isinstance(raw, dict) or not raw:
        raise ConfigError("", f"config is empty; required sections: {', '.join(REQUIRED)}")
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError("", f"missing required sections: {', '.join(missing)}")
    return _build(RunConfig, raw, "")


def load_config(path: str | Path, overrides: Sequence[str] = (), env: dict | None = None) -> RunConfig:
    """Parse and validate a JSON run config, applying ``key.path=value`` overrides.

    ``QUERYLIFE_OUT_DIR`` in ``env`` (default ``os.environ``) replaces ``out_dir``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise ConfigError("", f"config is empty; required sections: {', '.join(REQUIRED)}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError("", f"not valid JSON ({err.msg} at line {err.lineno})") from None
    for item in overrides:
        apply_override(raw, item)
    env = os.environ if env is None else env
    if env.get(OUT_DIR_ENV):
        raw["out_dir"] = env[OUT_DIR_ENV]
    return config_from_dict(raw)


def apply_override(raw: dict, item: str) -> None:
    """Set one scalar leaf: ``a.b.c=value`` or ``schedule.stages.1.epochs=5``.

    The value is read as JSON when possible and as a plain string otherwise.
    """
    if "=" not in item:
        raise ConfigError(item, "override must look like key.path=value")
    key, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    if isinstance(value, (dict, list)):
        raise ConfigError(key, "overrides only replace scalar values")
    parts = key.split(".")
    node: Any = raw
    for i, part in enumerate(parts[:-1]):
        sub = _join(".".join(parts[:i]), part)
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise ConfigError(sub, "no such list element")
            node = node[int(part)]
        else:
            if part not in node:
                node[part] = {}
            node = node[part]
        if not isinstance(node, (dict, list)):
            raise ConfigError(sub, "is a scalar, cannot descend into it")
    last = parts[-1]
    if isinstance(node, list):
        if not last.isdigit() or int(last) >= len(node):
            raise ConfigError(key, "no such list element")
        node[int(last)] = value
    else:
        node[last] = value


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(x):
        if dataclasses.is_dataclass(x):
            return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        return x
    return plain(cfg)


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    """Write the fully resolved config (every default spelled out)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return Path(str(resources.files("querylife") / "presets" / f"{name}.json"))


def load_preset(name: str, overrides: Sequence[str] = ()) -> RunConfig:
    return load_config(preset_path(name), overrides, env={})
