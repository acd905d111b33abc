"""Plain-text ``key = value`` run configuration with typed fields.

Each command declares a dataclass of settings. Files may contain blank lines
and ``#`` comments; unknown keys are errors. The resolved configuration is
echoed in the same format, so a run can be repeated from its echo.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, Iterable

from .errors import ContractError, ParseError

ECHO_NAME = "config.txt"
_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _base_type(tp):
    """Strip ``X | None`` down to X; returns (type, optional)."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def parse_value(text: str, tp) -> Any:
    tp, optional = _base_type(tp)
    text = text.strip()
    if optional and text in ("", "none", "None"):
        return None
    if tp is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    if typing.get_origin(tp) is tuple:
        (inner, *_) = typing.get_args(tp)
        return tuple(parse_value(part, inner) for part in text.split(",") if part.strip())
    raise TypeError(f"unsupported setting type {tp}")


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def apply(settings, pairs: Iterable[tuple[str, str, str]]):
    """Return a copy of ``settings`` with (key, value, origin) pairs applied."""
    hints = _hints(type(settings))
    fields = {f.name for f in dataclasses.fields(settings)}
    updates = {}
    for key, value, origin in pairs:
        if key not in fields:
            raise ContractError(f"{origin}: unknown setting {key!r}; known: {', '.join(sorted(fields))}")
        try:
            updates[key] = parse_value(value, hints[key])
        except ValueError as exc:
            raise ContractError(f"{origin}: bad value for {key}: {exc}") from None
    return dataclasses.replace(settings, **updates)


def read_pairs(path) -> list[tuple[str, str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ParseError(f"{path}: expected key = value, got {line.strip()!r}", line=lineno)
        key, value = stripped.split("=", 1)
        out.append((key.strip(), value.strip(), f"{path}:{lineno}"))
    return out


def parse_overrides(items: Iterable[str]) -> list[tuple[str, str, str]]:
    out = []
    for item in items:
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out.append((key.strip(), value.strip(), "--set"))
    return out


def resolve(defaults, config_path=None, overrides: Iterable[str] = (), **direct):
    """Defaults, then the config file, then ``--set`` items, then explicit flags."""
    settings = defaults
    if config_path:
        settings = apply(settings, read_pairs(config_path))
    settings = apply(settings, parse_overrides(overrides))
    given = {k: v for k, v in direct.items() if v is not None}
    return dataclasses.replace(settings, **given) if given else settings


def dumps(settings) -> str:
    return "".join(f"{f.name} = {format_value(getattr(settings, f.name))}\n" for f in dataclasses.fields(settings))


def echo(settings, out_dir) -> Path:
    path = Path(out_dir) / ECHO_NAME
    path.write_text(dumps(settings), encoding="utf-8")
    return path
