"""Plain-text configuration files.

Grammar (a subset of INI, read with :mod:`configparser`)::

    # comment
    [section]
    key = value

Values are Python literals where possible (``0.1``, ``64``, ``(64, 64)``,
``True``), bare comma lists become tuples (``8.3, 22.2``), ``none`` is
``None``, and anything else is kept as a string (``flat``).  Keys before
the first section header belong to the file's default section, so a file
that configures a single component needs no header at all.

Known sections and the dataclass each one fills:

=========== ===================================
``plant``   :class:`deeptruck.plant.PlantConfig`
``cyclegen`` :class:`deeptruck.cyclegen.CycleGenConfig`
``train``   :class:`deeptruck.train.TrainConfig`
``cacc``    :class:`deeptruck.cacc.CaccConfig`
``policy``  :class:`deeptruck.policy.PgConfig`
=========== ===================================
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
from pathlib import Path

from .cacc import CaccConfig
from .cyclegen import CycleGenConfig
from .plant import PlantConfig
from .policy import PgConfig
from .train import TrainConfig

SECTIONS = {
    "plant": PlantConfig,
    "cyclegen": CycleGenConfig,
    "train": TrainConfig,
    "cacc": CaccConfig,
    "policy": PgConfig,
}


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    text = text.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(value, default, name):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, tuple):
        value = value if isinstance(value, (tuple, list)) else (value,)
        if default and all(isinstance(d, float) for d in default):
            value = tuple(float(v) for v in value)
        return tuple(value)
    return value


def read_sections(path) -> dict[str, dict[str, str]]:
    """Raw ``{section: {key: text}}``; keys before any header go under ``""``."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for name in parser.sections():
        out["" if name == "__top__" else name] = dict(parser[name])
    return out


def build(cls, values: dict[str, str], base=None):
    """Instantiate dataclass ``cls`` from string ``values`` on top of ``base`` (or defaults)."""
    base = base if base is not None else cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"{cls.__name__}: unknown key {key!r}")
        kwargs[key] = _coerce(parse_value(text), getattr(base, key), key)
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def load_configs(path=None, default_section: str | None = None, strict: bool = True) -> dict:
    """Every known section of ``path`` as a config object (defaults when absent)."""
    raw = read_sections(path) if path is not None else {}
    top = raw.pop("", {})
    if top:
        if default_section is None:
            raise ConfigError(f"{path}: keys outside a section need a [section] header")
        raw.setdefault(default_section, {}).update(top)
    if strict:
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    return {name: build(cls, raw.get(name, {})) for name, cls in SECTIONS.items()}


def to_text(configs: dict) -> str:
    """Serialise config objects back to the same grammar (resolved values)."""
    lines = []
    for name, obj in configs.items():
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_literal(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _literal(v):
    if v is None:
        return "none"
    if isinstance(v, str):
        return v
    return repr(v)
