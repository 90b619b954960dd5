"""Key-value config files for ``HyperParams`` with ``TACE_`` environment overrides.

Format: one ``key = value`` per line, ``#`` starts a comment, keys are the
``HyperParams`` field names (``spatial_ranges`` takes six comma-separated
numbers). ``TACE_<KEY>`` in the environment wins over the file.
"""

from __future__ import annotations

import os
from dataclasses import fields

from .counterfact import HyperParams

ENV_PREFIX = "TACE_"


class ConfigError(ValueError):
    pass


def _field_types() -> dict:
    defaults = HyperParams()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(HyperParams)}


def _convert(key: str, text: str, kind):
    try:
        if kind is tuple:
            return tuple(float(v) for v in text.split(","))
        if kind is int:
            return int(text)
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_config(text: str) -> dict:
    kinds = _field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _convert(key, value, kinds[key])
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    kinds = _field_types()
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in kinds:
            raise ConfigError(f"unknown override {name}")
        out[key] = _convert(key, value, kinds[key])
    return out


def load_hyperparams(path=None, environ=None) -> HyperParams:
    values = {}
    if path is not None:
        with open(path) as f:
            values.update(parse_config(f.read()))
    values.update(env_overrides(environ))
    try:
        return HyperParams(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(hp: HyperParams) -> str:
    lines = []
    for key, value in hp.to_dict().items():
        if isinstance(value, (list, tuple)):
            value = ",".join(repr(float(v)) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
