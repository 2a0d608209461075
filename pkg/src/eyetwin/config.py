"""Flat key=value run configuration files.

One option per line, ``key = value``, with ``#`` comments and blank lines
ignored. Values parse as JSON where possible (numbers, booleans, quoted
strings); anything else stays a bare string, so paths need no quoting.
Command-line flags always override file values.
"""

from __future__ import annotations

import json
from pathlib import Path


class ConfigError(ValueError):
    """Malformed config line or a key no command understands."""


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path) -> dict:
    path = Path(path)
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        values[key] = parse_value(value.strip())
    return values


def resolve(defaults: dict, file_values: dict, flags: dict) -> dict:
    """Merge defaults < config file < flags; unknown file keys error early.

    Flags equal to None mean "not given on the command line" and never
    shadow a file value.
    """
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = dict(defaults)
    merged.update(file_values)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged
