"""Flat text configuration files.

Grammar (one directive per line):

* ``# comment`` and blank lines are ignored; ``#`` also starts a trailing
  comment after a value.
* ``[section]`` or ``[section name]`` opens a new section; keys before any
  header land in the implicit ``plan`` section.
* ``key = value`` assigns into the current section.  Values are typed by
  trial: ``true``/``false`` (case-insensitive) -> bool, then int, then
  float, then ``none`` -> None; anything else stays a string.  A value
  containing commas becomes a list of typed scalars.

Sections are returned in file order; duplicate keys within a section take
the last assignment.  Command-line overrides use ``section.key=value``
(bare ``key=value`` targets ``plan``) with the same scalar typing.
"""
from __future__ import annotations

__all__ = [
    "ConfigError",
    "parse_scalar",
    "parse_value",
    "parse_config_text",
    "parse_config",
    "apply_overrides",
]


class ConfigError(ValueError):
    """Raised for malformed config text or overrides."""


def parse_scalar(text: str):
    text = text.strip()
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if low in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_value(text: str):
    if "," in text:
        return [parse_scalar(part) for part in text.split(",")]
    return parse_scalar(text)


def parse_config_text(text: str) -> dict[str, dict[str, object]]:
    sections: dict[str, dict[str, object]] = {}
    current = "plan"
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: unterminated section header")
            current = line[1:-1].strip()
            if not current:
                raise ConfigError(f"line {lineno}: empty section name")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        sections.setdefault(current, {})[key] = parse_value(value)
    return sections


def parse_config(path: str) -> dict[str, dict[str, object]]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def apply_overrides(
    sections: dict[str, dict[str, object]], overrides
) -> dict[str, dict[str, object]]:
    """Apply ``section.key=value`` strings on top of parsed sections."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        target, _, value = item.partition("=")
        target = target.strip()
        if "." in target:
            section, _, key = target.rpartition(".")
        else:
            section, key = "plan", target
        if not section or not key:
            raise ConfigError(f"override {item!r} has an empty section or key")
        sections.setdefault(section, {})[key] = parse_value(value)
    return sections
