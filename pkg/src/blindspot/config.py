"""Flat key=value configuration files.

One assignment per line, `key = value`; blank lines and lines starting
with '#' are skipped. Values stay strings and are coerced at the point
of use. Precedence is explicit flag, then config value, then built-in
default; `pick` applies that rule.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ValidationError

__all__ = ["load_config", "pick"]


def load_config(path) -> dict[str, str]:
    """Parse a flat key=value file into a string-to-string mapping."""
    text = Path(path).read_text(encoding="utf-8")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValidationError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def pick(flag_value, config: dict[str, str], key: str, default, convert=str):
    """Resolve one setting: explicit flag > config entry > default."""
    if flag_value is not None:
        return flag_value
    if key in config:
        try:
            return convert(config[key])
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"config key {key!r}: {exc}") from exc
    return default
