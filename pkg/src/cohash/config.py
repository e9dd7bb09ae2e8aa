"""Run configuration files: flat key=value lines.

A config file supplies defaults for command-line flags; any flag given
on the command line wins over the file.  Keys use the flag spelling
without the leading dashes ("batch-size=500").  '#' starts a comment,
blank lines are skipped, and a later line overrides an earlier one.
"""

from __future__ import annotations

from pathlib import Path

__all__ = ["ConfigError", "KNOWN_KEYS", "parse_config"]


class ConfigError(ValueError):
    """A config line failed to parse or names an unknown key."""


KNOWN_KEYS = frozenset({
    "input",
    "output",
    "format",
    "scale",
    "k",
    "lambda",
    "alpha",
    "gamma",
    "batch-size",
    "workers",
    "servers",
    "staleness",
    "epochs",
    "seed",
    "method",
    "mode",
    "top-k",
    "radius",
    "subcodes",
    "train-fraction",
    "train",
    "user",
    "num-items",
    "num-queries",
    "reps",
    "ks",
})


def parse_config(path: str | Path) -> dict[str, str]:
    """Read key=value lines into a dict of raw string values."""
    path = Path(path)
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                  start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if not value:
            raise ConfigError(f"{path}:{lineno}: empty value for {key!r}")
        values[key] = value
    return values
