"""System configuration and its file format.

A configuration file is TOML with a single ``[system]`` table whose keys are
exactly the :class:`SystemConfig` field names::

    [system]
    n = 2
    m = 25
    k = "1/2"               # int, float or a "p/q" string; stored exactly
    refresh_duration = 1000 # ms
    queue_timeout = 5000    # ms
    deferred_timeout = 10000
    tag_window = 1048576
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Union

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

Rational = Union[int, float, str, Fraction]

DEFAULT_REFRESH_MS = 1000
DEFAULT_QUEUE_TIMEOUT_MS = 5000
DEFAULT_DEFERRED_TIMEOUT_MS = 10_000
DEFAULT_TAG_WINDOW = 1 << 20


class ConfigError(ValueError):
    """Raised for invalid configuration values or files."""


def as_fraction(value: Rational) -> Fraction:
    """Convert ``value`` to an exact :class:`Fraction`.

    Floats go through their shortest decimal repr, so ``0.3`` becomes
    ``3/10`` rather than the nearest binary double.
    """
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}")
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    try:
        return Fraction(value)
    except (ValueError, ZeroDivisionError, TypeError) as exc:
        raise ConfigError(f"not a rational number: {value!r}") from exc


@dataclass(frozen=True)
class SystemConfig:
    n: int
    m: int
    k: Fraction = field(default=Fraction(0))
    refresh_duration: int = DEFAULT_REFRESH_MS
    queue_timeout: int = DEFAULT_QUEUE_TIMEOUT_MS
    deferred_timeout: int = DEFAULT_DEFERRED_TIMEOUT_MS
    tag_window: int = DEFAULT_TAG_WINDOW

    def __post_init__(self):
        object.__setattr__(self, "k", as_fraction(self.k))
        for name in ("n", "m", "refresh_duration", "queue_timeout",
                     "deferred_timeout", "tag_window"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        for name in ("refresh_duration", "queue_timeout", "deferred_timeout", "tag_window"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.tag_window > 1 << 32:
            raise ConfigError("tag_window cannot exceed 2**32")

    @property
    def replica_count(self) -> int:
        return self.n * self.m

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SystemConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        missing = sorted({"n", "m"} - set(data))
        if missing:
            raise ConfigError(f"missing configuration keys: {', '.join(missing)}")
        return cls(**dict(data))

    def to_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {f.name: getattr(self, f.name) for f in fields(self)}
        out["k"] = str(self.k)
        return out


def load_config(path: str | Path) -> SystemConfig:
    """Read a :class:`SystemConfig` from a TOML file."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    extra = sorted(set(doc) - {"system"})
    if extra:
        raise ConfigError(f"unknown configuration sections: {', '.join(extra)}")
    if not isinstance(doc.get("system"), dict):
        raise ConfigError("configuration needs a [system] table")
    return SystemConfig.from_mapping(doc["system"])
