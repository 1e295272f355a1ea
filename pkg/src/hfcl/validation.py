"""Small argument checks shared by the config parser and the estimator."""

from __future__ import annotations

import math

from .exceptions import ConfigurationError


def check_int(name: str, value, lo: int | None = None, hi: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise ConfigurationError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if lo is not None and value < lo:
        raise ConfigurationError(f"{name} must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigurationError(f"{name} must be <= {hi}, got {value}")
    return value


def check_float(name: str, value, lo: float | None = None, *, strict: bool = False,
                allow_inf: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"{name} must be a number, got {value!r}")
    value = float(value)
    if math.isnan(value) or (math.isinf(value) and not allow_inf):
        raise ConfigurationError(f"{name} must be finite, got {value}")
    if lo is not None and (value <= lo if strict else value < lo):
        raise ConfigurationError(f"{name} must be {'>' if strict else '>='} {lo}, got {value}")
    return value


def check_choice(name: str, value, choices) -> str:
    if value not in choices:
        raise ConfigurationError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value


def check_optional_bits(name: str, value) -> int | None:
    return None if value is None else check_int(name, value, 1, 32)
