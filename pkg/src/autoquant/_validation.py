"""Small argument checks shared across modules."""

from __future__ import annotations

import math


class ValidationError(ValueError):
    """Raised for invalid user input (bad configs, graphs, bitwidths)."""


def check_positive(name: str, value: float) -> float:
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise ValidationError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))
