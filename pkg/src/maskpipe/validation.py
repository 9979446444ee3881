"""Input validation helpers used across estimators and free functions."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ValidationError


def check_matrix(a, name: str, ndim: int, dtype=np.float64) -> np.ndarray:
    """Coerce to a contiguous ndarray of the given rank, rejecting non-finite values."""
    arr = np.ascontiguousarray(a, dtype=dtype)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must have {ndim} dimension(s), got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_fraction(value: float, name: str) -> float:
    """Validate a fraction in (0, 1]."""
    value = float(value)
    if not (0.0 < value <= 1.0):
        raise ParameterError(f"{name} must lie in (0, 1], got {value}")
    return value


def check_unit_interval(value: float, name: str) -> float:
    """Validate a value in [0, 1]."""
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise ParameterError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_binary_mask(mask, name: str = "mask") -> np.ndarray:
    """Coerce to a 2-D uint8 array of zeros and ones."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got {arr.ndim}-D")
    arr = (arr != 0).astype(np.uint8)
    return arr
