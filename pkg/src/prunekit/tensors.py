"""Dense tensor conventions and norms.

Everything downstream carries weights and activations as float64 numpy
arrays in row-major order with rank 1..4; these helpers pin that contract
and define the two norms used by the capacity probe.
"""
from __future__ import annotations

import numpy as np

from .errors import ValidationError

MAX_RANK = 4


def as_tensor(data, name: str = "tensor") -> np.ndarray:
    """Coerce to a contiguous float64 array and validate it."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    return validate_tensor(arr, name)


def validate_tensor(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ValidationError(f"{name}: rank must be 1..{MAX_RANK}, got {arr.ndim}")
    if any(extent < 1 for extent in arr.shape):
        raise ValidationError(f"{name}: every extent must be >= 1, got shape {arr.shape}")
    if arr.dtype != np.float64:
        raise ValidationError(f"{name}: dtype must be float64, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite entries")
    return arr


def frobenius_norm(t: np.ndarray) -> float:
    """Square root of the sum of squared entries."""
    return float(np.linalg.norm(np.ravel(t)))


def l2_norm(t: np.ndarray) -> float:
    """Euclidean norm of the flattened tensor; equals frobenius_norm."""
    return float(np.linalg.norm(np.ravel(t)))
