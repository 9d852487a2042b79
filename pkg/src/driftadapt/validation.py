"""Small input-validation helpers shared across the package.

Everything downstream assumes dense float64 matrices; these helpers coerce
and fail loudly so the numerical code can stay free of defensive clutter.
"""

from __future__ import annotations

import numpy as np


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Coerce to a 2-D float64 array with finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_vector(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_cols(x: np.ndarray, expected: int, name: str = "x") -> None:
    if x.shape[1] != expected:
        raise ValueError(f"{name} has {x.shape[1]} columns, expected {expected}")


def check_same_shape(a: np.ndarray, b: np.ndarray, names: str = "a/b") -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch for {names}: {a.shape} vs {b.shape}")


def check_prob_rows(p, name: str = "p", atol: float = 1e-6) -> np.ndarray:
    """Validate a matrix of row-stochastic probability vectors."""
    arr = as_matrix(p, name)
    if np.any(arr < -atol):
        raise ValueError(f"{name} has negative entries")
    sums = arr.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > atol):
        raise ValueError(f"{name} rows do not sum to 1 (max dev {np.abs(sums - 1).max():.3g})")
    return arr
