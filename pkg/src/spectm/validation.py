"""Input validation helpers used by the estimator classes and core types."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def as_float_vector(values, name: str, length: int | None = None) -> np.ndarray:
    """Coerce to a contiguous 1-D float64 array; reject non-finite entries."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"{name}: expected a 1-D vector, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise DataError(f"{name}: expected length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name}: contains non-finite values")
    return arr


def as_float_matrix(values, name: str, n_cols: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float64 array (rows = samples); reject non-finite entries."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DataError(f"{name}: expected a 2-D array, got shape {arr.shape}")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise DataError(f"{name}: expected {n_cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name}: contains non-finite values")
    return arr


def as_bool_vector(values, name: str, length: int | None = None) -> np.ndarray:
    arr = np.ascontiguousarray(values)
    if arr.dtype != np.bool_:
        arr = arr.astype(np.bool_)
    if arr.ndim != 1:
        raise DataError(f"{name}: expected a 1-D Boolean vector, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise DataError(f"{name}: expected length {length}, got {arr.shape[0]}")
    return arr


def frozen(arr: np.ndarray) -> np.ndarray:
    """Return a read-only copy, so shared domain objects stay immutable."""
    out = np.array(arr, dtype=arr.dtype, copy=True)
    out.setflags(write=False)
    return out
