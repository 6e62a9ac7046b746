"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted as _sk_check_is_fitted

from .grid import Grid


def _check(arr, grid: Grid, name: str, dtype) -> np.ndarray:
    arr = np.asarray(arr)
    if np.iscomplexobj(arr) and dtype is float:
        raise TypeError(f"{name} must be real-valued")
    arr = arr.astype(dtype, copy=False)
    if arr.shape == ():
        arr = np.full(grid.shape, arr[()], dtype=dtype)
    if arr.shape != grid.shape:
        raise ValueError(f"{name} has shape {arr.shape}; expected {grid.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_real_field(arr, grid: Grid, name: str = "field") -> np.ndarray:
    return _check(arr, grid, name, float)


def check_complex_field(arr, grid: Grid, name: str = "field") -> np.ndarray:
    return _check(arr, grid, name, complex)


def check_trace(arr, grid: Grid, name: str = "trace") -> np.ndarray:
    arr = np.asarray(arr, dtype=complex)
    if arr.shape != (grid.n_boundary,):
        raise ValueError(f"{name} has length {arr.shape}; expected ({grid.n_boundary},)")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_is_fitted(estimator, attributes) -> None:
    _sk_check_is_fitted(estimator, attributes)


__all__ = ["check_real_field", "check_complex_field", "check_trace", "check_is_fitted", "NotFittedError"]
