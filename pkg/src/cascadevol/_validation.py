"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array


def check_series(x, name="x", min_length=1):
    """Return ``x`` as a finite 1-D float array."""
    arr = check_array(np.asarray(x, dtype=float), ensure_2d=False, dtype=np.float64,
                      input_name=name)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size < min_length:
        raise ValueError(f"{name} needs at least {min_length} samples, got {arr.size}")
    return arr


def check_paths(X, name="X"):
    """Return a 2-D ``(n_paths, length)`` float array from one path or a stack of paths."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    return check_array(arr, dtype=np.float64, input_name=name)


def check_positive(value, name, strict=True):
    value = float(value)
    if not np.isfinite(value) or (value <= 0 if strict else value < 0):
        bound = "> 0" if strict else ">= 0"
        raise ValueError(f"{name} must be finite and {bound}, got {value}")
    return value


def check_increasing(values, name):
    arr = check_series(values, name)
    if np.any(np.diff(arr) <= 0):
        raise ValueError(f"{name} must be strictly increasing")
    return arr
