"""Input validation helpers for the estimator classes."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DataError


def check_coords(X) -> np.ndarray:
    """Return ``X`` as a finite float array of shape ``(n, 2)``."""
    try:
        X = check_array(X, dtype=np.float64, ensure_min_samples=0, ensure_all_finite=True)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if X.shape[1] != 2:
        raise DataError(f"coordinates must have shape (n, 2), got {X.shape}")
    return X


def check_station_values(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != n:
        raise DataError(f"{y.size} values for {n} stations")
    if not np.all(np.isfinite(y)):
        raise DataError("station values must be finite")
    return y
