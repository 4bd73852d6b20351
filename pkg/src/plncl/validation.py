"""Input validation helpers shared by the estimator API and the CLI.

All checks raise ``ValueError`` with the offending location spelled out.
"""

from __future__ import annotations

import numpy as np


def check_counts(Y, name: str = "counts") -> np.ndarray:
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.size == 0:
        raise ValueError(f"{name} must be a nonempty 2-D array, got shape {Y.shape}")
    if not np.issubdtype(Y.dtype, np.integer):
        bad = ~np.isfinite(Y.astype(float))
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ValueError(f"{name} has a non-finite value at row {i}, column {j}")
        if np.any(Y != np.floor(Y)):
            i, j = np.argwhere(Y != np.floor(Y))[0]
            raise ValueError(f"{name} has a non-integer value at row {i}, column {j}")
    Y = Y.astype(np.int64)
    if np.any(Y < 0):
        i, j = np.argwhere(Y < 0)[0]
        raise ValueError(f"{name} has a negative value at row {i}, column {j}")
    return Y


def check_real_matrix(X, n_rows: int = None, name: str = "matrix") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.size == 0:
        raise ValueError(f"{name} must be a nonempty 2-D array, got shape {X.shape}")
    bad = ~np.isfinite(X)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"{name} has a non-finite value at row {i}, column {j}")
    if n_rows is not None and X.shape[0] != n_rows:
        raise ValueError(f"{name} has {X.shape[0]} rows, expected {n_rows}")
    return X


def add_intercept(X: np.ndarray, names: list[str]) -> tuple[np.ndarray, list[str]]:
    """Prepend an all-ones column unless one is already present first."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] >= 1 and np.all(X[:, 0] == 1.0):
        return X, names
    ones = np.ones((X.shape[0], 1))
    return np.hstack([ones, X]), ["intercept"] + list(names)
