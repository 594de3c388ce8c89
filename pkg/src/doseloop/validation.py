"""Shared input-validation helpers for the estimators and data routines."""

from __future__ import annotations

import numbers

import numpy as np


def check_matrix(X, name: str = "X", *, allow_nan: bool = False) -> np.ndarray:
    """Coerce X to a 2-d float64 array, rejecting inf and (optionally) NaN."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got ndim={X.ndim}")
    if np.isinf(X).any():
        raise ValueError(f"{name} contains infinite values")
    if not allow_nan and np.isnan(X).any():
        raise ValueError(f"{name} contains NaN values")
    return X


def check_vector(y, name: str = "y", *, allow_nan: bool = False) -> np.ndarray:
    """Coerce y to a 1-d float64 array, rejecting non-finite entries."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if np.isinf(y).any():
        raise ValueError(f"{name} contains infinite values")
    if not allow_nan and np.isnan(y).any():
        raise ValueError(f"{name} contains NaN values")
    return y


def check_consistent_length(*arrays, names: tuple = ()) -> int:
    lengths = [len(a) for a in arrays]
    if len(set(lengths)) > 1:
        labels = names or tuple(f"array{i}" for i in range(len(arrays)))
        detail = ", ".join(f"{lab}={n}" for lab, n in zip(labels, lengths))
        raise ValueError(f"inconsistent lengths: {detail}")
    return lengths[0] if lengths else 0


def check_sample_weight(sample_weight, n: int) -> np.ndarray:
    """Return a validated weight vector of length n (default all ones)."""
    if sample_weight is None:
        return np.ones(n, dtype=np.float64)
    w = np.asarray(sample_weight, dtype=np.float64).ravel()
    if len(w) != n:
        raise ValueError(f"sample_weight has length {len(w)}, expected {n}")
    if not np.all(np.isfinite(w)):
        raise ValueError("sample_weight contains non-finite values")
    if (w < 0).any():
        raise ValueError("sample_weight contains negative values")
    return w


def check_rng(seed) -> np.random.Generator:
    """Accept None, an int seed, or a Generator; return a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.default_rng()
    if isinstance(seed, numbers.Integral):
        return np.random.default_rng(int(seed))
    raise TypeError(f"cannot build a random generator from {seed!r}")
