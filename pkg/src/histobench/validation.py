"""Input validation helpers used by every estimator and I/O routine."""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


def check_matrix(X, name: str = "X", dtype=np.float64) -> np.ndarray:
    """Return a C-contiguous 2-D float array, rejecting NaN/Inf entries."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {X.shape}")
    if not np.isfinite(X).all():
        bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
        raise ContractViolation(f"{name} contains non-finite values (first bad row {bad})")
    return np.ascontiguousarray(X)


def check_vector(x, name: str = "x", dtype=np.float64) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ContractViolation(f"{name} contains non-finite values")
    return x


def check_labels(y, n_classes: int | None = None, name: str = "y") -> np.ndarray:
    """Class indices as int64; optionally bounds-checked against n_classes."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {y.shape}")
    if y.size == 0:
        raise ContractViolation(f"{name} is empty")
    if not np.issubdtype(y.dtype, np.integer):
        yi = y.astype(np.int64)
        if not np.array_equal(yi, y):
            raise ContractViolation(f"{name} must hold integer class indices")
        y = yi
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ContractViolation(f"{name} has negative class index {int(y.min())}")
    if n_classes is not None and y.max() >= n_classes:
        raise ContractViolation(
            f"{name} has class index {int(y.max())} but only {n_classes} classes"
        )
    return y


def check_same_length(*arrays, names: str = "arguments") -> None:
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise ContractViolation(f"{names} must have equal length, got {sorted(lengths)}")


def check_shapes_match(a: np.ndarray, b: np.ndarray, names: str = "arrays") -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{names} must shape-match, got {a.shape} vs {b.shape}")
