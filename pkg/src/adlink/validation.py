"""Input validation helpers shared across the package.

These mirror the scikit-learn ``check_array`` style: validate, coerce to
float64, and raise ``ValueError`` with a named offender on contract
violations.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Raised when an input file or record violates a documented contract."""


def as_float64_2d(x, name: str = "X") -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array, rejecting non-finite rows."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_labels(y, n: int | None = None, name: str = "labels") -> np.ndarray:
    arr = np.asarray(y, dtype=np.int64).reshape(-1)
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {n}")
    return arr


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Return a copy with unit-norm rows; zero rows are left untouched."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return x / safe


def check_rows_normalized(x: np.ndarray, tol: float = 1e-6, name: str = "X") -> None:
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ValueError(
            f"{name} rows must be L2-normalized; row {bad[0]} has norm {norms[bad[0]]!r}"
        )


def check_unique_ids(ids: Sequence[str], name: str = "ids") -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise ValueError(f"duplicate id {i!r} in {name}")
        seen.add(i)


def check_positive(value: float, name: str) -> None:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
