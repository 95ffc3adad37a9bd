"""Dense float64 matrix kernels used by every attention path.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64. The
helpers here add the shape checks the attention code relies on and keep a
single place where products are formed, so the serial and simulated
parallel paths call exactly the same routines.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

Matrix = np.ndarray

__all__ = [
    "Matrix",
    "as_matrix",
    "zeros",
    "matmul",
    "transpose",
    "hadamard",
    "row_scale",
    "check_finite",
    "max_abs_error",
    "relative_error",
]


def as_matrix(a, *, name: str = "matrix") -> Matrix:
    """Return ``a`` as a C-contiguous 2-D float64 array (copying if needed)."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float64)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def transpose(a: Matrix) -> Matrix:
    # materialised so downstream products see contiguous memory
    return np.ascontiguousarray(a.T)


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return np.multiply(a, b)


def row_scale(a: Matrix, w) -> Matrix:
    """Scale row ``i`` of ``a`` by ``w[i]``; equivalent to ``diag(w) @ a``."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != a.shape[0]:
        raise ShapeError(f"row_scale: weights of shape {w.shape} do not match {a.shape[0]} rows")
    if not np.all(np.isfinite(w)):
        raise NumericError("row_scale: weights must be finite")
    return a * w[:, None]


def check_finite(a: Matrix, *, name: str = "input") -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains NaN or Inf")


def max_abs_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


def relative_error(actual, expected) -> float:
    """Max-norm error of ``actual`` scaled by the max-norm of ``expected``.

    When ``expected`` is identically zero the absolute error is returned.
    """
    err = max_abs_error(actual, expected)
    scale = float(np.max(np.abs(expected))) if np.size(expected) else 0.0
    return err / scale if scale > 0.0 else err
