"""Dense float64 kernels shared by every other module.

Matrices and vectors are plain ``numpy`` float64 arrays.  The functions here
only add the contract checks (shape, emptiness, finiteness) on top of
numpy/scipy; all softmax denominators in the package go through
:func:`stable_softmax` or :func:`log_sum_exp`.
"""

from __future__ import annotations

import numpy as np
from scipy import special


class NumericError(ValueError):
    """Raised when an input violates a numeric contract (NaN, empty, shape)."""


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise NumericError(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


def as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise NumericError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains NaN or Inf")
    return arr


_EXP_UNDERFLOW = -745.2


def stable_softmax(v, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction.

    Works on a vector or, with ``axis``, along one axis of an array (the
    attention code uses ``axis=0`` for column-wise softmax).
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0 or arr.shape[axis] == 0:
        raise NumericError("softmax of an empty vector")
    if not np.isfinite(arr).all():
        kind = "NaN" if np.isnan(arr).any() else "Inf"
        raise NumericError(f"softmax input contains {kind}")
    shifted = arr - arr.max(axis=axis, keepdims=True)
    # exp underflows to exactly 0 below this; skipping those entries avoids the slow path.
    out = np.zeros_like(shifted)
    np.exp(shifted, out=out, where=shifted > _EXP_UNDERFLOW)
    out /= out.sum(axis=axis, keepdims=True)
    return out


def log_sum_exp(v) -> float:
    """``log(sum(exp(v)))`` without overflow."""
    arr = as_vector(v)
    if arr.size == 0:
        raise NumericError("log_sum_exp of an empty vector")
    if np.any(np.isnan(arr)):
        raise NumericError("log_sum_exp input contains NaN")
    return float(special.logsumexp(arr))


def relu(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    check_finite(arr, "relu input")
    return np.maximum(arr, 0.0)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise NumericError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b
