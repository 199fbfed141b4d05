"""Dense float64 vector/matrix kernels shared by every model in the package."""

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def vec(data) -> np.ndarray:
    """Build a finite float64 vector from any 1-d sequence."""
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected 1-d data, got shape {v.shape}")
    require_finite(v, "vec")
    return v


def mat(data) -> np.ndarray:
    """Build a finite float64 row-major matrix from nested sequences."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected 2-d data, got shape {m.shape}")
    require_finite(m, "mat")
    return m


def require_finite(a: np.ndarray, label: str = "array") -> None:
    if not np.isfinite(a).all():
        raise FloatingPointError(f"non-finite entries in {label}")


def dot(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionError(f"dot: length mismatch {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    if m.ndim != 2 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec: {m.shape} x {v.shape}")
    return m @ v


def outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.outer(a, b)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: length mismatch {a.shape} vs {b.shape}")
    return a * b


def sigmoid(x: float) -> float:
    """Numerically stable logistic function; exact 0/1 is never returned."""
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def sigmoid_arr(x: np.ndarray) -> np.ndarray:
    """Elementwise stable sigmoid, overflow-free for any finite float64."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x) -> np.ndarray:
    """ln(sigmoid(x)) without overflow, scalar or elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = -np.log1p(np.exp(-x[pos]))
    out[~pos] = x[~pos] - np.log1p(np.exp(x[~pos]))
    return out if out.ndim else float(out)
