"""Input validation helpers shared by the estimators and the functional API."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

UNIT_NORM_ATOL = 1e-6


class DegenerateInputError(ValueError):
    """Raised when an input has no well-defined direction or structure."""


def check_unit_rows(X, name: str = "X", atol: float = UNIT_NORM_ATOL) -> np.ndarray:
    """Return ``X`` as a float64 2-D array whose rows are unit vectors."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    norms = np.linalg.norm(X, axis=1)
    bad = np.abs(norms - 1.0) > atol
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"{name} row {i} has norm {norms[i]:.9g}; expected unit norm")
    return X


def check_unit_vector(z, name: str = "z", atol: float = UNIT_NORM_ATOL) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ValueError(f"{name} must be a 1-D vector with at least 2 components; got shape {z.shape}")
    if abs(np.linalg.norm(z) - 1.0) > atol:
        raise ValueError(f"{name} must have unit norm; got {np.linalg.norm(z):.9g}")
    return z


def check_labels(labels, n: int, name: str = "labels") -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n:
        raise ValueError(f"{name} must have shape ({n},); got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"{name} must be integers; got dtype {labels.dtype}")
    if labels.size and labels.min() < 0:
        raise ValueError(f"{name} must be non-negative")
    return labels.astype(np.int64, copy=False)


def check_positive(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number; got {value!r}")
    return float(value)


def check_same_shape(a: np.ndarray, b: np.ndarray, names=("a", "b")) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{names[0]} and {names[1]} must have equal shapes; got {a.shape} vs {b.shape}")


def check_generator(rng) -> np.random.Generator:
    """Coerce ``None``/int/Generator into a ``numpy.random.Generator``."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, numbers.Integral):
        return np.random.default_rng(rng)
    raise TypeError(f"expected a seed or numpy Generator; got {type(rng).__name__}")
