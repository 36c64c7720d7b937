"""Density- and category-aware sampling of point-pixel pairs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .utils.validation import check_generator, check_positive

__all__ = [
    "SAMPLING_MODES",
    "DensityModel",
    "PairSampler",
    "SamplingWeights",
    "compute_weights",
    "draw_pairs",
    "expected_class_counts",
    "kde_density",
    "silverman_bandwidth",
]

SAMPLING_MODES = ("random", "density", "category", "dcas")
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
MIN_BANDWIDTH = 1e-3


@dataclass(frozen=True)
class DensityModel:
    """Gaussian KDE over sensor ranges.

    ``kernel="standard"`` is the usual estimator with a unit-scale kernel;
    ``kernel="prescaled"`` reads the kernel as already divided by ``h``, so
    both the argument and the prefactor are scaled twice.
    """

    distances: np.ndarray
    bandwidth: float
    kernel: str = "standard"

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=np.float64).ravel()
        if d.size < 1:
            raise ValueError("density model needs at least one distance")
        object.__setattr__(self, "distances", d)
        object.__setattr__(self, "bandwidth", check_positive(self.bandwidth, "bandwidth"))
        if self.kernel not in ("standard", "prescaled"):
            raise ValueError(f"unknown kernel {self.kernel!r}")


@dataclass(frozen=True)
class SamplingWeights:
    weights: np.ndarray
    category_counts: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1 or np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be a non-empty vector of positive finite values")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1; got {w.sum()!r}")
        object.__setattr__(self, "weights", w)


def silverman_bandwidth(distances) -> float:
    """Silverman's rule of thumb, ``1.06 * std * M^(-1/5)``, floored at 1 mm."""
    d = np.asarray(distances, dtype=np.float64).ravel()
    sigma = float(np.std(d, ddof=1)) if d.size > 1 else 0.0
    return max(1.06 * sigma * d.size ** -0.2, MIN_BANDWIDTH)


def kde_density(query, model: DensityModel):
    """Evaluate the range density at ``query`` (scalar or array of ranges)."""
    q = np.asarray(query, dtype=np.float64)
    if np.any(q < 0):
        raise ValueError("query distances must be >= 0")
    h = model.bandwidth
    scale = h * h if model.kernel == "prescaled" else h
    u = (q.reshape(-1, 1) - model.distances.reshape(1, -1)) / scale
    kernel = np.exp(-0.5 * u * u).sum(axis=1) * _INV_SQRT_2PI
    if model.kernel == "prescaled":
        kernel = kernel / h
    dens = kernel / (model.distances.size * h)
    # tails underflow far from every sample; the density stays strictly positive
    dens = np.maximum(dens, np.finfo(np.float64).tiny)
    return float(dens[0]) if q.ndim == 0 else dens.reshape(q.shape)


def compute_weights(pairs, bandwidth: float | str = "silverman", mode: str = "dcas",
                    reference_distances=None, kernel: str = "standard",
                    n_classes: int | None = None) -> SamplingWeights:
    """Normalized sampling probabilities, inverse to range density times class count.

    ``pairs`` is anything with ``distance`` and ``weak_label`` columns.  The
    KDE is built from ``reference_distances`` (the whole sweep) when given,
    otherwise from the pairs themselves.
    """
    if mode not in SAMPLING_MODES:
        raise ValueError(f"mode must be one of {SAMPLING_MODES}; got {mode!r}")
    distances = np.asarray(pairs.distance, dtype=np.float64)
    labels = np.asarray(pairs.weak_label, dtype=np.int64)
    if distances.size < 1:
        raise ValueError("need at least one pair")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(labels, minlength=n_classes)
    raw = np.ones(distances.size)
    if mode in ("density", "dcas"):
        ref = distances if reference_distances is None else np.asarray(reference_distances, np.float64)
        h = silverman_bandwidth(ref) if bandwidth == "silverman" else float(bandwidth)
        raw = raw / kde_density(distances, DensityModel(ref, h, kernel))
    if mode in ("category", "dcas"):
        raw = raw / counts[labels]
    # normalize in two steps so extreme raw magnitudes do not overflow the sum
    raw = raw / raw.max()
    return SamplingWeights(raw / raw.sum(), counts)


def draw_pairs(weights: SamplingWeights, m_s: int, rng=None) -> np.ndarray:
    """Weighted draw of ``m_s`` distinct pair indices."""
    w = weights.weights
    if not 1 <= m_s <= w.size:
        raise ValueError(f"m_s must lie in [1, {w.size}]; got {m_s}")
    rng = check_generator(rng)
    if m_s == w.size:
        return np.arange(w.size)
    return rng.choice(w.size, size=m_s, replace=False, p=w)


def expected_class_counts(weights, labels, n_classes: int, m_s: int = 1) -> np.ndarray:
    """Per-class expected count of a single-draw sampler scaled to ``m_s`` draws."""
    w = weights.weights if isinstance(weights, SamplingWeights) else np.asarray(weights)
    return m_s * np.bincount(np.asarray(labels), weights=w, minlength=n_classes)


class PairSampler(BaseEstimator):
    """Estimator wrapper around :func:`compute_weights` and :func:`draw_pairs`.

    Parameters
    ----------
    mode : {"random", "density", "category", "dcas"}
    bandwidth : "silverman" or float
    kernel : {"standard", "prescaled"}
    """

    def __init__(self, mode="dcas", bandwidth="silverman", kernel="standard"):
        self.mode = mode
        self.bandwidth = bandwidth
        self.kernel = kernel

    def fit(self, distances, labels, reference_distances=None):
        distances = np.asarray(distances, dtype=np.float64).ravel()
        labels = np.asarray(labels, dtype=np.int64).ravel()
        if distances.shape != labels.shape:
            raise ValueError("distances and labels must have the same length")
        ref = distances if reference_distances is None else np.asarray(reference_distances, np.float64)
        self.bandwidth_ = silverman_bandwidth(ref) if self.bandwidth == "silverman" else float(self.bandwidth)
        sw = compute_weights(_Columns(distances, labels), self.bandwidth_, self.mode, ref, self.kernel)
        self.weights_ = sw.weights
        self.category_counts_ = sw.category_counts
        self.sampling_weights_ = sw
        return self

    def sample(self, m_s, random_state=None):
        check_is_fitted(self, "weights_")
        return draw_pairs(self.sampling_weights_, m_s, random_state)


@dataclass
class _Columns:
    distance: np.ndarray
    weak_label: np.ndarray
