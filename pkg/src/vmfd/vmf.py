"""Directional statistics on the unit hypersphere.

Log-domain modified Bessel functions, the von Mises-Fisher density and its
normalizer, the Sra concentration estimator, EMA class statistics and a
Wood rejection sampler.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .utils.validation import (
    DegenerateInputError,
    check_generator,
    check_unit_rows,
    check_unit_vector,
)

__all__ = [
    "BesselDomainError",
    "ClassStatistics",
    "DegenerateStatisticsError",
    "ResultantClampWarning",
    "VmfParams",
    "VonMisesFisher",
    "class_means",
    "ema_update",
    "estimate_params",
    "log_bessel_i",
    "log_norm_const",
    "mean_resultant_ratio",
    "sample_vmf",
    "vmf_log_pdf",
]

# Series below this multiple of (order + 1), large-argument expansion above.
SERIES_SWITCH = 50.0
R_CLAMP = 1.0 - 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


class BesselDomainError(ValueError):
    pass


class DegenerateStatisticsError(DegenerateInputError):
    """The EMA statistic has zero length, so no mean direction exists."""


class ResultantClampWarning(RuntimeWarning):
    pass


def _check_order(order: float) -> float:
    order = float(order)
    if order < 0 or not math.isfinite(order):
        raise BesselDomainError(f"order must be >= 0; got {order}")
    if abs(2.0 * order - round(2.0 * order)) > 1e-12:
        raise BesselDomainError(f"order must be an integer or half-integer; got {order}")
    return order


def _log_series_scaled(order: float, x: float) -> float:
    """ln of sum_m (x/2)^(2m) / (m! Gamma(m + order + 1)), i.e. ln I - order*ln(x/2)."""
    if x == 0.0:
        return -math.lgamma(order + 1.0)
    half = 0.5 * x
    log_q = 2.0 * math.log(half)
    n_terms = int(half + 12.0 * math.sqrt(x + 1.0) + 40)
    while True:
        m = np.arange(n_terms, dtype=np.float64)
        log_terms = m * log_q - gammaln(m + 1.0) - gammaln(m + order + 1.0)
        peak = log_terms.max()
        # the tail is geometric with ratio < 1 once past the peak
        if log_terms[-1] - peak < -40.0 and log_terms[-1] < log_terms[-2]:
            break
        n_terms *= 2
    return peak + math.log(math.fsum(np.exp(log_terms - peak)))


def _log_large_argument(order: float, x: float) -> float:
    """Hankel expansion; terminates exactly for half-integer orders."""
    mu = 4.0 * order * order
    term = 1.0
    total = 1.0
    prev = math.inf
    for k in range(1, 400):
        term *= -(mu - (2 * k - 1) ** 2) / (8.0 * k * x)
        mag = abs(term)
        if mag == 0.0 or mag < 1e-17 * abs(total):
            break
        if mag > prev:
            break
        total += term
        prev = mag
    return x - 0.5 * (_LOG_2PI + math.log(x)) + math.log(total)


def log_bessel_i(order: float, x: float) -> float:
    """Natural log of the modified Bessel function of the first kind, ``ln I_order(x)``.

    ``order`` must be a non-negative integer or half-integer (``C/2 - 1`` for
    some dimension ``C >= 2``).  Returns ``-inf`` at ``x = 0`` for positive
    orders.
    """
    order = _check_order(order)
    x = float(x)
    if not math.isfinite(x) or x < 0:
        raise BesselDomainError(f"x must be finite and >= 0; got {x}")
    if x == 0.0:
        return 0.0 if order == 0.0 else -math.inf
    if x <= SERIES_SWITCH * (order + 1.0):
        return order * math.log(0.5 * x) + _log_series_scaled(order, x)
    return _log_large_argument(order, x)


def log_norm_const(C: int, kappa: float) -> float:
    """ln of the vMF normalizer on the (C-1)-sphere, continuous at ``kappa = 0``."""
    if int(C) != C or C < 2:
        raise BesselDomainError(f"dimension C must be an integer >= 2; got {C}")
    kappa = float(kappa)
    if not math.isfinite(kappa) or kappa < 0:
        raise BesselDomainError(f"kappa must be finite and >= 0; got {kappa}")
    order = C / 2.0 - 1.0
    if kappa == 0.0:
        return math.lgamma(C / 2.0) - math.log(2.0) - (C / 2.0) * math.log(math.pi)
    if kappa <= SERIES_SWITCH * (order + 1.0):
        # kappa^order cancels against (kappa/2)^order inside the series
        return order * math.log(2.0) - (C / 2.0) * _LOG_2PI - _log_series_scaled(order, kappa)
    return order * math.log(kappa) - (C / 2.0) * _LOG_2PI - log_bessel_i(order, kappa)


def mean_resultant_ratio(C: int, kappa: float) -> float:
    """``A_C(kappa) = I_{C/2}(kappa) / I_{C/2-1}(kappa)``, the expected resultant length."""
    if kappa == 0:
        return 0.0
    return math.exp(log_bessel_i(C / 2.0, kappa) - log_bessel_i(C / 2.0 - 1.0, kappa))


@dataclass(frozen=True)
class VmfParams:
    mu: np.ndarray
    kappa: float
    clamped: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mu", check_unit_vector(self.mu, "mu"))
        if not (self.kappa >= 0 and math.isfinite(self.kappa)):
            raise ValueError(f"kappa must be finite and >= 0; got {self.kappa}")
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def vmf_log_pdf(z, params: VmfParams) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != params.mu.shape:
        raise ValueError(f"dimension mismatch: z has shape {z.shape}, mu has {params.mu.shape}")
    return log_norm_const(params.dim, params.kappa) + params.kappa * float(params.mu @ z)


def estimate_params(zbar_k, kappa_max: float | None = None) -> VmfParams:
    """Mean direction and Sra's closed-form concentration from a mean vector.

    ``kappa_max`` optionally caps the concentration; it is off by default.
    """
    zbar_k = np.asarray(zbar_k, dtype=np.float64)
    if zbar_k.ndim != 1 or zbar_k.shape[0] < 2:
        raise ValueError(f"zbar_k must be a vector of dimension >= 2; got shape {zbar_k.shape}")
    C = zbar_k.shape[0]
    r = float(np.linalg.norm(zbar_k))
    if r == 0.0:
        raise DegenerateStatisticsError("zero mean vector has no mean direction")
    mu = zbar_k / r
    clamped = False
    if r >= 1.0:
        warnings.warn(f"mean resultant length {r:.12g} >= 1 clamped to {R_CLAMP}",
                      ResultantClampWarning, stacklevel=2)
        r = R_CLAMP
        clamped = True
    kappa = r * (C - r * r) / (1.0 - r * r)
    if kappa_max is not None:
        kappa = min(kappa, float(kappa_max))
    return VmfParams(mu=mu, kappa=kappa, clamped=clamped)


def class_means(features, labels, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class arithmetic means of ``features``; rows for absent classes are zero."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    sums = np.zeros((n_classes, features.shape[1]))
    np.add.at(sums, labels, features)
    means = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return means, counts


@dataclass
class ClassStatistics:
    """Per-class EMA of embedding means."""

    zbar: np.ndarray
    initialized: np.ndarray
    alpha: float = 0.99

    def __post_init__(self):
        self.zbar = np.asarray(self.zbar, dtype=np.float64)
        self.initialized = np.asarray(self.initialized, dtype=bool)
        if self.zbar.ndim != 2 or self.initialized.shape != (self.zbar.shape[0],):
            raise ValueError("zbar must be (K, C) and initialized must be (K,)")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1); got {self.alpha}")

    @classmethod
    def empty(cls, n_classes: int, dim: int, alpha: float = 0.99) -> ClassStatistics:
        return cls(np.zeros((n_classes, dim)), np.zeros(n_classes, dtype=bool), alpha)

    @property
    def n_classes(self) -> int:
        return self.zbar.shape[0]

    def copy(self) -> ClassStatistics:
        return ClassStatistics(self.zbar.copy(), self.initialized.copy(), self.alpha)

    def estimate(self, kappa_max: float | None = None) -> tuple[list[VmfParams], np.ndarray]:
        """vMF parameters per class plus a mask of the classes that are usable.

        Uninitialized or degenerate classes get a uniform placeholder.
        """
        C = self.zbar.shape[1]
        placeholder = VmfParams(np.eye(C)[0], 0.0)
        params, usable = [], np.zeros(self.n_classes, dtype=bool)
        for k in range(self.n_classes):
            if not self.initialized[k]:
                params.append(placeholder)
                continue
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ResultantClampWarning)
                    params.append(estimate_params(self.zbar[k], kappa_max))
                usable[k] = True
            except DegenerateStatisticsError:
                params.append(placeholder)
        return params, usable


def ema_update(stats: ClassStatistics, batch_class_means, batch_class_counts) -> ClassStatistics:
    """Fold one batch of class means into ``stats`` in place and return it.

    The first batch that contains a class sets its statistic directly.
    """
    means = np.asarray(batch_class_means, dtype=np.float64)
    counts = np.asarray(batch_class_counts)
    if means.shape != stats.zbar.shape or counts.shape != (stats.n_classes,):
        raise ValueError(f"dimension mismatch: means {means.shape}, counts {counts.shape}, "
                         f"statistics {stats.zbar.shape}")
    present = counts > 0
    fresh = present & ~stats.initialized
    seen = present & stats.initialized
    stats.zbar[fresh] = means[fresh]
    stats.zbar[seen] = stats.alpha * stats.zbar[seen] + (1.0 - stats.alpha) * means[seen]
    stats.initialized |= present
    return stats


def _orthogonal_unit(mu: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, mu.shape[0]))
    v -= np.outer(v @ mu, mu)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_cosines(kappa: float, C: int, n: int, rng: np.random.Generator) -> np.ndarray:
    # Wood (1994) rejection scheme for w = mu^T z
    m1 = C - 1.0
    b = m1 / (math.sqrt(4.0 * kappa * kappa + m1 * m1) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m1 * math.log(1.0 - x0 * x0)
    out = np.empty(n)
    filled = 0
    while filled < n:
        size = max(2 * (n - filled), 16)
        z = rng.beta(m1 / 2.0, m1 / 2.0, size=size)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=size)
        ok = kappa * w + m1 * np.log(1.0 - x0 * w) - c >= np.log(u)
        accepted = w[ok][: n - filled]
        out[filled: filled + accepted.size] = accepted
        filled += accepted.size
    return out


def sample_vmf(params: VmfParams, n: int, rng=None) -> np.ndarray:
    """Draw ``n`` unit vectors from vMF(mu, kappa); deterministic for a given seed."""
    if n < 1:
        raise ValueError(f"n must be >= 1; got {n}")
    rng = check_generator(rng)
    mu = params.mu
    w = _sample_cosines(params.kappa, params.dim, n, rng)
    v = _orthogonal_unit(mu, n, rng)
    z = w[:, None] * mu + np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v
    return z / np.linalg.norm(z, axis=1, keepdims=True)


class VonMisesFisher(BaseEstimator):
    """Fit a single vMF distribution to unit vectors.

    Parameters
    ----------
    kappa_max : float or None
        Optional cap on the estimated concentration.

    Attributes
    ----------
    mean_direction_ : ndarray of shape (n_features,)
    concentration_ : float
    resultant_length_ : float
    """

    def __init__(self, kappa_max=None):
        self.kappa_max = kappa_max

    def fit(self, X, y=None):
        X = check_unit_rows(X, "X")
        self.n_features_in_ = X.shape[1]
        zbar = X.mean(axis=0)
        self.resultant_length_ = float(np.linalg.norm(zbar))
        self.params_ = estimate_params(zbar, self.kappa_max)
        self.mean_direction_ = self.params_.mu
        self.concentration_ = self.params_.kappa
        return self

    def score_samples(self, X):
        check_is_fitted(self, "params_")
        X = check_unit_rows(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features; fitted with {self.n_features_in_}")
        log_c = log_norm_const(self.n_features_in_, self.concentration_)
        return log_c + self.concentration_ * (X @ self.mean_direction_)

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "params_")
        return sample_vmf(self.params_, n_samples, random_state)
