"""Independent reference implementations used by the test suite.

Nothing here imports the package under test.  Bessel values come from a
high-precision power series in mpmath, root finding is plain bisection, and
losses are evaluated with explicit Python loops.
"""
from __future__ import annotations

import math

import mpmath
import numpy as np

mpmath.mp.dps = 40


def log_bessel_series(order, x) -> mpmath.mpf:
    """ln I_order(x) from the ascending series sum_k (x/2)^(2k+order) / (k! Gamma(k+order+1))."""
    order, x = mpmath.mpf(order), mpmath.mpf(x)
    if x == 0:
        return mpmath.mpf(0) if order == 0 else mpmath.mpf("-inf")
    half = x / 2
    term = half ** order / mpmath.gamma(order + 1)
    total = term
    k = 0
    while True:
        k += 1
        term = term * half * half / (k * (k + order))
        total += term
        if term < total * mpmath.mpf(10) ** (-mpmath.mp.dps):
            break
    return mpmath.log(total)


def ratio_A(C: int, kappa) -> mpmath.mpf:
    """A_C(kappa) = I_{C/2}(kappa) / I_{C/2-1}(kappa) from mpmath's own Bessel routine."""
    kappa = mpmath.mpf(kappa)
    return mpmath.besseli(mpmath.mpf(C) / 2, kappa) / mpmath.besseli(mpmath.mpf(C) / 2 - 1, kappa)


def bisect_kappa(C: int, rbar: float, tol: float = 1e-10) -> float:
    """Root of A_C(kappa) = rbar by bisection (A_C is increasing from 0 to 1)."""
    lo, hi = 0.0, 1.0
    while ratio_A(C, hi) < rbar:
        hi *= 2.0
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if ratio_A(C, mid) < rbar:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def log_norm_const_c3(kappa: float) -> float:
    """ln(kappa / (4 pi sinh kappa)), the closed form for the 2-sphere."""
    k = mpmath.mpf(kappa)
    if k == 0:
        return float(mpmath.log(1 / (4 * mpmath.pi)))
    return float(mpmath.log(k / (4 * mpmath.pi * mpmath.sinh(k))))


def log_norm_const_mp(C: int, kappa: float) -> float:
    """ln K_C(kappa) = (C/2-1) ln kappa - (C/2) ln(2 pi) - ln I_{C/2-1}(kappa)."""
    v = mpmath.mpf(C) / 2 - 1
    k = mpmath.mpf(kappa)
    return float(v * mpmath.log(k) - (mpmath.mpf(C) / 2) * mpmath.log(2 * mpmath.pi)
                 - log_bessel_series(v, k))


def ppnce_brute(f3d, f2d, tau) -> float:
    M = len(f3d)
    total = 0.0
    for i in range(M):
        s = [sum(a * b for a, b in zip(f3d[i], f2d[j])) / tau for j in range(M)]
        total -= s[i] - math.log(sum(math.exp(v) for v in s))
    return total / M


def sup_brute(g3d, g2d, labels, tau) -> float:
    M = len(g3d)
    total = 0.0
    for i in range(M):
        e = [math.exp(sum(a * b for a, b in zip(g3d[i], g2d[j])) / tau) for j in range(M)]
        pos = [e[a] for a in range(M) if labels[a] == labels[i]]
        total -= math.log(sum(pos) / len(pos) / sum(e))
    return total / M


def kde_brute(query: float, distances, h: float) -> float:
    s = 0.0
    for d in distances:
        u = (query - d) / h
        s += math.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    return s / (len(distances) * h)


def dcas_brute(distances, labels, h: float) -> list[float]:
    raw = []
    for d, k in zip(distances, labels):
        count = sum(1 for other in labels if other == k)
        raw.append(1.0 / (kde_brute(d, distances, h) * count))
    total = sum(raw)
    return [r / total for r in raw]


def central_diff(fun, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``fun`` at ``x`` by central differences, element by element."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = fun(x)
        flat[i] = old - step
        down = fun(x)
        flat[i] = old
        g[i] = (up - down) / (2.0 * step)
    return grad


def rel_error(analytic, numeric) -> float:
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def random_unit_rows(rng: np.random.Generator, m: int, c: int) -> np.ndarray:
    x = rng.standard_normal((m, c))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def chi2_ppf_99(dof: int) -> float:
    """99th percentile of chi-square(dof) by bisection on mpmath's regularized gamma."""
    lo, hi = 0.0, 10.0 * dof + 100.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mpmath.gammainc(dof / 2.0, 0, mid / 2.0, regularized=True) < 0.99:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
