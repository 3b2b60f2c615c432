"""Standard normal cdf and quantile function without scipy."""

from __future__ import annotations

import math

import numpy as np

# Acklam's rational approximation, |relative error| < 1.2e-9 before refinement.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425

_erfc = np.frompyfunc(math.erfc, 1, 1)


def norm_cdf(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.asarray(0.5 * _erfc(-x / math.sqrt(2.0)), dtype=np.float64)


def _poly(coef, x):
    out = np.zeros_like(x)
    for c in coef:
        out = out * x + c
    return out


def norm_ppf(p) -> np.ndarray:
    """Inverse standard normal cdf; one Halley step brings it to ~1e-15."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1 - _P_LOW
    mid = ~(lo | hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.sqrt(-2 * np.log(np.where(lo, p, 0.5)))
        x = np.where(lo, _poly(_C, q) / (_poly(_D, q) * q + 1), x)
        q = np.sqrt(-2 * np.log(np.where(hi, 1 - p, 0.5)))
        x = np.where(hi, -_poly(_C, q) / (_poly(_D, q) * q + 1), x)
        q = p - 0.5
        r = q * q
        x = np.where(mid, _poly(_A, r) * q / (_poly(_B, r) * r + 1), x)
        interior = (p > 0) & (p < 1)
        e = norm_cdf(np.where(interior, x, 0.0)) - np.where(interior, p, 0.5)
        u = e * math.sqrt(2 * math.pi) * np.exp(np.where(interior, x, 0.0) ** 2 / 2)
        x = np.where(interior, x - u / (1 + np.where(interior, x, 0.0) * u / 2), x)
    x = np.where(p == 0, -np.inf, x)
    x = np.where(p == 1, np.inf, x)
    return x
