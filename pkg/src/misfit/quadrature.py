"""Quadrature rules and finite-difference helpers shared by several modules."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import special


@lru_cache(maxsize=32)
def _hermite(n: int):
    x, w = special.roots_hermite(n)
    with np.errstate(divide="ignore"):
        logw = np.log(w) + x * x
    x.setflags(write=False)
    logw.setflags(write=False)
    return x, logw


def hermite_log_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite nodes with log weights including the ``exp(x**2)`` factor.

    With these, ``integral F(z) dz`` over the real line is approximated by
    ``sqrt(2) * s * sum(exp(logw + log F(m + sqrt(2) * s * x)))`` for any
    centring ``m`` and scale ``s``.
    """
    return _hermite(int(n))


@lru_cache(maxsize=32)
def _hermite_norm(n: int):
    x, w = special.roots_hermitenorm(n)
    w = w / w.sum()
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def standard_normal_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and probability weights for expectations over N(0, 1)."""
    return _hermite_norm(int(n))


def gamma_rule(n: int, shape: float, rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized Gauss-Laguerre rule for expectations over Gamma(shape, rate).

    Weights are renormalized to sum to one; nodes with negligible weight are
    dropped.
    """
    t, w = special.roots_genlaguerre(int(n), shape - 1.0)
    w = w / w.sum()
    keep = w > 1e-300
    return t[keep] / rate, w[keep]


# Trapezoid rules in s = log(rate * Y) for Y ~ Gamma(shape, rate). The density
# of s is exp(shape*s - exp(s)) / Gamma(shape), analytic in a strip, so the
# trapezoid rule error decays roughly like exp(-pi**2 / h). The coarse step is
# only modestly larger than the fine one so that their discrepancy is a
# realistic (not grossly pessimistic) error estimate.
FINE_STEP = 0.35
COARSE_STEP = 0.4


def log_gamma_rule(shape: float = 1.0, coarse: bool = False, tail: float = 1e-13):
    """Trapezoid rule in ``s = log(rate * Y)`` for Y ~ Gamma(shape, rate).

    Args:
        shape: gamma shape (1 for exponential).
        coarse: use the coarse step.
        tail: mass neglected in each tail; weights are renormalized.

    Returns:
        ``(exp(s), weights)``; divide the first array by ``rate`` to get Y.
    """
    h = COARSE_STEP if coarse else FINE_STEP
    # log Y narrows as the shape grows; keep the step proportional to its spread
    h *= min(1.0, float(np.sqrt(special.polygamma(1, shape) / special.polygamma(1, 1.0))))
    lo = (np.log(tail) + special.gammaln(shape + 1.0)) / shape
    hi = np.log(shape + 12.0 * np.sqrt(shape) + 40.0)
    s = np.arange(np.floor(lo / h), np.ceil(hi / h) + 1) * h
    logw = shape * s - np.exp(s)
    w = np.exp(logw - logw.max())
    return np.exp(s), w / w.sum()


def central_difference(f, x: float, h: float):
    """Central difference ``(f(x+h) - f(x-h)) / 2h``; f may return arrays."""
    return (np.asarray(f(x + h)) - np.asarray(f(x - h))) / (2.0 * h)


def richardson_difference(f, x: float, h: float):
    """Fourth-order Richardson extrapolation of two central differences."""
    d1 = central_difference(f, x, h)
    d2 = central_difference(f, x, h / 2.0)
    return (4.0 * d2 - d1) / 3.0
