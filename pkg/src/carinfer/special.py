"""Regularized lower incomplete gamma function and the rerandomization factor.

Series expansion below ``c = b + 1``, Lentz continued fraction for the upper
function above it.  Both are summed to a relative term tolerance of 1e-14.
"""
from __future__ import annotations

import math

_TOL = 1e-14
_TINY = 1e-300
_MAX_ITER = 10_000


def _log_series(b: float, c: float) -> float:
    # log P(b, c) = b log c - c - lgamma(b + 1) + log(sum_k c^k / ((b+1)...(b+k)))
    term = 1.0
    total = 1.0
    denom = b
    for _ in range(_MAX_ITER):
        denom += 1.0
        term *= c / denom
        total += term
        if term < total * _TOL:
            break
    else:
        raise ArithmeticError(f"incomplete gamma series did not converge (b={b}, c={c})")
    return b * math.log(c) - c - math.lgamma(b + 1.0) + math.log(total)


def _upper_fraction(b: float, c: float) -> float:
    # Q(b, c) by the modified Lentz algorithm
    f_b = c + 1.0 - b
    cc = 1.0 / _TINY
    d = 1.0 / f_b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - b)
        f_b += 2.0
        d = an * d + f_b
        if abs(d) < _TINY:
            d = _TINY
        cc = f_b + an / cc
        if abs(cc) < _TINY:
            cc = _TINY
        d = 1.0 / d
        delta = d * cc
        h *= delta
        if abs(delta - 1.0) < _TOL:
            break
    else:
        raise ArithmeticError(f"incomplete gamma fraction did not converge (b={b}, c={c})")
    return math.exp(b * math.log(c) - c - math.lgamma(b)) * h


def log_lower_regularized(b: float, c: float) -> float:
    """log P(b, c), where P(b, c) = gamma(b, c) / Gamma(b)."""
    if b <= 0:
        raise ValueError("shape must be positive")
    if c < 0:
        raise ValueError("argument must be non-negative")
    if c == 0:
        return -math.inf
    if c < b + 1.0:
        return _log_series(b, c)
    return math.log1p(-_upper_fraction(b, c))


def lower_regularized(b: float, c: float) -> float:
    return math.exp(log_lower_regularized(b, c))


def lower_incomplete_gamma(b: float, c: float) -> float:
    """Unregularized gamma(b, c) = integral_0^c y^(b-1) e^(-y) dy."""
    return math.exp(log_lower_regularized(b, c) + math.lgamma(b))


def chi2_cdf(x: float, dof: int) -> float:
    if x <= 0:
        return 0.0
    return lower_regularized(dof / 2.0, x / 2.0)


def v_a(dim: int, a: float) -> float:
    """Variance shrinkage of each imbalance coordinate under rerandomization.

    ``(2/dim) gamma(dim/2 + 1, a/2) / gamma(dim/2, a/2)``, which reduces to
    ``P(dim/2 + 1, a/2) / P(dim/2, a/2)`` for the regularized function.
    """
    if dim < 1:
        raise ValueError("dimension must be at least 1")
    if not a > 0:
        raise ValueError("threshold a must be positive")
    b = dim / 2.0
    c = a / 2.0
    return math.exp(log_lower_regularized(b + 1.0, c) - log_lower_regularized(b, c))
