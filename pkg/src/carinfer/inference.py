"""Treatment and covariate test statistics under a working model."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DegenerateTestError, InvalidContrastError
from .model import FitResult


@dataclass(frozen=True)
class TreatmentTest:
    s: float
    se: float
    estimate: float


@dataclass(frozen=True)
class CovariateTest:
    s_star: float
    C: np.ndarray
    c0: np.ndarray
    m: int


@dataclass(frozen=True)
class Decision:
    reject: bool
    p_value: float
    critical_value: float
    alpha: float


def treatment_statistic(fit: FitResult) -> TreatmentTest:
    """S = (mu1_hat - mu2_hat) / sqrt(sigma_w2_hat * L'(G'G)^-1 L)."""
    g = fit.gram_inv
    quad = g[0, 0] + g[1, 1] - 2.0 * g[0, 1]
    se2 = fit.sigma_w2_hat * quad
    if not se2 > 0:
        raise DegenerateTestError("zero residual variance; the treatment statistic is undefined")
    se = math.sqrt(se2)
    estimate = float(fit.theta_hat[0] - fit.theta_hat[1])
    return TreatmentTest(estimate / se, se, estimate)


def coefficient_contrast(p: int, index: int) -> np.ndarray:
    """1 x (p+2) contrast picking the ``index``-th included covariate (0-based)."""
    if not 0 <= index < p:
        raise InvalidContrastError(f"covariate position {index} outside a model with {p} covariates")
    C = np.zeros((1, p + 2))
    C[0, index + 2] = 1.0
    return C


def covariate_statistic(fit: FitResult, C, c0=None) -> CovariateTest:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    k = fit.theta_hat.shape[0]
    m = C.shape[0]
    if C.shape[1] != k:
        raise InvalidContrastError(f"contrast has {C.shape[1]} columns, model has {k} parameters")
    if np.any(C[:, :2] != 0):
        raise InvalidContrastError("the first two columns of C must be zero")
    if m > k - 2 or np.linalg.matrix_rank(C) != m:
        raise InvalidContrastError(f"C must have full row rank m <= p (m={m}, p={k - 2})")
    c0 = np.zeros(m) if c0 is None else np.asarray(c0, dtype=float).reshape(-1)
    if c0.shape[0] != m:
        raise InvalidContrastError(f"c0 has {c0.shape[0]} entries, expected {m}")
    if not fit.sigma_w2_hat > 0:
        raise DegenerateTestError("zero residual variance; the covariate statistic is undefined")
    r = C @ fit.theta_hat - c0
    W = C @ fit.gram_inv @ C.T
    try:
        q = float(r @ np.linalg.solve(W, r))
    except np.linalg.LinAlgError as exc:
        raise InvalidContrastError(f"C (G'G)^-1 C' is singular: {exc}") from exc
    return CovariateTest(max(q, 0.0) / (m * fit.sigma_w2_hat), C, c0, m)


def traditional_decision(stat: TreatmentTest | CovariateTest, alpha: float = 0.05) -> Decision:
    """Normal two-sided test for S; upper-tail chi2_m / m test for S*."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if isinstance(stat, TreatmentTest):
        crit = float(stats.norm.ppf(1 - alpha / 2))
        p = float(2 * stats.norm.sf(abs(stat.s)))
        return Decision(abs(stat.s) > crit, min(p, 1.0), crit, alpha)
    crit = float(stats.chi2.ppf(1 - alpha, stat.m) / stat.m)
    p = float(stats.chi2.sf(stat.m * stat.s_star, stat.m))
    return Decision(stat.s_star > crit, p, crit, alpha)


def asymptotic_power(law, delta: float, alpha: float = 0.05, draws: int = 200_000,
                     stream: np.random.Generator | None = None, critical="traditional") -> float:
    """Limit rejection probability under the local alternative mu1 - mu2 = delta / sqrt(n).

    ``critical`` is ``"traditional"`` (z quantile), ``"oracle"`` (the law's own
    (1 - alpha/2) quantile) or a number.  The null law's CDF is analytic for
    normal laws and a Monte Carlo estimate for the rerandomization mixture.
    """
    from .laws import corrected_critical

    law = law.centered()
    if critical == "traditional":
        c = float(stats.norm.ppf(1 - alpha / 2))
    elif critical == "oracle":
        c = corrected_critical(law, alpha, draws=draws, stream=stream).value
    else:
        c = float(critical)
    h = 0.5 * law.lambda2 * delta
    if law.is_normal:
        sd = math.sqrt(law.variance)
        return float(stats.norm.cdf((-c + h) / sd) + stats.norm.cdf((-c - h) / sd))
    cdf = law.mc_cdf(draws, stream)
    return float(cdf(-c + h) + cdf(-c - h))
