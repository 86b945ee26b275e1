"""Asymptotic null laws of the treatment statistic and corrected tests.

Under a covariate-adjusted design the treatment statistic converges to
``lambda1 * Z + lambda2 * beta_ex' xi_ex`` where ``xi_ex`` is the limit of the
scaled imbalance of the covariates left out of the working model.  The four
supported designs give

    CR     xi_ex ~ N(0, Sigma_ex)
    DABCD  xi_ex ~ N(0, Sigma_ex / 5)
    PSR    xi_ex = 0
    RR     xi_ex = last q coordinates of Sigma^(1/2) D,  D ~ N(0, I) | D'D < a
"""
from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import seeding
from .errors import NumericalError, TruncationBudgetError
from .model import Dataset, DGPSpec, WorkingModelSpec, build_design, ols_fit
from .randomizers import ProcedureConfig
from .special import chi2_cdf, v_a

DEFAULT_DRAWS = 200_000
BLOCK = 1 << 16
MIN_ACCEPTANCE = 1e-6


@dataclass(frozen=True)
class NuisanceParams:
    lambda1: float
    lambda2: float
    beta_ex: np.ndarray
    var_ex: np.ndarray
    sigma_eps2: float
    dim: int  # number of covariates seen by the randomizer (p + q)

    @classmethod
    def from_components(cls, beta_ex, var_ex, sigma_eps2: float, dim: int) -> "NuisanceParams":
        beta_ex = np.asarray(beta_ex, dtype=float).reshape(-1)
        var_ex = np.asarray(var_ex, dtype=float).reshape(-1)
        if beta_ex.shape != var_ex.shape:
            raise ValueError("beta_ex and var_ex must have the same length")
        if np.any(var_ex <= 0):
            raise ValueError("excluded covariate variances must be positive")
        if sigma_eps2 < 0:
            raise ValueError("sigma_eps2 must be non-negative")
        if dim < beta_ex.shape[0]:
            raise ValueError("dim must count every covariate, excluded ones included")
        sigma_w2 = sigma_eps2 + float(np.sum(beta_ex**2 * var_ex))
        if not sigma_w2 > 0:
            raise NumericalError("working-model error variance is zero; the null law is undefined")
        sigma_w = math.sqrt(sigma_w2)
        return cls(math.sqrt(sigma_eps2) / sigma_w, 1.0 / sigma_w, beta_ex, var_ex,
                   float(sigma_eps2), int(dim))

    @property
    def q(self) -> int:
        return self.beta_ex.shape[0]

    @property
    def covariate_signal(self) -> float:
        """sum_j beta_ex_j^2 Var(X_ex_j)."""
        return float(np.sum(self.beta_ex**2 * self.var_ex))

    @property
    def sigma_w2(self) -> float:
        return self.sigma_eps2 + self.covariate_signal


# -- imbalance limits ----------------------------------------------------------


@dataclass(frozen=True)
class Degenerate:
    family = "degenerate"

    def shrinkage(self) -> float:
        return 0.0


@dataclass(frozen=True)
class Gaussian:
    factor: float = 1.0
    family = "gaussian"

    def shrinkage(self) -> float:
        return self.factor


@dataclass(frozen=True)
class TruncatedGaussian:
    dim: int
    threshold: float
    family = "truncated-gaussian"

    def shrinkage(self) -> float:
        return v_a(self.dim, self.threshold)


@dataclass(frozen=True)
class NullLaw:
    lambda1: float
    lambda2: float
    beta_ex: np.ndarray
    var_ex: np.ndarray
    xi_ex_law: Degenerate | Gaussian | TruncatedGaussian
    shift: float = 0.0
    procedure: str = ""

    @property
    def covariate_signal(self) -> float:
        return float(np.sum(self.beta_ex**2 * self.var_ex))

    @property
    def variance(self) -> float:
        signal = self.covariate_signal
        if signal == 0.0:
            return self.lambda1**2
        return self.lambda1**2 + self.lambda2**2 * self.xi_ex_law.shrinkage() * signal

    @property
    def is_normal(self) -> bool:
        # the truncated mixture is normal only when no excluded covariate carries signal
        return not isinstance(self.xi_ex_law, TruncatedGaussian) or self.covariate_signal == 0.0

    @property
    def family(self) -> str:
        return "normal" if self.is_normal else "normal + truncated-gaussian mixture"

    def with_delta(self, delta: float) -> "NullLaw":
        """Law under the local alternative mu1 - mu2 = delta / sqrt(n)."""
        return replace(self, shift=0.5 * self.lambda2 * delta)

    def centered(self) -> "NullLaw":
        return replace(self, shift=0.0) if self.shift else self

    def _weights(self) -> np.ndarray:
        return self.beta_ex * np.sqrt(self.var_ex)

    def sample(self, count: int, stream: np.random.Generator) -> np.ndarray:
        z = stream.standard_normal(count)
        out = self.lambda1 * z + self.shift
        if isinstance(self.xi_ex_law, TruncatedGaussian) and self.covariate_signal > 0:
            d = sample_truncated(self.xi_ex_law.dim, self.xi_ex_law.threshold, count, stream)
            out = out + self.lambda2 * (d[:, d.shape[1] - len(self.beta_ex):] @ self._weights())
        elif not isinstance(self.xi_ex_law, Degenerate) and self.covariate_signal > 0:
            sd = math.sqrt(self.xi_ex_law.shrinkage() * self.covariate_signal)
            out = out + self.lambda2 * sd * stream.standard_normal(count)
        return out

    def draws(self, count: int, seed: int, executor: Executor | None = None) -> np.ndarray:
        """``count`` draws built from fixed-size blocks with derived seeds.

        Block k always uses seed ``derive_rep_seed(seed, k)``, and blocks are
        concatenated in index order, so the result does not depend on how the
        blocks are spread across workers.
        """
        sizes = [min(BLOCK, count - start) for start in range(0, count, BLOCK)]
        seeds = [seeding.derive_rep_seed(seed, k) for k in range(len(sizes))]
        if executor is None:
            parts = [_law_block(self, s, m) for s, m in zip(seeds, sizes)]
        else:
            parts = list(executor.map(_law_block, [self] * len(sizes), seeds, sizes))
        return np.concatenate(parts) if parts else np.empty(0)

    def cdf(self, x):
        if not self.is_normal:
            raise ValueError("closed-form CDF only exists for normal laws; use mc_cdf")
        sd = math.sqrt(self.variance)
        if sd == 0:
            return (np.asarray(x) >= self.shift).astype(float)
        return stats.norm.cdf((np.asarray(x) - self.shift) / sd)

    def mc_cdf(self, draws: int = DEFAULT_DRAWS, stream: np.random.Generator | None = None,
               smooth: bool = True):
        """Monte Carlo CDF; with lambda1 > 0 the normal component is integrated exactly."""
        if self.is_normal:
            return self.cdf
        stream = stream or np.random.default_rng(0)
        if smooth and self.lambda1 > 0:
            mix = replace(self, lambda1=0.0).sample(draws, stream)
            lam = self.lambda1

            def cdf(x):
                x = np.asarray(x, dtype=float)
                flat = np.array([stats.norm.cdf((v - mix) / lam).mean() for v in x.reshape(-1)])
                return flat.reshape(x.shape) if x.ndim else float(flat[0])

            return cdf
        sample = np.sort(self.sample(draws, stream))

        def ecdf(x):
            return np.searchsorted(sample, x, side="right") / sample.shape[0]

        return ecdf

    def pdf(self, x, draws: int = 100_000, stream: np.random.Generator | None = None):
        x = np.asarray(x, dtype=float)
        if self.is_normal:
            sd = math.sqrt(self.variance)
            return stats.norm.pdf((x - self.shift) / sd) / sd
        if self.lambda1 <= 0:
            raise ValueError("density of the pure truncated component is not tabulated")
        mix = replace(self, lambda1=0.0).sample(draws, stream or np.random.default_rng(0))
        lam = self.lambda1
        return np.array([stats.norm.pdf((v - mix) / lam).mean() / lam for v in x.reshape(-1)]).reshape(x.shape)


def _law_block(law: NullLaw, seed: int, count: int) -> np.ndarray:
    return law.sample(count, seeding.stream(seed, seeding.EXTRA))


@dataclass(frozen=True)
class CriticalValue:
    value: float
    alpha: float
    method: str
    draws: int = 0


# -- operations ----------------------------------------------------------------


def rr_factor(dim: int, a: float) -> float:
    return v_a(dim, a)


def nuisance_from_dgp(dgp: DGPSpec, w: WorkingModelSpec) -> NuisanceParams:
    """True nuisance parameters of a working model (for oracle criticals)."""
    ex = list(w.excluded(dgp.n_covariates))
    return NuisanceParams.from_components(dgp.beta[ex], dgp.covariate_sds[ex] ** 2,
                                          dgp.sigma_eps**2, dgp.n_covariates)


def estimate_nuisance(data: Dataset, T, w: WorkingModelSpec) -> NuisanceParams:
    """Plug-in nuisance estimates from an OLS fit of the full covariate model."""
    if data.y is None:
        raise ValueError("nuisance estimation needs responses")
    K = data.n_covariates
    ex = list(w.excluded(K))
    full = ols_fit(build_design(data, T, WorkingModelSpec(tuple(range(K)))), data.y)
    beta_ex = full.theta_hat[2:][ex]
    var_ex = data.X[:, ex].var(axis=0, ddof=1) if ex else np.zeros(0)
    return NuisanceParams.from_components(beta_ex, var_ex, full.sigma_w2_hat, K)


def null_law_for(procedure: ProcedureConfig, nu: NuisanceParams) -> NullLaw:
    kind = procedure.kind
    if kind == "CR":
        xi = Gaussian(1.0)
    elif kind == "DABCD":
        xi = Gaussian(0.2)
    elif kind == "PSR":
        xi = Degenerate()
    else:
        xi = TruncatedGaussian(nu.dim, procedure.rr_threshold)
    return NullLaw(nu.lambda1, nu.lambda2, nu.beta_ex, nu.var_ex, xi, procedure=procedure.label)


def sample_truncated(dim: int, a: float, count: int, stream: np.random.Generator,
                     max_draws: int = 2_000_000_000) -> np.ndarray:
    """``count`` rejection-sampled draws of D ~ N(0, I_dim) conditioned on D'D < a."""
    if dim < 1 or not a > 0:
        raise ValueError("need dim >= 1 and a > 0")
    p = chi2_cdf(a, dim)
    if p < MIN_ACCEPTANCE:
        raise TruncationBudgetError(f"P(chi2_{dim} < {a:g}) = {p:.3g} is below {MIN_ACCEPTANCE:g}")
    out = np.empty((count, dim))
    filled = 0
    used = 0
    while filled < count:
        need = count - filled
        batch = min(int(need / p * 1.1) + 64, 1 << 20)
        used += batch
        if used > max_draws:
            raise TruncationBudgetError(f"exceeded {max_draws} candidate draws")
        D = stream.standard_normal((batch, dim))
        keep = D[np.einsum("ij,ij->i", D, D) < a]
        take = min(keep.shape[0], need)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out


def _seed_from(stream: np.random.Generator | None, seed: int | None) -> int:
    if seed is not None:
        return int(seed)
    stream = stream or np.random.default_rng(0)
    return int(stream.integers(0, 1 << 63))


def corrected_critical(law: NullLaw, alpha: float = 0.05, draws: int = DEFAULT_DRAWS,
                       stream: np.random.Generator | None = None, *, seed: int | None = None,
                       executor: Executor | None = None) -> CriticalValue:
    """Two-sided critical value s with P(|S| > s) = alpha under the (centered) law."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    law = law.centered()
    if law.is_normal:
        value = math.sqrt(law.variance) * float(stats.norm.ppf(1 - alpha / 2))
        if not value > 0:
            raise NumericalError("null law is degenerate at zero")
        return CriticalValue(value, alpha, "analytic-normal", 0)
    if draws < 100_000:
        raise ValueError("Monte Carlo critical values need at least 1e5 draws")
    sample = np.abs(law.draws(draws, _seed_from(stream, seed), executor))
    return CriticalValue(float(np.quantile(sample, 1 - alpha)), alpha, "monte-carlo", draws)


def corrected_p_value(law: NullLaw, s_observed: float, draws: int = DEFAULT_DRAWS,
                      stream: np.random.Generator | None = None, *, seed: int | None = None,
                      executor: Executor | None = None) -> float:
    """P(|S| >= |s_observed|) under the law; (k+1)/(B+1) when simulated."""
    law = law.centered()
    s = abs(float(s_observed))
    if law.is_normal:
        sd = math.sqrt(law.variance)
        if sd == 0:
            return 1.0 if s == 0 else 0.0
        return float(min(1.0, 2 * stats.norm.sf(s / sd)))
    sample = np.abs(law.draws(draws, _seed_from(stream, seed), executor))
    k = int(np.count_nonzero(sample >= s))
    return (k + 1) / (draws + 1)


@dataclass
class TruncatedCache:
    """Shared Z and truncated D draws, re-weighted per replication in batch runs."""

    z: np.ndarray
    d: np.ndarray
    dim: int
    threshold: float
    abs_work: np.ndarray = field(init=False, repr=False)

    @classmethod
    def build(cls, dim: int, a: float, draws: int, seed: int) -> "TruncatedCache":
        rng = seeding.stream(seed, seeding.EXTRA)
        z = rng.standard_normal(draws)
        d = sample_truncated(dim, a, draws, rng)
        return cls(z, d, dim, a)

    def __post_init__(self):
        self.abs_work = np.empty_like(self.z)

    def critical(self, nu: NuisanceParams, alpha: float) -> float:
        if nu.q == 0 or nu.covariate_signal == 0:
            return nu.lambda1 * float(stats.norm.ppf(1 - alpha / 2))
        w = nu.beta_ex * np.sqrt(nu.var_ex)
        s = self.abs_work
        np.dot(self.d[:, self.dim - nu.q:], w, out=s)
        s *= nu.lambda2
        s += nu.lambda1 * self.z
        np.abs(s, out=s)
        return float(np.quantile(s, 1 - alpha))
