"""Allocation procedures (CR, RR, PSR, D_A-BCD) and imbalance measures.

Every procedure sees only the covariate matrix, never responses.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import _kernels
from .errors import InputError, RerandomizationBudgetError, SingularCovarianceError

log = logging.getLogger(__name__)

Kind = Literal["CR", "RR", "PSR", "DABCD"]
KINDS = ("CR", "RR", "PSR", "DABCD")
COV_RTOL = 1e-12


@dataclass(frozen=True)
class Assignment:
    T: np.ndarray
    n1: int
    n2: int
    info: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_vector(cls, T, **info) -> "Assignment":
        t = np.array(T, dtype=np.int8).reshape(-1)
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("assignments must be 0/1")
        t.setflags(write=False)
        n1 = int(t.sum())
        return cls(t, n1, t.shape[0] - n1, dict(info))

    @property
    def n(self) -> int:
        return self.n1 + self.n2


@dataclass(frozen=True)
class ImbalanceReport:
    raw: np.ndarray
    scaled: np.ndarray
    mahalanobis: float


@dataclass(frozen=True)
class ProcedureConfig:
    kind: Kind = "CR"
    rr_threshold: float = 3.0
    rr_max_attempts: int = 100_000
    psr_rho: float = 0.75
    dabcd_burn_in: int | None = None  # None -> number of covariates + 2

    def __post_init__(self):
        kind = str(self.kind).upper().replace("-", "").replace("_", "")
        if kind == "DABCD" or kind == "DA":
            kind = "DABCD"
        if kind not in KINDS:
            raise InputError(f"unknown procedure {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if not self.rr_threshold > 0:
            raise InputError("rerandomization threshold a must be positive")
        if self.rr_max_attempts < 1:
            raise InputError("rr_max_attempts must be positive")
        if not 0.5 < self.psr_rho < 1.0:
            raise InputError("PSR rho must lie in (0.5, 1)")
        if self.dabcd_burn_in is not None and self.dabcd_burn_in < 1:
            raise InputError("D_A-BCD burn-in must be positive")

    @property
    def label(self) -> str:
        if self.kind == "RR":
            return f"RR(a={self.rr_threshold:g})"
        return self.kind

    def burn_in(self, n_covariates: int) -> int:
        if self.dabcd_burn_in is None:
            return n_covariates + 2
        if self.dabcd_burn_in < n_covariates + 2:
            raise InputError(
                f"D_A-BCD burn-in must be at least {n_covariates + 2} for {n_covariates} covariates")
        return self.dabcd_burn_in


def _t(T) -> np.ndarray:
    return np.asarray(getattr(T, "T", T))


def imbalance_vector(X, T) -> np.ndarray:
    """sum_i (2 T_i - 1) x_i, unscaled."""
    X = np.asarray(X, dtype=float)
    t = _t(T)
    if X.ndim == 1:
        X = X[:, None]
    if t.shape[0] != X.shape[0]:
        raise ValueError(f"assignment has length {t.shape[0]}, X has {X.shape[0]} rows")
    return (2.0 * t - 1.0) @ X


class _MahalanobisForm:
    """Precomputed inverse sample covariance of X for repeated evaluation."""

    def __init__(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.X = X
        self.col_sums = X.sum(axis=0)
        k = X.shape[1]
        if k == 0:
            self.inv = np.zeros((0, 0))
            return
        if X.shape[0] < 2:
            raise SingularCovarianceError("need at least two units for a sample covariance")
        S = np.atleast_2d(np.cov(X, rowvar=False))
        evals, evecs = np.linalg.eigh(S)
        if evals[-1] <= 0 or evals[0] < COV_RTOL * evals[-1]:
            raise SingularCovarianceError("sample covariance of the covariates is singular")
        self.inv = (evecs / evals) @ evecs.T

    def __call__(self, t: np.ndarray) -> float:
        n1 = int(t.sum())
        n2 = t.shape[0] - n1
        if n1 == 0 or n2 == 0:
            raise ValueError("both arms must be non-empty")
        s1 = t.astype(float) @ self.X
        diff = s1 / n1 - (self.col_sums - s1) / n2
        return float(diff @ self.inv @ diff) / (1.0 / n1 + 1.0 / n2)


def mahalanobis(X, T) -> float:
    """Mahalanobis distance between arm means, standardized by (1/n1 + 1/n2) S_X."""
    return _MahalanobisForm(X)(_t(T))


def imbalance_report(X, T) -> ImbalanceReport:
    raw = imbalance_vector(X, T)
    n = _t(T).shape[0]
    return ImbalanceReport(raw, raw / np.sqrt(n), mahalanobis(X, T))


def complete_randomization(n: int, stream: np.random.Generator) -> Assignment:
    if n < 2:
        raise InputError("complete randomization needs n >= 2")
    while True:
        t = stream.integers(0, 2, size=n, dtype=np.int8)
        s = int(t.sum())
        if 0 < s < n:
            return Assignment.from_vector(t)


def rerandomize(X, config: ProcedureConfig, stream: np.random.Generator) -> tuple[Assignment, int]:
    """Draw complete randomizations until M < a; returns (assignment, attempts)."""
    a = config.rr_threshold
    form = _MahalanobisForm(X)
    n = form.X.shape[0]
    for attempt in range(1, config.rr_max_attempts + 1):
        cand = complete_randomization(n, stream)
        m = form(cand.T)
        if m < a:
            return Assignment.from_vector(cand.T, attempts=attempt, mahalanobis=m), attempt
    raise RerandomizationBudgetError(config.rr_max_attempts, a)


def psr_allocate(X, config: ProcedureConfig, stream: np.random.Generator) -> Assignment:
    form = _MahalanobisForm(X)
    n = form.X.shape[0]
    if n < 2:
        raise InputError("PSR needs n >= 2")
    order = stream.permutation(n)
    uniforms = stream.random(n // 2 + 1)
    Xp = np.ascontiguousarray(form.X[order])
    t_ordered = _kernels.psr_kernel(Xp, np.ascontiguousarray(form.inv), uniforms, float(config.psr_rho))
    t = np.empty(n, dtype=np.int8)
    t[order] = t_ordered
    return Assignment.from_vector(t)


def da_bcd_allocate(X, config: ProcedureConfig, stream: np.random.Generator) -> Assignment:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    X = np.ascontiguousarray(X)
    n, k = X.shape
    burn_in = config.burn_in(k)
    if n <= burn_in:
        raise InputError(f"D_A-BCD needs more than {burn_in} units, got {n}")
    uniforms = stream.random(n)
    t, n_fallback = _kernels.dabcd_kernel(X, uniforms, burn_in)
    if n_fallback:
        log.warning("D_A-BCD: %d units fell back to a fair coin (singular F'F)", n_fallback)
    return Assignment.from_vector(t, fallback_units=int(n_fallback))


def allocate(X, config: ProcedureConfig, stream: np.random.Generator) -> Assignment:
    """Dispatch to the configured procedure; RR attempts land in ``info``."""
    if config.kind == "CR":
        return complete_randomization(len(X), stream)
    if config.kind == "RR":
        assignment, _ = rerandomize(X, config, stream)
        return assignment
    if config.kind == "PSR":
        return psr_allocate(X, config, stream)
    return da_bcd_allocate(X, config, stream)


def dabcd_probability(q: float) -> float:
    """Allocation probability of the next unit given q = (1; x)' (F'F)^-1 b."""
    lo = (1.0 - q) ** 2
    hi = (1.0 + q) ** 2
    return lo / (lo + hi)
