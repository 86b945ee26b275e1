"""Data-generating process, working-model design matrix and OLS."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, SingularDesignError

RANK_RTOL = 1e-10


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DGPSpec:
    """Linear outcome model with independent mean-zero Gaussian covariates."""

    mu1: float
    mu2: float
    beta: np.ndarray
    covariate_sds: np.ndarray
    sigma_eps: float
    n: int

    def __post_init__(self):
        beta = _frozen(self.beta).reshape(-1)
        sds = _frozen(self.covariate_sds).reshape(-1)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "covariate_sds", sds)
        if beta.shape != sds.shape:
            raise ValueError("beta and covariate_sds must have the same length")
        if np.any(sds <= 0) or not np.all(np.isfinite(sds)):
            raise ValueError("covariate standard deviations must be positive and finite")
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        # sigma_eps == 0 is allowed: noiseless designs are a useful limit case
        if not (self.sigma_eps >= 0 and math.isfinite(self.sigma_eps)):
            raise ValueError("sigma_eps must be non-negative")
        if int(self.n) != self.n or self.n < 4:
            raise ValueError("n must be an integer >= 4")
        object.__setattr__(self, "n", int(self.n))

    @property
    def n_covariates(self) -> int:
        return self.beta.shape[0]

    def with_effects(self, mu1: float | None = None, mu2: float | None = None,
                     beta: Sequence[float] | None = None) -> "DGPSpec":
        return DGPSpec(
            mu1=self.mu1 if mu1 is None else mu1,
            mu2=self.mu2 if mu2 is None else mu2,
            beta=self.beta if beta is None else beta,
            covariate_sds=self.covariate_sds,
            sigma_eps=self.sigma_eps,
            n=self.n,
        )


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        X = _frozen(self.X)
        if X.ndim == 1:
            X = _frozen(X.reshape(-1, 1))
        if X.ndim != 2:
            raise ValueError("X must be a 2-d matrix")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite entries")
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = _frozen(self.y).reshape(-1)
            if y.shape[0] != X.shape[0]:
                raise ValueError(f"y has {y.shape[0]} entries, X has {X.shape[0]} rows")
            if not np.all(np.isfinite(y)):
                raise ValueError("y contains non-finite entries")
            object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class WorkingModelSpec:
    """Ordered column indices of the covariates kept in the working model."""

    included: tuple[int, ...] = ()
    name: str = ""

    def __post_init__(self):
        included = tuple(int(i) for i in self.included)
        if len(set(included)) != len(included):
            raise ValueError(f"duplicate covariate index in {included}")
        if any(i < 0 for i in included):
            raise ValueError("covariate indices must be non-negative")
        object.__setattr__(self, "included", included)

    @property
    def p(self) -> int:
        return len(self.included)

    def excluded(self, n_covariates: int) -> tuple[int, ...]:
        self.check(n_covariates)
        keep = set(self.included)
        return tuple(j for j in range(n_covariates) if j not in keep)

    def check(self, n_covariates: int) -> None:
        bad = [i for i in self.included if i >= n_covariates]
        if bad:
            raise IndexError(f"covariate index {bad[0]} out of bounds for {n_covariates} covariates")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if not self.included:
            return "none"
        return "+".join(f"x{i + 1}" for i in self.included)


@dataclass(frozen=True)
class DesignMatrix:
    G: np.ndarray

    @property
    def p(self) -> int:
        return self.G.shape[1] - 2

    def contrast(self) -> np.ndarray:
        """L = (1, -1, 0, ..., 0)."""
        L = np.zeros(self.G.shape[1])
        L[0], L[1] = 1.0, -1.0
        return L


@dataclass(frozen=True)
class FitResult:
    theta_hat: np.ndarray
    sigma_w2_hat: float
    gram_inv: np.ndarray
    dof: int

    @property
    def p(self) -> int:
        return self.theta_hat.shape[0] - 2


def generate_covariates(spec: DGPSpec, stream: np.random.Generator) -> Dataset:
    X = stream.standard_normal((spec.n, spec.n_covariates)) * spec.covariate_sds
    return Dataset(X)


def _treatment_vector(T, n: int) -> np.ndarray:
    t = np.asarray(getattr(T, "T", T), dtype=float).reshape(-1)
    if t.shape[0] != n:
        raise ValueError(f"assignment has length {t.shape[0]}, data has {n} units")
    return t


def mean_response(data: Dataset, T, spec: DGPSpec) -> np.ndarray:
    t = _treatment_vector(T, data.n)
    if data.n_covariates != spec.n_covariates:
        raise ValueError(f"data has {data.n_covariates} covariates, DGP has {spec.n_covariates}")
    return spec.mu1 * t + spec.mu2 * (1.0 - t) + data.X @ spec.beta


def realize_responses(data: Dataset, T, spec: DGPSpec, stream: np.random.Generator) -> Dataset:
    if data.y is not None:
        raise ValueError("dataset already has responses")
    mean = mean_response(data, T, spec)
    eps = stream.normal(0.0, 1.0, data.n) * spec.sigma_eps
    return Dataset(data.X, mean + eps)


def build_design(data: Dataset, T, w: WorkingModelSpec) -> DesignMatrix:
    t = _treatment_vector(T, data.n)
    w.check(data.n_covariates)
    cols = [t[:, None], 1.0 - t[:, None]]
    if w.included:
        cols.append(data.X[:, list(w.included)])
    return DesignMatrix(_frozen(np.hstack(cols)))


def ols_fit(G: DesignMatrix | np.ndarray, y: np.ndarray) -> FitResult:
    """OLS through a thin SVD; singular if s_min < 1e-10 * s_max."""
    G = np.asarray(getattr(G, "G", G), dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, k = G.shape
    if y.shape[0] != n:
        raise ValueError(f"y has {y.shape[0]} entries, design has {n} rows")
    if n <= k:
        raise SingularDesignError(f"need more than {k} units to fit {k} parameters, got {n}")
    U, s, Vt = np.linalg.svd(G, full_matrices=False)
    if s[-1] < RANK_RTOL * s[0]:
        raise SingularDesignError(
            f"design matrix is rank deficient (singular value ratio {s[-1] / s[0]:.3g})")
    theta = Vt.T @ ((U.T @ y) / s)
    resid = y - G @ theta
    rss = float(resid @ resid)
    # residuals at rounding level mean y lies in the column space
    if rss <= (64 * np.finfo(float).eps) ** 2 * float(y @ y):
        rss = 0.0
    dof = n - k
    gram_inv = (Vt.T / s**2) @ Vt
    gram_inv = 0.5 * (gram_inv + gram_inv.T)
    return FitResult(_frozen(theta), rss / dof, _frozen(gram_inv), dof)


# -- Dataset CSV ---------------------------------------------------------------


@dataclass
class CsvTable:
    data: Dataset
    names: list[str]
    t: np.ndarray | None = field(default=None)


def read_dataset_csv(path: str | Path) -> CsvTable:
    """Read ``x1,...,xK[,y][,t]``; raises InputError naming the offending line."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        xs = [h for h in header if h.startswith("x")]
        expected = [f"x{j + 1}" for j in range(len(xs))]
        if header[: len(xs)] != expected:
            raise InputError(f"{path}:1: covariate columns must be named x1..xK in order, got {header}")
        extras = header[len(xs):]
        if any(e not in ("y", "t") for e in extras) or len(set(extras)) != len(extras):
            raise InputError(f"{path}:1: unexpected columns {extras}; allowed trailing columns are y, t")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise InputError(f"{path}:{line_no}: non-numeric field in {row}") from None
            if not all(math.isfinite(v) for v in vals):
                raise InputError(f"{path}:{line_no}: non-finite value")
            if "t" in extras and vals[header.index("t")] not in (0.0, 1.0):
                raise InputError(f"{path}:{line_no}: t must be 0 or 1")
            rows.append(vals)
    if not rows:
        raise InputError(f"{path}: no data rows")
    M = np.array(rows, dtype=float)
    X = M[:, : len(xs)]
    y = M[:, header.index("y")] if "y" in extras else None
    t = M[:, header.index("t")].astype(np.int8) if "t" in extras else None
    return CsvTable(Dataset(X, y), header, t)


def write_dataset_csv(path: str | Path, data: Dataset, t=None) -> None:
    header = [f"x{j + 1}" for j in range(data.n_covariates)]
    cols = [data.X]
    if data.y is not None:
        header.append("y")
        cols.append(data.y[:, None])
    if t is not None:
        header.append("t")
        cols.append(np.asarray(getattr(t, "T", t), dtype=float)[:, None])
    M = np.hstack(cols)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in M:
            w.writerow([repr(float(v)) if h != "t" else str(int(v)) for h, v in zip(header, row)])
