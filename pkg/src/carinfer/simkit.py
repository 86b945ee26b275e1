"""Deterministic Monte Carlo experiments for post-randomization inference.

Each replication draws covariates, allocates with one procedure and draws the
errors from three independent streams derived from ``(master_seed, index)``.
All procedures of an experiment see the same covariates and errors (common
random numbers), and results never depend on the number of workers.

Grid points reuse one fit per replication.  Adding ``delta * T`` to the
outcome only moves the first OLS coefficient by ``delta`` (T is the first
column of the design) and leaves the residuals untouched; likewise adding
``b * x_k`` for an included covariate only moves that coefficient.  The grid
statistics are therefore exact, not approximations.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import stats

from . import __version__, seeding
from .errors import CarInferError, InputError, ReplicationError
from .inference import treatment_statistic
from .laws import (
    DEFAULT_DRAWS,
    TruncatedCache,
    corrected_critical,
    estimate_nuisance,
    null_law_for,
    nuisance_from_dgp,
)
from .model import (
    Dataset,
    DGPSpec,
    WorkingModelSpec,
    build_design,
    generate_covariates,
    ols_fit,
)
from .randomizers import ProcedureConfig, allocate, imbalance_vector, mahalanobis

Mode = Literal["traditional", "oracle-critical", "estimated-critical"]
ORACLE_TAG = 0x0AC1E
CACHE_TAG = 0xCAC4E
REFERENCE_TAG = 0x5EF


# -- configuration ---------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DGPConfig(_Strict):
    mu1: float = 0.0
    mu2: float = 0.0
    beta: list[float]
    covariate_sds: list[float] | None = None
    sigma_eps: float = Field(ge=0)
    n: int = Field(ge=4)

    def to_spec(self) -> DGPSpec:
        sds = self.covariate_sds if self.covariate_sds is not None else [1.0] * len(self.beta)
        return DGPSpec(self.mu1, self.mu2, self.beta, sds, self.sigma_eps, self.n)


class ProcedureEntry(_Strict):
    kind: Literal["CR", "RR", "PSR", "DABCD"]
    a: float = Field(default=3.0, gt=0)
    max_attempts: int = Field(default=100_000, ge=1)
    rho: float = Field(default=0.75, gt=0.5, lt=1.0)
    burn_in: int | None = Field(default=None, ge=1)

    def to_config(self) -> ProcedureConfig:
        return ProcedureConfig(self.kind, self.a, self.max_attempts, self.rho, self.burn_in)


class WorkingModelEntry(_Strict):
    name: str
    included: list[str] = []

    def to_spec(self) -> WorkingModelSpec:
        return WorkingModelSpec(tuple(covariate_index(c) for c in self.included), self.name)


def covariate_index(name: str) -> int:
    if not (name.startswith("x") and name[1:].isdigit() and int(name[1:]) >= 1):
        raise ValueError(f"covariates are named x1, x2, ...; got {name!r}")
    return int(name[1:]) - 1


class ExperimentConfig(_Strict):
    spec_version: Literal[1] = 1
    name: str = "experiment"
    experiment: Literal["rejection", "power_curve", "covariate_effect", "distribution"] = "rejection"
    dgp: DGPConfig
    procedures: list[ProcedureEntry] = Field(min_length=1)
    working_models: list[WorkingModelEntry] = Field(min_length=1)
    replications: int = Field(default=10_000, ge=100)
    alpha: float = Field(default=0.05, gt=0, lt=1)
    master_seed: int = Field(default=20190101, ge=0, le=(1 << 64) - 1)
    mode: Mode = "traditional"
    delta_grid: list[float] | None = None
    beta3_grid: list[float] | None = None
    tested_covariate: str = "x3"
    oracle_source: Literal["asymptotic", "simulated"] = "simulated"
    rr_critical: Literal["cached", "exact"] = "cached"
    critical_draws: int = Field(default=DEFAULT_DRAWS, ge=100_000)
    cache_draws: int = Field(default=50_000, ge=1_000)
    histogram_bins: int = Field(default=60, ge=5)
    notes: list[str] = []

    @field_validator("delta_grid", "beta3_grid")
    @classmethod
    def _sorted_grid(cls, v):
        if v is None:
            return v
        if not v or not all(math.isfinite(x) for x in v):
            raise ValueError("grid must be a non-empty list of finite numbers")
        if list(v) != sorted(v):
            raise ValueError("grid must be sorted ascending")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        K = len(self.dgp.beta)
        if self.dgp.covariate_sds is not None and len(self.dgp.covariate_sds) != K:
            raise ValueError("dgp.covariate_sds must match dgp.beta in length")
        for wm in self.working_models:
            idx = [covariate_index(c) for c in wm.included]
            if any(i >= K for i in idx):
                raise ValueError(f"working model {wm.name} names a covariate beyond x{K}")
            if len(set(idx)) != len(idx):
                raise ValueError(f"working model {wm.name} repeats a covariate")
        if self.experiment == "power_curve" and (self.delta_grid is None or 0.0 not in self.delta_grid):
            raise ValueError("power_curve experiments need a delta_grid containing 0")
        if self.experiment == "covariate_effect":
            if self.beta3_grid is None:
                raise ValueError("covariate_effect experiments need beta3_grid")
            k = covariate_index(self.tested_covariate)
            for wm in self.working_models:
                if self.tested_covariate not in wm.included:
                    raise ValueError(f"working model {wm.name} does not include {self.tested_covariate}")
            if k >= K:
                raise ValueError("tested covariate beyond the DGP's covariates")
        return self

    # convenience
    def dgp_spec(self) -> DGPSpec:
        return self.dgp.to_spec()

    def procedure_configs(self) -> list[ProcedureConfig]:
        return [p.to_config() for p in self.procedures]

    def working_model_specs(self) -> list[WorkingModelSpec]:
        return [w.to_spec() for w in self.working_models]

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    raw = json.loads(Path(path).read_text())
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(raw)


PRESET_DIR = Path(__file__).with_name("presets")


def preset_names() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.json"))


def load_preset(name: str, **overrides) -> ExperimentConfig:
    path = PRESET_DIR / f"{name}.json"
    if not path.exists():
        raise InputError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return load_config(path, **overrides)


# -- results ---------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    rejections: int
    replications: int

    @property
    def rate(self) -> float:
        return self.rejections / self.replications

    @property
    def se(self) -> float:
        r = self.rate
        return math.sqrt(r * (1 - r) / self.replications)


@dataclass
class RejectionTable:
    cells: dict[tuple[str, str, float], Cell]
    metadata: dict = field(default_factory=dict)

    def rate(self, procedure: str, working_model: str, grid_value: float | None = None) -> float:
        return self.cell(procedure, working_model, grid_value).rate

    def cell(self, procedure: str, working_model: str, grid_value: float | None = None) -> Cell:
        if grid_value is None:
            matches = [c for (p, w, _), c in self.cells.items() if p == procedure and w == working_model]
            if len(matches) != 1:
                raise KeyError(f"{len(matches)} grid points for ({procedure}, {working_model})")
            return matches[0]
        return self.cells[(procedure, working_model, float(grid_value))]

    def rows(self) -> list[tuple]:
        return [(p, w, g, c.rate, c.se, c.replications) for (p, w, g), c in self.cells.items()]

    def write_csv(self, path: str | Path) -> None:
        lines = ["procedure,working_model,grid_value,rate,se,reps"]
        for p, w, g, r, se, n in self.rows():
            lines.append(f"{p},{w},{g!r},{r!r},{se!r},{n}")
        Path(path).write_text("\n".join(lines) + "\n")

    def format(self) -> str:
        out = []
        for p, w, g, r, se, n in self.rows():
            out.append(f"{p:>10} {w:>6} {g:>8.4g}  rate={r:.4f}  se={se:.4f}  reps={n}")
        return "\n".join(out)


@dataclass
class TreatmentDraws:
    """Per-replication treatment statistics of one experiment (before any critical)."""

    procedures: list[str]
    working_models: list[str]
    grid: list[float]
    estimate0: np.ndarray          # (P, R, W) estimate at delta = 0
    se: np.ndarray                 # (P, R, W)
    crit_estimated: np.ndarray | None  # (P, R, W)
    crit_oracle: np.ndarray | None     # (P, W)
    attempts: np.ndarray           # (P, R)
    alpha: float

    def statistics(self, delta: float) -> np.ndarray:
        return (self.estimate0 + delta) / self.se

    def tabulate(self, mode: Mode) -> RejectionTable:
        P, R, W = self.se.shape
        if mode == "traditional":
            crit = np.full((P, R, W), stats.norm.ppf(1 - self.alpha / 2))
        elif mode == "estimated-critical":
            if self.crit_estimated is None:
                raise ValueError("estimated criticals were not computed for this run")
            crit = self.crit_estimated
        else:
            if self.crit_oracle is None:
                raise ValueError("oracle criticals were not computed for this run")
            crit = np.broadcast_to(self.crit_oracle[:, None, :], (P, R, W))
        cells = {}
        for g in self.grid:
            rej = np.abs(self.statistics(g)) > crit
            counts = rej.sum(axis=1)
            for i, p in enumerate(self.procedures):
                for j, w in enumerate(self.working_models):
                    cells[(p, w, float(g))] = Cell(int(counts[i, j]), R)
        return RejectionTable(cells, {"mode": mode})

    def null_quantile(self) -> np.ndarray:
        """Empirical (1 - alpha) quantile of |S| at delta = 0, per (procedure, model)."""
        return np.quantile(np.abs(self.statistics(0.0)), 1 - self.alpha, axis=1)


# -- workers -----------------------------------------------------------------------


def _make_executor(workers: int | None):
    workers = workers or os.cpu_count() or 1
    return ProcessPoolExecutor(workers) if workers > 1 else None, workers


def _chunks(n: int, workers: int) -> list[tuple[int, int]]:
    if workers <= 1:
        return [(0, n)]
    size = max(1, math.ceil(n / (workers * 4)))
    return [(s, min(n, s + size)) for s in range(0, n, size)]


def _map(fn, tasks, executor):
    if executor is None:
        return [fn(*t) for t in tasks]
    return list(executor.map(fn, *zip(*tasks)))


@lru_cache(maxsize=8)
def _cache(dim: int, a: float, draws: int, seed: int) -> TruncatedCache:
    return TruncatedCache.build(dim, a, draws, seed)


def _replicate(dgp: DGPSpec, proc: ProcedureConfig, master_seed: int, index: int):
    cov_rng, alloc_rng, err_rng = seeding.replication_streams(master_seed, index)
    data = generate_covariates(dgp, cov_rng)
    try:
        assignment = allocate(data.X, proc, alloc_rng)
    except CarInferError as exc:
        raise ReplicationError(index, proc.label, exc) from exc
    eps = err_rng.standard_normal(dgp.n) * dgp.sigma_eps
    return data, assignment, eps


def _treatment_chunk(cfg_json: str, p_idx: int, start: int, stop: int, want_estimated: bool):
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    dgp = cfg.dgp_spec()
    proc = cfg.procedure_configs()[p_idx]
    wms = cfg.working_model_specs()
    R, W = stop - start, len(wms)
    est = np.empty((R, W))
    se = np.empty((R, W))
    crit = np.empty((R, W)) if want_estimated else None
    attempts = np.zeros(R, dtype=np.int64)
    exact_crit = cfg.rr_critical == "exact"
    cache = None
    if want_estimated and proc.kind == "RR" and not exact_crit:
        cache = _cache(dgp.n_covariates, proc.rr_threshold, cfg.cache_draws,
                       seeding.derive_rep_seed(cfg.master_seed, CACHE_TAG))
    z = stats.norm.ppf(1 - cfg.alpha / 2)
    for r, index in enumerate(range(start, stop)):
        data, assignment, eps = _replicate(dgp, proc, cfg.master_seed, index)
        attempts[r] = assignment.info.get("attempts", 0)
        # outcome at mu1 == mu2; grid points shift it along T
        y0 = dgp.mu2 + data.X @ dgp.beta + eps
        full = Dataset(data.X, y0)
        try:
            for j, wm in enumerate(wms):
                fit = ols_fit(build_design(data, assignment, wm), y0)
                tt = treatment_statistic(fit)
                est[r, j], se[r, j] = tt.estimate, tt.se
                if want_estimated:
                    nu = estimate_nuisance(full, assignment, wm)
                    law = null_law_for(proc, nu)
                    if law.is_normal:
                        crit[r, j] = math.sqrt(law.variance) * z
                    elif cache is not None:
                        crit[r, j] = cache.critical(nu, cfg.alpha)
                    else:
                        seed = seeding.derive_rep_seed(seeding.derive_rep_seed(cfg.master_seed, index),
                                                       seeding.EXTRA)
                        crit[r, j] = corrected_critical(law, cfg.alpha, cfg.critical_draws, seed=seed).value
        except CarInferError as exc:
            raise ReplicationError(index, proc.label, exc) from exc
    return est, se, crit, attempts


def _run_treatment_passes(cfg: ExperimentConfig, executor, n_workers: int, estimated: bool):
    cfg_json = cfg.model_dump_json()
    est, se, crit, att = [], [], [], []
    for p_idx in range(len(cfg.procedures)):
        tasks = [(cfg_json, p_idx, a, b, estimated) for a, b in _chunks(cfg.replications, n_workers)]
        parts = _map(_treatment_chunk, tasks, executor)
        est.append(np.concatenate([x[0] for x in parts]))
        se.append(np.concatenate([x[1] for x in parts]))
        if estimated:
            crit.append(np.concatenate([x[2] for x in parts]))
        att.append(np.concatenate([x[3] for x in parts]))
    return np.stack(est), np.stack(se), (np.stack(crit) if estimated else None), np.stack(att)


def oracle_criticals(cfg: ExperimentConfig, workers: int | None = 1) -> np.ndarray:
    """True-DGP critical values per (procedure, working model).

    ``asymptotic``: quantile of the null law at the true nuisance parameters.
    ``simulated``: (1 - alpha) quantile of |S| over an independent set of H0
    replications of the same design (seeded from the master seed), i.e. the
    critical value that gives exactly alpha at this sample size.
    """
    procs = cfg.procedure_configs()
    wms = cfg.working_model_specs()
    if cfg.oracle_source == "simulated":
        calib = cfg.model_copy(update={
            "master_seed": seeding.derive_rep_seed(cfg.master_seed, ORACLE_TAG),
            "mode": "traditional", "delta_grid": [0.0]})
        return simulate_treatment(calib, workers, estimated=False, oracle=False).null_quantile()
    dgp = cfg.dgp_spec()
    out = np.empty((len(procs), len(wms)))
    for i, proc in enumerate(procs):
        for j, wm in enumerate(wms):
            law = null_law_for(proc, nuisance_from_dgp(dgp, wm))
            seed = seeding.derive_rep_seed(cfg.master_seed ^ ORACLE_TAG, i * len(wms) + j)
            out[i, j] = corrected_critical(law, cfg.alpha, cfg.critical_draws, seed=seed).value
    return out


def simulate_treatment(cfg: ExperimentConfig, workers: int | None = 1,
                       estimated: bool | None = None, oracle: bool | None = None) -> TreatmentDraws:
    """Run the treatment-effect replications once; criticals for any mode follow."""
    if estimated is None:
        estimated = cfg.mode == "estimated-critical"
    if oracle is None:
        oracle = cfg.mode == "oracle-critical"
    grid = list(cfg.delta_grid) if cfg.delta_grid is not None else [cfg.dgp.mu1 - cfg.dgp.mu2]
    executor, n_workers = _make_executor(workers)
    try:
        est, se, crit, att = _run_treatment_passes(cfg, executor, n_workers, estimated)
    finally:
        if executor is not None:
            executor.shutdown()
    crit_oracle = oracle_criticals(cfg, workers) if oracle else None
    return TreatmentDraws(
        [p.label for p in cfg.procedure_configs()], [w.label for w in cfg.working_model_specs()],
        grid, est, se, crit, crit_oracle, att, cfg.alpha)


def _metadata(cfg: ExperimentConfig, **extra) -> dict:
    meta = {
        "name": cfg.name,
        "experiment": cfg.experiment,
        "mode": cfg.mode,
        "replications": cfg.replications,
        "master_seed": cfg.master_seed,
        "config_sha256": cfg.config_hash(),
        "library_version": __version__,
        "notes": list(cfg.notes),
    }
    meta.update(extra)
    return meta


def run_rejection_experiment(cfg: ExperimentConfig, workers: int | None = 1) -> RejectionTable:
    draws = simulate_treatment(cfg, workers)
    table = draws.tabulate(cfg.mode)
    table.metadata = _metadata(cfg, mean_rr_attempts={
        p: float(draws.attempts[i].mean()) for i, p in enumerate(draws.procedures) if p.startswith("RR")})
    if draws.crit_oracle is not None:
        table.metadata["oracle_source"] = cfg.oracle_source
        table.metadata["oracle_criticals"] = {
            f"{p}/{w}": float(draws.crit_oracle[i, j])
            for i, p in enumerate(draws.procedures) for j, w in enumerate(draws.working_models)}
    return table


def run_power_curve(cfg: ExperimentConfig, workers: int | None = 1) -> RejectionTable:
    if cfg.delta_grid is None or 0.0 not in cfg.delta_grid:
        raise InputError("a power curve needs a delta_grid that includes 0")
    return run_rejection_experiment(cfg, workers)


# -- covariate effect ------------------------------------------------------------


def _covariate_chunk(cfg_json: str, p_idx: int, start: int, stop: int):
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    k = covariate_index(cfg.tested_covariate)
    beta = np.array(cfg.dgp.beta, dtype=float)
    beta[k] = 0.0
    dgp = cfg.dgp_spec()
    proc = cfg.procedure_configs()[p_idx]
    wms = cfg.working_model_specs()
    coef = np.empty((stop - start, len(wms)))
    var = np.empty_like(coef)
    for r, index in enumerate(range(start, stop)):
        data, assignment, eps = _replicate(dgp, proc, cfg.master_seed, index)
        t = assignment.T
        y0 = dgp.mu1 * t + dgp.mu2 * (1 - t) + data.X @ beta + eps
        try:
            for j, wm in enumerate(wms):
                pos = wm.included.index(k) + 2
                fit = ols_fit(build_design(data, assignment, wm), y0)
                coef[r, j] = fit.theta_hat[pos]
                var[r, j] = fit.sigma_w2_hat * fit.gram_inv[pos, pos]
        except CarInferError as exc:
            raise ReplicationError(index, proc.label, exc) from exc
    return coef, var


@dataclass
class CovariateDraws:
    procedures: list[str]
    working_models: list[str]
    grid: list[float]
    coef0: np.ndarray   # (P, R, W) coefficient estimate at beta_k = 0
    var: np.ndarray     # (P, R, W) sigma_w2_hat * [(G'G)^-1]_kk
    alpha: float

    def s_star(self, b: float) -> np.ndarray:
        """Single-coefficient statistic (m = 1, c0 = 0) at beta_k = b."""
        return (self.coef0 + b) ** 2 / self.var

    def tabulate(self) -> RejectionTable:
        crit = stats.chi2.ppf(1 - self.alpha, 1)
        P, R, W = self.var.shape
        cells = {}
        for b in self.grid:
            counts = (self.s_star(b) > crit).sum(axis=1)
            for i, p in enumerate(self.procedures):
                for j, w in enumerate(self.working_models):
                    cells[(p, w, float(b))] = Cell(int(counts[i, j]), R)
        return RejectionTable(cells, {"mode": "traditional"})


def simulate_covariate_effect(cfg: ExperimentConfig, workers: int | None = 1) -> CovariateDraws:
    if cfg.beta3_grid is None:
        raise InputError("covariate-effect experiments need beta3_grid")
    procs = cfg.procedure_configs()
    executor, n_workers = _make_executor(workers)
    cfg_json = cfg.model_dump_json()
    try:
        coef, var = [], []
        for p_idx in range(len(procs)):
            tasks = [(cfg_json, p_idx, a, b) for a, b in _chunks(cfg.replications, n_workers)]
            parts = _map(_covariate_chunk, tasks, executor)
            coef.append(np.concatenate([x[0] for x in parts]))
            var.append(np.concatenate([x[1] for x in parts]))
    finally:
        if executor is not None:
            executor.shutdown()
    return CovariateDraws([p.label for p in procs], [w.label for w in cfg.working_model_specs()],
                          list(cfg.beta3_grid), np.stack(coef), np.stack(var), cfg.alpha)


def run_covariate_effect_experiment(cfg: ExperimentConfig, workers: int | None = 1) -> RejectionTable:
    table = simulate_covariate_effect(cfg, workers).tabulate()
    table.metadata = _metadata(cfg, tested_covariate=cfg.tested_covariate)
    return table


# -- distribution check ------------------------------------------------------------


@dataclass
class DistributionResult:
    procedure: str
    working_model: str
    s_values: np.ndarray
    law_variance: float
    ks: float
    reference_cdf: object = field(repr=False, default=None)
    law: object = field(repr=False, default=None)

    @property
    def sd(self) -> float:
        return float(np.std(self.s_values, ddof=1))

    @property
    def sd_se(self) -> float:
        # normal-theory standard error of a sample standard deviation
        return self.sd / math.sqrt(2 * (len(self.s_values) - 1))


def empirical_distribution_check(cfg: ExperimentConfig, workers: int | None = 1,
                                 reference_draws: int = 1_000_000) -> dict[tuple[str, str], DistributionResult]:
    """KS distance of simulated S against the theoretical law of each procedure."""
    draws = simulate_treatment(cfg, workers, estimated=False, oracle=False)
    dgp = cfg.dgp_spec()
    delta = cfg.dgp.mu1 - cfg.dgp.mu2
    s_all = draws.statistics(delta)
    out = {}
    for i, proc in enumerate(cfg.procedure_configs()):
        for j, wm in enumerate(cfg.working_model_specs()):
            law = null_law_for(proc, nuisance_from_dgp(dgp, wm))
            if delta:
                law = law.with_delta(delta * math.sqrt(dgp.n))
            if law.is_normal:
                cdf = law.cdf
            else:
                seed = seeding.derive_rep_seed(cfg.master_seed ^ REFERENCE_TAG, i * 64 + j)
                cdf = law.mc_cdf(reference_draws, seeding.stream(seed), smooth=False)
            s = s_all[i, :, j]
            ks = float(stats.kstest(s, cdf).statistic)
            out[(proc.label, wm.label)] = DistributionResult(proc.label, wm.label, s, law.variance, ks, cdf, law)
    return out


def figure_rows(results: dict[tuple[str, str], DistributionResult], bins: int = 60,
                lim: float = 4.0) -> list[tuple]:
    edges = np.linspace(-lim, lim, bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    rows = []
    for (p, w), res in results.items():
        hist, _ = np.histogram(res.s_values, bins=edges)
        dens = hist / (len(res.s_values) * np.diff(edges))
        theo = res.law.pdf(centers, stream=np.random.default_rng(0))
        ref = stats.norm.pdf(centers)
        for lo, hi, d, t, z in zip(edges[:-1], edges[1:], dens, theo, ref):
            rows.append((p, w, float(lo), float(hi), float(d), float(t), float(z)))
    return rows


def write_figure_csv(path: str | Path, rows: list[tuple]) -> None:
    lines = ["procedure,working_model,bin_left,bin_right,simulated_density,theoretical_density,standard_normal_density"]
    for p, w, lo, hi, d, t, z in rows:
        lines.append(f"{p},{w},{lo!r},{hi!r},{d!r},{t!r},{z!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- balance ---------------------------------------------------------------------


@dataclass
class BalanceDraws:
    procedure: str
    scaled_imbalance: np.ndarray  # (R, K)
    mahalanobis: np.ndarray       # (R,)
    arm_gap: np.ndarray           # (R,) |n1/n - 1/2|
    attempts: np.ndarray


def _balance_chunk(dgp: DGPSpec, proc: ProcedureConfig, master_seed: int, start: int, stop: int):
    K = dgp.n_covariates
    imb = np.empty((stop - start, K))
    mah = np.empty(stop - start)
    gap = np.empty(stop - start)
    att = np.zeros(stop - start, dtype=np.int64)
    for r, index in enumerate(range(start, stop)):
        cov_rng, alloc_rng, _ = seeding.replication_streams(master_seed, index)
        X = generate_covariates(dgp, cov_rng).X
        try:
            a = allocate(X, proc, alloc_rng)
        except CarInferError as exc:
            raise ReplicationError(index, proc.label, exc) from exc
        imb[r] = imbalance_vector(X, a) / math.sqrt(dgp.n)
        mah[r] = mahalanobis(X, a) if K else 0.0
        gap[r] = abs(a.n1 / dgp.n - 0.5)
        att[r] = a.info.get("attempts", 0)
    return imb, mah, gap, att


def run_balance_experiment(dgp: DGPSpec, procedure: ProcedureConfig, replications: int,
                           master_seed: int, workers: int | None = 1) -> BalanceDraws:
    executor, n_workers = _make_executor(workers)
    try:
        tasks = [(dgp, procedure, master_seed, a, b) for a, b in _chunks(replications, n_workers)]
        parts = _map(_balance_chunk, tasks, executor)
    finally:
        if executor is not None:
            executor.shutdown()
    return BalanceDraws(procedure.label, *(np.concatenate([p[i] for p in parts]) for i in range(4)))


# -- orchestration -----------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, workers: int | None = 1) -> dict:
    """Run a config and write its CSVs plus a metadata JSON into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if cfg.experiment in ("rejection", "power_curve"):
        table = run_power_curve(cfg, workers) if cfg.experiment == "power_curve" else \
            run_rejection_experiment(cfg, workers)
        path = out_dir / f"{cfg.name}.csv"
        table.write_csv(path)
        written.append(path.name)
        meta = table.metadata
    elif cfg.experiment == "covariate_effect":
        table = run_covariate_effect_experiment(cfg, workers)
        path = out_dir / f"{cfg.name}.csv"
        table.write_csv(path)
        written.append(path.name)
        meta = table.metadata
    else:
        results = empirical_distribution_check(cfg, workers)
        path = out_dir / f"{cfg.name}.csv"
        write_figure_csv(path, figure_rows(results, cfg.histogram_bins))
        ks_path = out_dir / f"{cfg.name}_ks.csv"
        lines = ["procedure,working_model,ks,sample_sd,sd_se,law_variance"]
        for r in results.values():
            lines.append(f"{r.procedure},{r.working_model},{r.ks!r},{r.sd!r},{r.sd_se!r},{r.law_variance!r}")
        ks_path.write_text("\n".join(lines) + "\n")
        written += [path.name, ks_path.name]
        meta = _metadata(cfg)
    meta["outputs"] = written
    (out_dir / f"{cfg.name}_metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
