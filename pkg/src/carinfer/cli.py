"""Command-line entry point: ``carinfer {allocate,analyze,simulate,laws}``.

Exit codes: 0 success, 2 input or schema error, 3 procedure budget exhausted,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from scipy import stats

from . import __version__, seeding, simkit
from .errors import (
    BudgetError,
    CarInferError,
    InputError,
    NumericalError,
    ReplicationError,
)
from .inference import traditional_decision, treatment_statistic
from .laws import (
    DEFAULT_DRAWS,
    NuisanceParams,
    corrected_critical,
    corrected_p_value,
    estimate_nuisance,
    null_law_for,
)
from .model import WorkingModelSpec, build_design, ols_fit, read_dataset_csv
from .randomizers import ProcedureConfig, allocate, imbalance_report
from .special import v_a

EXIT_OK, EXIT_INPUT, EXIT_BUDGET, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("carinfer")


def fmt(x: float) -> str:
    """Six significant digits for anything printed to a terminal."""
    return f"{x:.6g}"


def _procedure(args) -> ProcedureConfig:
    return ProcedureConfig(args.procedure, rr_threshold=args.a, rr_max_attempts=args.max_attempts,
                           psr_rho=args.rho, dabcd_burn_in=args.burn_in)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = seeding.entropy_seed()
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def _parse_include(text: str, n_covariates: int) -> WorkingModelSpec:
    text = text.strip()
    if text == "all":
        return WorkingModelSpec(tuple(range(n_covariates)), "all")
    if text in ("none", ""):
        return WorkingModelSpec((), "none")
    idx = []
    for name in text.split(","):
        try:
            k = simkit.covariate_index(name.strip())
        except ValueError as exc:
            raise InputError(f"--include: {exc}") from None
        if k >= n_covariates:
            raise InputError(f"--include names {name.strip()} but the data has {n_covariates} covariates")
        idx.append(k)
    if len(set(idx)) != len(idx):
        raise InputError("--include repeats a covariate")
    return WorkingModelSpec(tuple(idx), text)


def _floats(text: str | None) -> list[float]:
    if text is None or text.strip() == "":
        return []
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise InputError(f"expected a comma-separated list of numbers, got {text!r}") from None


# -- subcommands -----------------------------------------------------------------


def cmd_allocate(args) -> int:
    table = read_dataset_csv(args.input)
    proc = _procedure(args)
    seed = _seed(args)
    X = table.data.X
    assignment = allocate(X, proc, seeding.stream(seed, seeding.ALLOCATION))
    out = Path(args.out)
    lines = ["unit,t"] + [f"{i + 1},{int(t)}" for i, t in enumerate(assignment.T)]
    out.write_text("\n".join(lines) + "\n")
    sidecar = {
        "procedure": proc.label,
        "seed": seed,
        "n": assignment.n,
        "n1": assignment.n1,
        "n2": assignment.n2,
        "attempts": int(assignment.info.get("attempts", 1)),
        "library_version": __version__,
    }
    if X.shape[1] > 0:
        rep = imbalance_report(X, assignment)
        sidecar["mahalanobis"] = rep.mahalanobis
        sidecar["imbalance"] = rep.raw.tolist()
        sidecar["scaled_imbalance"] = rep.scaled.tolist()
    if "fallback_units" in assignment.info:
        sidecar["fallback_units"] = assignment.info["fallback_units"]
    side_path = out.with_suffix(".json")
    side_path.write_text(json.dumps(sidecar, indent=2) + "\n")
    msg = f"{proc.label}: n1={assignment.n1} n2={assignment.n2}"
    if "mahalanobis" in sidecar:
        msg += f" M={fmt(sidecar['mahalanobis'])}"
    if proc.kind == "RR":
        msg += f" attempts={sidecar['attempts']}"
    print(msg)
    return EXIT_OK


def cmd_analyze(args) -> int:
    table = read_dataset_csv(args.input)
    data = table.data
    if data.y is None or table.t is None:
        missing = [c for c, v in (("y", data.y), ("t", table.t)) if v is None]
        raise InputError(f"{args.input}: missing column(s) {', '.join(missing)}")
    proc = _procedure(args)
    wm = _parse_include(args.include, data.n_covariates)
    seed = _seed(args)
    fit = ols_fit(build_design(data, table.t, wm), data.y)
    tt = treatment_statistic(fit)
    trad = traditional_decision(tt, args.alpha)
    nu = estimate_nuisance(data, table.t, wm)
    law = null_law_for(proc, nu)
    crit = corrected_critical(law, args.alpha, args.draws, seed=seed)
    p_corr = corrected_p_value(law, tt.s, args.draws, seed=seed)
    result = {
        "procedure": proc.label,
        "working_model": wm.label,
        "estimate": tt.estimate,
        "se": tt.se,
        "s": tt.s,
        "alpha": args.alpha,
        "p_traditional": trad.p_value,
        "p_corrected": p_corr,
        "critical_traditional": trad.critical_value,
        "critical_corrected": crit.value,
        "reject_traditional": bool(trad.reject),
        "reject_corrected": bool(abs(tt.s) > crit.value),
        "law_family": law.family,
        "law_variance": law.variance,
        "lambda1": nu.lambda1,
        "lambda2": nu.lambda2,
        "critical_method": crit.method,
        "seed": seed,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps({k: (float(fmt(v)) if isinstance(v, float) else v) for k, v in result.items()},
                     indent=2))
    return EXIT_OK


def _load_experiment(args) -> simkit.ExperimentConfig:
    overrides = {"replications": args.replications, "master_seed": args.seed}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InputError(f"cannot read {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(raw, dict):
            raise InputError(f"{args.config}: top level must be an object")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return simkit.ExperimentConfig.model_validate(raw)
    return simkit.load_preset(args.preset, **overrides)


def cmd_simulate(args) -> int:
    cfg = _load_experiment(args)
    out_dir = Path(args.out_dir)
    print(f"{cfg.name}: {cfg.experiment}, mode={cfg.mode}, replications={cfg.replications}, "
          f"master_seed={cfg.master_seed}", file=sys.stderr)
    meta = simkit.run_experiment(cfg, out_dir, args.workers)
    for name in meta["outputs"]:
        print(out_dir / name)
    print(out_dir / f"{cfg.name}_metadata.json")
    return EXIT_OK


def cmd_laws(args) -> int:
    proc = _procedure(args)
    beta_ex = _floats(args.beta_ex)
    var_ex = _floats(args.var_ex) or [1.0] * len(beta_ex)
    dim = args.dim if args.dim is not None else len(beta_ex)
    nu = NuisanceParams.from_components(beta_ex, var_ex, args.sigma_eps**2, dim)
    law = null_law_for(proc, nu)
    seed = _seed(args) if not law.is_normal else args.seed
    crit = corrected_critical(law, args.alpha, args.draws, seed=seed)
    print(f"procedure      {proc.label}")
    print(f"lambda1        {fmt(nu.lambda1)}")
    print(f"lambda2        {fmt(nu.lambda2)}")
    print(f"family         {law.family}")
    print(f"variance       {fmt(law.variance)}")
    if proc.kind == "RR":
        print(f"v_a            {fmt(v_a(dim, proc.rr_threshold))}")
    print(f"critical       {fmt(crit.value)}  (alpha={fmt(args.alpha)}, {crit.method})")
    print(f"traditional    {fmt(float(stats.norm.ppf(1 - args.alpha / 2)))}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def _add_procedure_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--procedure", required=required, default="cr",
                   type=str.lower, choices=["cr", "rr", "psr", "dabcd"],
                   help="allocation procedure: cr, rr, psr or dabcd")
    p.add_argument("--a", type=float, default=3.0, help="RR Mahalanobis threshold (default 3)")
    p.add_argument("--max-attempts", type=int, default=100_000,
                   help="RR redraw budget before giving up (default 100000)")
    p.add_argument("--rho", type=float, default=0.75, help="PSR biased-coin probability (default 0.75)")
    p.add_argument("--burn-in", type=int, default=None,
                   help="D_A-BCD fair-coin units before the biased coin (default K+2)")


def _add_seed(p: argparse.ArgumentParser, what: str) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help=f"{what}; drawn from system entropy and printed when omitted")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carinfer", description="Covariate-adjusted randomization and corrected inference.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("allocate", help="assign units in a covariate CSV to two arms")
    p.add_argument("--input", required=True, help="CSV with columns x1..xK")
    p.add_argument("--out", required=True, help="assignment CSV (unit,t); a .json sidecar is written next to it")
    _add_procedure_flags(p)
    _add_seed(p, "allocation seed")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("analyze", help="traditional and corrected treatment tests for a finished experiment")
    p.add_argument("--input", required=True, help="CSV with columns x1..xK, y, t")
    p.add_argument("--include", default="none",
                   help="covariates in the working model: comma list (x1,x3), 'all' or 'none'")
    p.add_argument("--alpha", type=float, default=0.05, help="significance level (default 0.05)")
    p.add_argument("--draws", type=int, default=DEFAULT_DRAWS,
                   help="Monte Carlo draws for the RR null law (default 200000)")
    p.add_argument("--out", default=None, help="write the result JSON here as well")
    _add_procedure_flags(p)
    _add_seed(p, "seed for the RR null-law draws")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="run a Monte Carlo experiment from a config or bundled preset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="experiment JSON (spec_version 1)")
    src.add_argument("--preset", choices=simkit.preset_names(), help="bundled experiment")
    p.add_argument("--replications", type=int, default=None, help="override the replication count")
    p.add_argument("--seed", type=int, default=None, help="override the config's master_seed")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: available CPUs); results do not depend on it")
    p.add_argument("--out-dir", default="results", help="output directory (default ./results)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("laws", help="print the null law of S and its critical value")
    _add_procedure_flags(p)
    p.add_argument("--sigma-eps", type=float, required=True, help="error standard deviation")
    p.add_argument("--beta-ex", default="", help="comma list of excluded-covariate coefficients")
    p.add_argument("--var-ex", default=None, help="comma list of excluded-covariate variances (default 1s)")
    p.add_argument("--dim", type=int, default=None,
                   help="number of covariates the randomizer balanced (default: len(beta-ex))")
    p.add_argument("--alpha", type=float, default=0.05, help="significance level (default 0.05)")
    p.add_argument("--draws", type=int, default=DEFAULT_DRAWS, help="Monte Carlo draws for RR")
    _add_seed(p, "seed for the RR null-law draws")
    p.set_defaults(func=cmd_laws)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ReplicationError):
        exc = exc.__cause__ or exc
    if isinstance(exc, BudgetError):
        return EXIT_BUDGET
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_INPUT


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        for err in exc.errors():
            loc = ".".join(str(x) for x in err["loc"]) or "<root>"
            print(f"error: {loc}: {err['msg']}", file=sys.stderr)
        return EXIT_INPUT
    except (CarInferError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except np.linalg.LinAlgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
