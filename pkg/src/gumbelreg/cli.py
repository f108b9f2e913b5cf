"""Command-line interface: ``gumbelreg {fit,test,ci,simulate}``.

Exit codes: 0 success, 1 usage error, 2 data or model error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .errors import DataError, FitError, FormulaError, ModelError, SimulationError, SingularMatrixError
from .errors import DomainError
from .estimate import Hypothesis, fit_mle
from .inference import STATISTICS, canonical_kind, confidence_interval, run_tests
from .io import load_dataset, load_model_config, read_json, write_csv, write_json
from .montecarlo import (
    config_from_dict,
    critical_values,
    power_study,
    quantile_discrepancy,
    simulate_statistics,
    size_study,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gumbelreg", description="Extreme-value regression: fits, tests and simulations.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(sp):
        sp.add_argument("--model", required=True, help="model config JSON")
        sp.add_argument("--data", required=True, help="CSV dataset with a header row")
        sp.add_argument("--json", metavar="PATH", help="also write the result as JSON")

    sp = sub.add_parser("fit", help="maximum likelihood fit")
    data_args(sp)

    sp = sub.add_parser("test", help="five tests of a null hypothesis")
    data_args(sp)
    sp.add_argument("--null", action="append", required=True, metavar="NAME=VALUE",
                    help="parameter restriction; repeat for a joint hypothesis")
    sp.add_argument("--clamp-wstar", action="store_true", help="clamp w* at zero")

    sp = sub.add_parser("ci", help="confidence interval by test inversion")
    data_args(sp)
    sp.add_argument("--param", action="append", required=True, help="parameter name (repeatable)")
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--kind", action="append", help="w, W, S_R, S_T or wstar (repeatable; default all)")
    sp.add_argument("--clamp-wstar", action="store_true")

    sp = sub.add_parser("simulate", help="Monte Carlo study from a config file")
    sp.add_argument("--config", required=True, help="simulation config JSON")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--levels", help="comma-separated nominal levels, e.g. 0.1,0.05,0.01")
    sp.add_argument("--threads", type=int, default=1, help="worker processes")
    sp.add_argument("--clamp-wstar", action="store_true")
    sp.add_argument("--study", choices=["size", "critical", "discrepancy", "power"])
    sp.add_argument("--out", default=".", help="output directory")
    return p


def _load(args):
    cfg = load_model_config(args.model)
    data = load_dataset(args.data, cfg.response, list(cfg.model.covariates))
    return cfg, data


def _fmt(x):
    return f"{x:.6g}" if math.isfinite(x) else str(x)


def _cmd_fit(args) -> int:
    cfg, data = _load(args)
    fit = fit_mle(cfg.model, data, init=cfg.init or None)
    se = fit.standard_errors()
    print(f"n = {data.n}, log-likelihood = {fit.loglik:.6f}")
    print(f"{'parameter':<12}{'estimate':>14}{'std.err':>14}")
    for name, est, s in zip(fit.theta.names, fit.theta.flat, se):
        print(f"{name:<12}{est:>14.6g}{s:>14.6g}")
    print(f"converged: {fit.converged} ({fit.iterations} iterations, score norm {fit.score_norm:.2e})")
    for w in fit.rank_warnings:
        print(f"warning: {w}")
    if args.json:
        write_json(
            {
                "theta": fit.theta.as_dict(),
                "std_errors": dict(zip(fit.theta.names, se.tolist())),
                "loglik": fit.loglik,
                "converged": fit.converged,
                "iterations": fit.iterations,
                "rank_warnings": fit.rank_warnings,
            },
            args.json,
        )
    return EXIT_OK if fit.converged else EXIT_NUMERIC


def _cmd_test(args) -> int:
    cfg, data = _load(args)
    hyp = Hypothesis.parse(args.null)
    report = run_tests(cfg.model, data, hyp, clamp=args.clamp_wstar)
    print(report.table())
    if args.json:
        write_json(report.to_dict(), args.json)
    return EXIT_OK


def _cmd_ci(args) -> int:
    cfg, data = _load(args)
    kinds = [canonical_kind(k) for k in (args.kind or STATISTICS)]
    hat = fit_mle(cfg.model, data, init=cfg.init or None)
    out = []
    print(f"{100 * args.level:g}% confidence intervals")
    print(f"{'parameter':<12}{'statistic':<10}{'lower':>14}{'upper':>14}  flags")
    for name in args.param:
        cfg.model.index(name)
        for kind in kinds:
            ci = confidence_interval(cfg.model, data, name, args.level, kind, clamp=args.clamp_wstar, hat=hat)
            out.append(ci.to_dict())
            flags = ", ".join(sorted(ci.flags)) or "none"
            print(f"{name:<12}{kind:<10}{_fmt(ci.lower):>14}{_fmt(ci.upper):>14}  {flags}")
    if args.json:
        write_json({"intervals": out}, args.json)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    raw = read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.reps is not None:
        raw["replications"] = args.reps
    if args.levels:
        try:
            raw["levels"] = [float(a) for a in args.levels.split(",")]
        except ValueError:
            print("gumbelreg: error: --levels must be comma-separated numbers", file=sys.stderr)
            return EXIT_USAGE
    if args.clamp_wstar:
        raw["clamp"] = True
    config = config_from_dict(raw)
    study = args.study or raw.get("study", "size")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = config.label or "simulation"
    summary = {"config": config.describe(), "study": study}
    if study == "power":
        cv_stats = simulate_statistics(config, workers=args.threads)
        cv = critical_values(config, stats=cv_stats)
        grid = [float(e) for e in raw.get("epsilon_grid", [0.0])]
        rows = power_study(config, grid, cv, level=raw.get("power_level"), workers=args.threads)
        summary["critical_values"] = {k: {str(a): v for a, v in d.items()} for k, d in cv.items()}
        for row in rows:
            print(f"eps={row['epsilon']:<10g} {row['statistic']:<7} power={row['power_percent']:.2f}%")
    else:
        stats = simulate_statistics(config, workers=args.threads)
        if study == "size":
            table = size_study(config, stats=stats)
            rows = table.rows()
            summary.update(table.summary())
            print(table.table())
        elif study == "critical":
            cv = critical_values(config, stats=stats)
            rows = [{"statistic": k, "level": a, "critical_value": v} for k, d in cv.items() for a, v in d.items()]
            summary["critical_values"] = {k: {str(a): v for a, v in d.items()} for k, d in cv.items()}
            for row in rows:
                print(f"{row['statistic']:<7} alpha={row['level']:<6g} c={row['critical_value']:.6g}")
        else:
            grid = [float(q) for q in raw.get("grid", range(1, 9))]
            disc = quantile_discrepancy(config, grid, stats=stats)
            rows = [
                {"statistic": k, "quantile": q, "discrepancy": float(v)}
                for k, d in disc.items()
                for q, v in zip(grid, d)
            ]
            for k, d in disc.items():
                print(f"{k:<7} " + " ".join(f"{v:+.4f}" for v in d))
        ok = stats["converged"]
        summary["nonconvergence"] = int((~ok).sum())
        summary["flag_counts"] = {
            f: int(stats[f][ok].sum()) for f in ("small_w", "zeta_degenerate", "ill_conditioned")
        }
        print("flags: " + ", ".join(f"{k}={v}" for k, v in summary["flag_counts"].items())
              + f", nonconvergence={summary['nonconvergence']}")
    write_csv(rows, out / f"{stem}_{study}.csv")
    write_json(summary, out / f"{stem}_{study}.json")
    return EXIT_OK


_COMMANDS = {"fit": _cmd_fit, "test": _cmd_test, "ci": _cmd_ci, "simulate": _cmd_simulate}


def run_cli(argv=None) -> int:
    """Run the command line and return the exit code."""
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with np.errstate(all="ignore"):
            return _COMMANDS[args.command](args)
    except (DataError, ModelError, FormulaError) as exc:
        print(f"gumbelreg: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, SingularMatrixError, SimulationError, DomainError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"gumbelreg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_cli())
