"""Command line entry point: ``iwnpiv <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import bench
from .datagen import DgpConfig, Family, generate, read_csv, write_csv
from .density_ratio import RatioFitConfig, fit_ratio, lsif_empirical_risk, ratio_mass_check
from .estimators import EstimatorConfig, Method, fit_method
from .models import load_model, save_model

logger = logging.getLogger("iwnpiv")

_EXIT_FAILED_FITS = 1
_EXIT_ERROR = 2


def _cmd_generate(args) -> int:
    cfg = DgpConfig(family=Family(args.family), n=args.n, seed=args.seed, r_coef=args.r_coef,
                    gamma0=args.gamma0, rho=args.rho, price_noise_scale=args.price_noise_scale,
                    error_scale=args.error_scale)
    write_csv(generate(cfg), args.out)
    return 0


def _cmd_fit_ratio(args) -> int:
    data = read_csv(args.data)
    cfg = RatioFitConfig(epochs=args.epochs, learning_rate=args.lr, cap=args.cap, seed=args.seed)
    model = fit_ratio(data, cfg)
    save_model(model, args.save)
    if data.n <= 3000:
        print(json.dumps({"lsif_risk": lsif_empirical_risk(model, data),
                          "mass_check": ratio_mass_check(model, data)}))
    return 0


def _cmd_fit(args) -> int:
    data = read_csv(args.data)
    method = Method(args.method)
    changes = {"method": method, "seed": args.seed, "sieve_degree": args.degree}
    for key in ("eta", "zeta", "sigma2"):
        if getattr(args, key) is not None:
            changes[key] = getattr(args, key)
    opt = EstimatorConfig().opt
    if args.epochs is not None:
        opt = dataclasses.replace(opt, max_epochs=args.epochs)
    if args.lr is not None:
        opt = dataclasses.replace(opt, learning_rate=args.lr)
    cfg = EstimatorConfig(opt=opt, **changes)
    start = time.perf_counter()
    ratio = None
    if method.needs_ratio:
        if args.ratio:
            ratio = load_model(args.ratio)
        else:
            logger.info("no --ratio given; fitting one with default settings")
            ratio = fit_ratio(data, RatioFitConfig(seed=args.seed))
    result = fit_method(data, cfg, ratio=ratio)
    elapsed = time.perf_counter() - start
    if args.save:
        save_model(result.model, args.save)
    report = {
        "method": method.value,
        "objective": float(result.objective_trace.min()) if len(result.objective_trace) else None,
        "diagnostics": {k: float(v) for k, v in result.diagnostics.items()},
        "wall_clock_seconds": elapsed,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)
    return 0


def _cmd_bench(args) -> int:
    cfg = bench.load_experiment_config(args.config)
    if args.workers is not None:
        cfg = cfg.replace(workers=args.workers)
    report = bench.run_experiment(cfg)
    bench.emit_report(report, args.out, args.format)
    for row in report.summary():
        print(f"{row['method']:>10} n={row['n']:<6} mean log10 MSE={row['mean_log10_mse']}"
              f" failures={row['failures']}")
    return 0 if report.failures == 0 else _EXIT_FAILED_FITS


def _cmd_convergence(args) -> int:
    cfg = bench.load_experiment_config(args.config)
    if args.workers is not None:
        cfg = cfg.replace(workers=args.workers)
    report, results = bench.convergence_study(cfg)
    fmt = "csv" if str(args.out).endswith(".csv") else "json"
    bench.emit_report(report, args.out, fmt)
    for label, res in results.items():
        print(f"{label}: slope {res.slope:.4f}")
    return 0 if report.failures == 0 else _EXIT_FAILED_FITS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iwnpiv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="draw a synthetic dataset to CSV")
    p.add_argument("--family", required=True, choices=[f.value for f in Family])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--r-coef", type=float, default=0.9)
    p.add_argument("--gamma0", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--price-noise-scale", type=float, default=1.0)
    p.add_argument("--error-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("fit-ratio", help="fit a conditional density ratio and save it as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=RatioFitConfig.epochs)
    p.add_argument("--lr", type=float, default=RatioFitConfig.learning_rate)
    p.add_argument("--cap", type=float, default=RatioFitConfig.cap)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save", required=True)
    p.set_defaults(func=_cmd_fit_ratio)

    p = sub.add_parser("fit", help="fit one structural-function estimator")
    p.add_argument("--method", required=True, choices=[m.value for m in Method])
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", help="saved ratio model; fitted on the fly when omitted")
    p.add_argument("--eta", type=float)
    p.add_argument("--zeta", type=float)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--degree", type=int, default=3, help="sieve degree for TwoSls")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save")
    p.add_argument("--report")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("bench", help="run a Monte-Carlo experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("convergence", help="log-log MSE slope over the configured sample sizes")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_convergence)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as err:
        print(f"iwnpiv {args.command}: error: {err}", file=sys.stderr)
        return _EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
