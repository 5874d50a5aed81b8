"""Monte-Carlo experiment runner, convergence-rate study and report persistence."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datagen import DgpConfig, Family, generate, structural_function
from .density_ratio import FitFailedError, RatioFitConfig, fit_ratio
from .estimators import EstimatorConfig, Method, fit_method
from .optimize import OptConfig, OptimizationError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "n", "trial_seed", "mse", "log10_mse", "fit_seconds")


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DgpConfig = DgpConfig()
    methods: Tuple[EstimatorConfig, ...] = (EstimatorConfig(),)
    trials: int = 20
    eval_points: int = 10_000
    sample_sizes: Tuple[int, ...] = (1000,)
    base_seed: int = 0
    ratio: RatioFitConfig = RatioFitConfig()
    workers: int = 1
    record_timing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.eval_points < 100:
            raise ValueError("eval_points must be >= 100")
        if not self.methods or not self.sample_sizes:
            raise ValueError("need at least one method and one sample size")
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate method labels {labels}; set 'name' to disambiguate")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ReportRow:
    method: str
    n: int
    trial_seed: int
    mse: Optional[float]
    fit_seconds: Optional[float] = None
    diagnostics: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def log10_mse(self) -> Optional[float]:
        if self.mse is None or not self.mse > 0:
            return None if self.mse is None else -math.inf
        return math.log10(self.mse)


@dataclass
class Report:
    rows: List[ReportRow] = field(default_factory=list)
    slopes: Dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return sum(r.mse is None for r in self.rows)

    def summary(self) -> List[dict]:
        """Per ``(method, n)``: mean/std of log10 MSE over successful trials."""
        groups: Dict[Tuple[str, int], List[float]] = {}
        fails: Dict[Tuple[str, int], int] = {}
        for r in self.rows:
            key = (r.method, r.n)
            groups.setdefault(key, [])
            fails.setdefault(key, 0)
            if r.mse is None:
                fails[key] += 1
            else:
                groups[key].append(r.log10_mse)
        out = []
        for (method, n), vals in sorted(groups.items()):
            arr = np.asarray(vals, dtype=float)
            out.append({
                "method": method,
                "n": n,
                "trials": int(arr.size),
                "failures": fails[(method, n)],
                "mean_log10_mse": float(arr.mean()) if arr.size else None,
                "std_log10_mse": float(arr.std(ddof=1)) if arr.size > 1 else 0.0 if arr.size else None,
            })
        return out

    def mse_table(self, method: str, n: Optional[int] = None) -> Dict[int, float]:
        """``trial_seed -> mse`` for one method (and sample size)."""
        return {r.trial_seed: r.mse for r in self.rows
                if r.method == method and (n is None or r.n == n) and r.mse is not None}


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

class TruthModel:
    """Structural function of a synthetic design, exposed as a model."""

    def __init__(self, dgp: DgpConfig):
        self._f = structural_function(dgp)

    def predict(self, x):
        return self._f(np.asarray(x, dtype=float))


def eval_seed(trial_seed: int) -> int:
    """Seed of the fresh evaluation sample, disjoint from the training stream."""
    return int(np.random.SeedSequence([trial_seed, 0x5EED]).generate_state(1, np.uint64)[0])


def mse_against_truth(model, dgp: DgpConfig, eval_points: int = 10_000, seed: int = 0) -> float:
    """Mean of ``(f_hat(x) - f*(x))^2`` over ``eval_points`` fresh draws of ``X``."""
    data = generate(dgp.replace(n=eval_points, seed=seed))
    return float(np.mean((model.predict(data.x) - data.f_true) ** 2))


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------

_FIT_ERRORS = (FitFailedError, OptimizationError, np.linalg.LinAlgError, ValueError)


def run_trial(cfg: ExperimentConfig, n: int, trial_seed: int) -> List[ReportRow]:
    """One data draw, one shared ratio fit, every method, every MSE."""
    dgp = cfg.dgp.replace(n=n, seed=trial_seed)
    data = generate(dgp)
    ratio_matrix, ratio_error, ratio_seconds = None, None, 0.0
    if any(m.method.needs_ratio for m in cfg.methods):
        start = time.perf_counter()
        try:
            ratio = fit_ratio(data, cfg.ratio.replace(seed=trial_seed))
            ratio_matrix = ratio.ratio_matrix(data.w, data.z, dtype=np.float32)
        except _FIT_ERRORS as err:
            ratio_error = f"ratio: {err}"
        ratio_seconds = time.perf_counter() - start
    seed_eval = eval_seed(trial_seed)
    rows = []
    for mcfg in cfg.methods:
        label = mcfg.label
        if mcfg.method.needs_ratio and ratio_matrix is None:
            rows.append(ReportRow(label, n, trial_seed, None, error=ratio_error))
            continue
        start = time.perf_counter()
        try:
            fit = fit_method(data, mcfg.replace(seed=mcfg.seed + trial_seed), ratio=ratio_matrix)
            mse = mse_against_truth(fit.model, cfg.dgp, cfg.eval_points, seed_eval)
            if not math.isfinite(mse):
                raise FitFailedError(f"non-finite evaluation MSE {mse}")
        except _FIT_ERRORS as err:
            logger.warning("%s failed at n=%d seed=%d: %s", label, n, trial_seed, err)
            rows.append(ReportRow(label, n, trial_seed, None, error=str(err)))
            continue
        seconds = time.perf_counter() - start
        if mcfg.method.needs_ratio:
            seconds += ratio_seconds
        diagnostics = {k: float(v) for k, v in fit.diagnostics.items() if k != "fit_seconds"}
        rows.append(ReportRow(label, n, trial_seed, mse,
                              seconds if cfg.record_timing else None, diagnostics))
    return rows


def _run_trial_args(args):
    return run_trial(*args)


def _canonical(rows, cfg: ExperimentConfig):
    order = {m.label: k for k, m in enumerate(cfg.methods)}
    return sorted(rows, key=lambda r: (order.get(r.method, len(order)), r.method, r.n, r.trial_seed))


def run_experiment(cfg: ExperimentConfig) -> Report:
    """Run every ``(n, trial)`` cell; trial ``t`` uses seed ``base_seed + t``.

    Rows come back ordered by method (config order), then ``n``, then seed,
    whatever ``workers`` is.
    """
    jobs = [(cfg, n, cfg.base_seed + t) for n in cfg.sample_sizes for t in range(cfg.trials)]
    rows: List[ReportRow] = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for part in pool.map(_run_trial_args, jobs):
                rows.extend(part)
    else:
        for job in jobs:
            rows.extend(run_trial(*job))
            logger.info("finished n=%d seed=%d", job[1], job[2])
    return Report(_canonical(rows, cfg))


@dataclass
class ConvergenceResult:
    slope: float
    intercept: float
    sample_sizes: np.ndarray
    mean_log10_mse: np.ndarray
    std_log10_mse: np.ndarray


def convergence_slope(report: Report, method: Optional[str] = None) -> ConvergenceResult:
    """OLS slope of per-``n`` mean log10 MSE against log10 ``n``."""
    rows = [r for r in report.rows if r.mse is not None and (method is None or r.method == method)]
    sizes = sorted({r.n for r in rows})
    if len(sizes) < 2:
        raise ValueError("need at least two sample sizes with successful fits")
    means, stds = [], []
    for n in sizes:
        vals = np.array([r.log10_mse for r in rows if r.n == n])
        means.append(vals.mean())
        stds.append(vals.std(ddof=1) if vals.size > 1 else 0.0)
    logn = np.log10(np.asarray(sizes, dtype=float))
    means = np.asarray(means)
    design = np.column_stack([np.ones_like(logn), logn])
    (intercept, slope), *_ = np.linalg.lstsq(design, means, rcond=None)
    return ConvergenceResult(float(slope), float(intercept), np.asarray(sizes), means, np.asarray(stds))


def convergence_study(cfg: ExperimentConfig) -> Tuple[Report, Dict[str, ConvergenceResult]]:
    """Run the experiment over ``cfg.sample_sizes`` and fit one slope per method."""
    if len(cfg.sample_sizes) < 3:
        raise ValueError("a convergence study needs at least 3 sample sizes")
    report = run_experiment(cfg)
    results = {m.label: convergence_slope(report, m.label) for m in cfg.methods}
    report.slopes = {k: v.slope for k, v in results.items()}
    return report, results


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _parse(v: str) -> Optional[float]:
    return None if v == "" else float(v)


def emit_report(report: Report, path, fmt: str = "csv") -> None:
    """Write ``report`` as CSV (rows only) or JSON (rows, summary, slopes)."""
    path = Path(path)
    try:
        if fmt == "csv":
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(CSV_COLUMNS)
                for r in report.rows:
                    writer.writerow([r.method, r.n, r.trial_seed, _fmt(r.mse),
                                     _fmt(r.log10_mse), _fmt(r.fit_seconds)])
        elif fmt == "json":
            doc = {
                "rows": [
                    {"method": r.method, "n": r.n, "trial_seed": r.trial_seed, "mse": r.mse,
                     "log10_mse": r.log10_mse, "fit_seconds": r.fit_seconds,
                     "diagnostics": r.diagnostics, "error": r.error}
                    for r in report.rows
                ],
                "summary": report.summary(),
                "slopes": report.slopes,
            }
            path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        else:
            raise ValueError(f"unknown report format {fmt!r}; use csv or json")
    except OSError as err:
        raise OSError(f"cannot write report to {path}: {err}") from err


def read_report(path) -> Report:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        rows = [ReportRow(d["method"], int(d["n"]), int(d["trial_seed"]), d["mse"],
                          d.get("fit_seconds"), d.get("diagnostics") or {}, d.get("error"))
                for d in doc["rows"]]
        return Report(rows, doc.get("slopes") or {})
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = [ReportRow(d["method"], int(d["n"]), int(d["trial_seed"]), _parse(d["mse"]),
                          _parse(d["fit_seconds"])) for d in reader]
    return Report(rows)


# --------------------------------------------------------------------------
# JSON experiment configs
# --------------------------------------------------------------------------

def _opt_from(doc) -> OptConfig:
    return OptConfig(**doc) if doc else OptConfig()


def estimator_config_from_dict(doc: dict) -> EstimatorConfig:
    doc = dict(doc)
    if "opt" in doc:
        doc["opt"] = OptConfig(**doc["opt"])
    for key in ("hidden", "sigma2_grid", "zeta_grid"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return EstimatorConfig(**doc)


def experiment_config_from_dict(doc: dict) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a nested JSON-style mapping."""
    doc = dict(doc)
    dgp = DgpConfig(**doc.pop("dgp", {}))
    methods = tuple(estimator_config_from_dict(m) for m in doc.pop("methods", [{}]))
    ratio_doc = dict(doc.pop("ratio", {}))
    if "hidden" in ratio_doc:
        ratio_doc["hidden"] = tuple(ratio_doc["hidden"])
    return ExperimentConfig(dgp=dgp, methods=methods, ratio=RatioFitConfig(**ratio_doc), **doc)


def experiment_config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, (Method, Family)):
            return obj.value
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj

    return plain(cfg)


def load_experiment_config(path) -> ExperimentConfig:
    return experiment_config_from_dict(json.loads(Path(path).read_text()))
