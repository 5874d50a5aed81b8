"""Nonparametric instrumental-variable regression through importance-weighted moments.

A conditional density ratio ``r(y, x | z)`` is fitted directly by least-squares
importance fitting and then turns conditional moment restrictions into plain
sample averages that neural-network, kernel or sieve models can minimise.
"""

from .bench import (
    ExperimentConfig,
    Report,
    ReportRow,
    convergence_study,
    emit_report,
    read_report,
    run_experiment,
)
from .datagen import Dataset, DgpConfig, Family, generate, read_csv, write_csv
from .density_ratio import (
    ConstantRatio,
    FitFailedError,
    RatioFitConfig,
    RatioModel,
    fit_ratio,
    lsif_empirical_risk,
    ratio_mass_check,
)
from .estimators import (
    EstimatorConfig,
    FitResult,
    Method,
    fit_2sls,
    fit_iv_just,
    fit_iw_krnl,
    fit_iwls,
    fit_iwmm,
    fit_ls,
    fit_method,
    iwls_objective,
    iwmm_objective,
    projected_mse_empirical,
)
from .models import GaussianKernelModel, MlpModel, PolynomialModel, load_model, save_model
from .optimize import OptConfig, k_fold_cv, minimize

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
