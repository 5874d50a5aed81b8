"""Structural-function estimators: importance-weighted moment methods and baselines.

Importance-weighted methods need the pairwise ratio matrix
``M[i, j] = r(W_i | Z_j)``.  With it the empirical conditional moments are

    m_j(f) = (1/n) sum_i (Y_i - f(X_i)) M[i, j],

the moment objective is ``(1/n) sum_j m_j^2`` and the penalised least-squares
objective is ``(1/n) sum_i (Y_i - f(X_i))^2 + eta * sum_j m_j^2``.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from .datagen import Dataset
from .density_ratio import FitFailedError, pair_matrix
from .models import (
    GaussianKernelModel,
    MlpModel,
    PolynomialModel,
    polynomial_features,
)
from .optimize import (
    OptConfig,
    OptimizationError,
    SingularSystemError,
    k_fold_cv,
    minimize,
    solve_ridge_normal_equations,
)

logger = logging.getLogger(__name__)


class Method(str, Enum):
    IW_MM = "IwMm"
    IW_LS = "IwLs"
    IW_KRNL = "IwKrnl"
    LS = "Ls"
    IV_JUST = "IvJust"
    TWO_SLS = "TwoSls"

    @property
    def needs_ratio(self) -> bool:
        return self in (Method.IW_MM, Method.IW_LS, Method.IW_KRNL)


class WeakInstrumentError(np.linalg.LinAlgError):
    pass


DEFAULT_NET_OPT = OptConfig(max_epochs=1000, learning_rate=1e-3, tolerance=1e-5, patience=200)


@dataclass(frozen=True)
class EstimatorConfig:
    method: Method = Method.IW_MM
    eta: float = 1e-3
    zeta: Optional[float] = None
    sigma2: Optional[float] = None
    sieve_degree: int = 3
    hidden: Tuple[int, ...] = (128, 128)
    leakiness: float = 0.2
    opt: OptConfig = DEFAULT_NET_OPT
    seed: int = 0
    cv_folds: int = 5
    sigma2_grid: Tuple[float, ...] = (0.1, 0.3, 1.0, 3.0)
    zeta_grid: Tuple[float, ...] = (1e-6, 1e-4, 1e-2)
    max_centers: Optional[int] = None
    matrix_dtype: str = "float32"
    name: Optional[str] = None

    @property
    def label(self) -> str:
        """Row label in reports; sieve 2SLS is tagged with its degree."""
        if self.name:
            return self.name
        if self.method == Method.TWO_SLS:
            return f"TwoSls{self.sieve_degree}"
        return self.method.value

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.eta < 0 or (self.zeta is not None and self.zeta < 0):
            raise ValueError("eta and zeta must be nonnegative")
        if self.sigma2 is not None and not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.sieve_degree not in (1, 2, 3):
            raise ValueError("sieve_degree must be 1, 2 or 3")

    def replace(self, **changes) -> "EstimatorConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class FitResult:
    model: object
    objective_trace: NDArray
    diagnostics: dict = field(default_factory=dict)
    method: Optional[Method] = None

    def predict(self, x) -> NDArray:
        return self.model.predict(x)


# --------------------------------------------------------------------------
# objectives
# --------------------------------------------------------------------------

def _moments(residual, m) -> NDArray:
    n = residual.shape[0]
    return (m.T @ residual.astype(m.dtype, copy=False)).astype(np.float64) / n


def iwmm_objective(f, r, data: Dataset) -> float:
    """``(1/n) sum_j ((1/n) sum_i (Y_i - f(X_i)) r(W_i | Z_j))^2``."""
    m = pair_matrix(r, data)
    return float(np.mean(_moments(data.y - f.predict(data.x), m) ** 2))


def iwls_objective(f, r, data: Dataset, eta: float) -> float:
    """Mean squared error plus ``eta`` times the unaveraged sum of squared moments."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    res = data.y - f.predict(data.x)
    mse = float(np.mean(res**2))
    if eta == 0:
        return mse
    return mse + eta * float(np.sum(_moments(res, pair_matrix(r, data)) ** 2))


def projected_mse_empirical(f, r, data: Dataset) -> float:
    """Moment objective with ``f* - f`` in place of the residual; needs ``f_true``."""
    if data.f_true is None:
        raise ValueError("projected MSE needs a dataset with f_true")
    m = pair_matrix(r, data)
    return float(np.mean(_moments(data.f_true - f.predict(data.x), m) ** 2))


def moment_gram(m) -> NDArray:
    """``G = M M' / n^2`` so that ``sum_j m_j(f)^2 = res' G res``."""
    n = m.shape[0]
    g = m @ m.T
    g /= n * n
    return g


def _quad(gram, v) -> Tuple[float, NDArray]:
    gv = (gram @ v.astype(gram.dtype, copy=False)).astype(np.float64)
    return float(v @ gv), gv


def loss_and_gradient(model, theta, data: Dataset, gram, mse_weight: float, moment_weight: float):
    """``mse_weight * mean(res^2) + moment_weight * sum_j m_j^2`` and its parameter gradient.

    ``gram`` is :func:`moment_gram` of the ratio matrix; it may be ``None``
    when ``moment_weight`` is zero.
    """
    model = model.with_params(theta)
    n = data.n
    if isinstance(model, MlpModel):
        pred, cache = model.forward_cache(data.x)
        backward = lambda g: model.backward(cache, g)
    else:
        pred = model.predict(data.x)
        backward = lambda g: model.vjp(data.x, g)
    res = data.y - pred
    value = mse_weight * float(np.mean(res**2))
    upstream = -2.0 * mse_weight * res / n
    if moment_weight != 0:
        q, gres = _quad(gram, res)
        value += moment_weight * q
        upstream = upstream - 2.0 * moment_weight * gres
    return value, backward(upstream)


# --------------------------------------------------------------------------
# network / iterative fits
# --------------------------------------------------------------------------

def default_structural_net(data: Dataset, cfg: EstimatorConfig) -> MlpModel:
    x = data.x
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    y_scale = float(data.y.std()) or 1.0
    return MlpModel.init(
        (data.d_x,) + cfg.hidden + (1,),
        seed=cfg.seed,
        leakiness=cfg.leakiness,
        in_shift=x.mean(axis=0),
        in_scale=scale,
        out_shift=float(data.y.mean()),
        out_scale=y_scale,
    )


def _ratio_block(ratio, data: Dataset, cfg: EstimatorConfig):
    if ratio is None:
        raise ValueError(f"method {cfg.method.value} needs a fitted ratio")
    return pair_matrix(ratio, data, dtype=np.dtype(cfg.matrix_dtype).type)


def _iterative_fit(data, model, m, mse_weight, moment_weight, cfg: EstimatorConfig, method):
    gram = None if m is None else moment_gram(m)

    def fun(theta):
        return loss_and_gradient(model, theta, data, gram, mse_weight, moment_weight)

    try:
        theta, trace = minimize(fun, model.params, cfg.opt)
    except OptimizationError as err:
        raise FitFailedError(f"{method.value} fit diverged: {err}") from err
    fitted = model.with_params(theta)
    diagnostics = {"objective": float(np.min(trace)), "epochs": float(len(trace))}
    if m is not None:
        pred = fitted.predict(data.x)
        diagnostics["moment_norm"] = float(np.sqrt(max(_quad(gram, data.y - pred)[0], 0.0) / data.n))
        if data.f_true is not None:
            diagnostics["projected_mse"] = _quad(gram, data.f_true - pred)[0] / data.n
    if data.f_true is not None:
        diagnostics["train_mse_vs_truth"] = float(np.mean((fitted.predict(data.x) - data.f_true) ** 2))
    return FitResult(fitted, trace, diagnostics, method)


def fit_iwmm(data: Dataset, ratio, model_spec=None, cfg: EstimatorConfig = EstimatorConfig()) -> FitResult:
    """Minimise the importance-weighted moment objective by full-batch Adam.

    ``model_spec`` is the starting model (network or kernel); by default a
    fresh network of ``cfg.hidden`` width seeded with ``cfg.seed``.
    """
    m = _ratio_block(ratio, data, cfg)
    model = model_spec if model_spec is not None else default_structural_net(data, cfg)
    return _iterative_fit(data, model, m, 0.0, 1.0 / data.n, cfg, Method.IW_MM)


def fit_iwls(data: Dataset, ratio, model_spec=None, cfg: EstimatorConfig = EstimatorConfig()) -> FitResult:
    """Least squares penalised by ``cfg.eta`` times the summed squared moments."""
    model = model_spec if model_spec is not None else default_structural_net(data, cfg)
    m = _ratio_block(ratio, data, cfg) if cfg.eta > 0 else None
    return _iterative_fit(data, model, m, 1.0, cfg.eta, cfg, Method.IW_LS)


def fit_ls(data: Dataset, model_spec=None, cfg: EstimatorConfig = EstimatorConfig()) -> FitResult:
    """Plain least squares, ignoring endogeneity."""
    model = model_spec if model_spec is not None else default_structural_net(data, cfg)
    return _iterative_fit(data, model, None, 1.0, 0.0, cfg, Method.LS)


# --------------------------------------------------------------------------
# kernel model in closed form
# --------------------------------------------------------------------------

def _kernel_design(x, centers, sigma2, input_scale):
    probe = GaussianKernelModel(centers, sigma2, np.zeros(len(centers)), 0.0, input_scale)
    return np.hstack([probe.features(x), np.ones((len(x), 1))])


def kernel_moment_system(data: Dataset, m, centers, sigma2: float, input_scale=None):
    """Design ``B`` and target ``c`` with moment objective ``||c - B theta||^2``.

    ``theta = (beta, beta0)``; ``m`` is the pairwise ratio matrix.
    """
    n = data.n
    a = _kernel_design(data.x, centers, sigma2, input_scale)
    m64 = np.asarray(m, dtype=np.float64)
    norm = n * np.sqrt(n)
    return m64.T @ a / norm, m64.T @ data.y / norm


def fit_iw_krnl(data: Dataset, ratio, sigma2: float, zeta: float, centers=None,
                input_scale=None) -> FitResult:
    """Closed-form moment fit of the Gaussian-kernel model.

    Solves ``(B'B + zeta * diag(1, .., 1, 0)) theta = B'c`` so the intercept
    is left unpenalised.
    """
    if not sigma2 > 0 or zeta < 0:
        raise ValueError("need sigma2 > 0 and zeta >= 0")
    m = pair_matrix(ratio, data)
    centers = data.x if centers is None else np.asarray(centers, dtype=float)
    if centers.ndim == 1:
        centers = centers[:, None]
    b, c = kernel_moment_system(data, m, centers, sigma2, input_scale)
    mask = np.ones(b.shape[1])
    mask[-1] = 0.0
    theta = solve_ridge_normal_equations(b, c, zeta, mask)
    model = GaussianKernelModel(centers, sigma2, theta[:-1], theta[-1], input_scale)
    resid = c - b @ theta
    objective = float(resid @ resid + zeta * theta[:-1] @ theta[:-1])
    diagnostics = {"objective": objective, "moment_objective": float(resid @ resid),
                   "sigma2": sigma2, "zeta": zeta}
    if data.f_true is not None:
        diagnostics["train_mse_vs_truth"] = float(np.mean((model.predict(data.x) - data.f_true) ** 2))
    return FitResult(model, np.array([objective]), diagnostics, Method.IW_KRNL)


def kernel_ridge_objective(data: Dataset, ratio, model: GaussianKernelModel, zeta: float) -> float:
    """Moment objective plus ``zeta * ||beta||^2`` for a kernel model."""
    return iwmm_objective(model, ratio, data) + zeta * float(model.beta @ model.beta)


def fit_iw_krnl_cv(data: Dataset, ratio, cfg: EstimatorConfig = EstimatorConfig()) -> FitResult:
    """Choose ``sigma2`` and ``zeta`` by K-fold held-out moment objective, then refit."""
    m = pair_matrix(ratio, data)
    scale = data.x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    rng = np.random.default_rng(cfg.seed)

    def centers_for(idx):
        if cfg.max_centers is not None and idx.size > cfg.max_centers:
            idx = np.sort(rng.choice(idx, cfg.max_centers, replace=False))
        return data.x[idx]

    sigmas = (cfg.sigma2,) if cfg.sigma2 is not None else cfg.sigma2_grid
    zetas = (cfg.zeta,) if cfg.zeta is not None else cfg.zeta_grid
    grid = [(s, z) for s in sigmas for z in zetas]

    def fit_fn(point, train_idx):
        sub = data.subset(train_idx)
        return fit_iw_krnl(sub, m[np.ix_(train_idx, train_idx)], point[0], point[1],
                           centers_for(train_idx), scale)

    def score_fn(fit, test_idx):
        return iwmm_objective(fit.model, m[np.ix_(test_idx, test_idx)], data.subset(test_idx))

    if len(grid) > 1:
        best = k_fold_cv(data, fit_fn, score_fn, grid, k=cfg.cv_folds, seed=cfg.seed)
    else:
        best = grid[0]
    result = fit_iw_krnl(data, m, best[0], best[1], centers_for(np.arange(data.n)), scale)
    return result


# --------------------------------------------------------------------------
# linear IV baselines
# --------------------------------------------------------------------------

def _standardise_columns(a):
    a = np.asarray(a, dtype=float)
    out = a.copy()
    for k in range(a.shape[1]):
        col = a[:, k]
        sd = col.std()
        if sd > 0:
            out[:, k] = (col - col.mean()) / sd
        else:
            out[:, k] = 1.0
    return out


def fit_iv_just(data: Dataset, min_strength: float = 1e-2) -> NDArray:
    """Just-identified IV ``((1/n) sum Z X')^{-1} (1/n) sum Z Y`` with a constant column.

    Returns ``(intercept, slopes...)``.  Raises :class:`WeakInstrumentError`
    when the smallest singular value of the standardised cross-moment matrix
    (for a single regressor, ``|corr(X, Z)|``) falls below ``min_strength``.
    """
    n = data.n
    xa = np.hstack([np.ones((n, 1)), data.x])
    za = np.hstack([np.ones((n, 1)), data.z])
    if xa.shape[1] != za.shape[1]:
        raise ValueError(f"just-identified IV needs d_x == d_z, got {data.d_x} and {data.d_z}")
    strength = np.linalg.svd(_standardise_columns(za).T @ _standardise_columns(xa) / n,
                             compute_uv=False)[-1]
    if strength < min_strength:
        raise WeakInstrumentError(
            f"instrument cross-moment matrix is near singular (strength {strength:.3g} < {min_strength})"
        )
    return np.linalg.solve(za.T @ xa / n, za.T @ data.y / n)


def two_stage_least_squares(y, regressors, instruments) -> Tuple[NDArray, NDArray]:
    """Textbook 2SLS.  Returns ``(coef, fitted_y)``.

    First stage projects every regressor column on the instrument columns;
    the second stage is OLS of ``y`` on those projections.
    """
    y = np.asarray(y, dtype=float)
    regressors = np.asarray(regressors, dtype=float)
    instruments = np.asarray(instruments, dtype=float)
    if instruments.shape[1] < regressors.shape[1]:
        raise SingularSystemError(
            f"{instruments.shape[1]} instruments cannot identify {regressors.shape[1]} coefficients"
        )
    pi, _, rank_z, _ = np.linalg.lstsq(instruments, regressors, rcond=None)
    if rank_z < instruments.shape[1]:
        raise SingularSystemError("first stage: instrument matrix is rank deficient")
    x_hat = instruments @ pi
    coef, _, rank_x, _ = np.linalg.lstsq(x_hat, y, rcond=None)
    if rank_x < regressors.shape[1]:
        raise SingularSystemError("second stage: projected regressors are rank deficient")
    return coef, x_hat @ coef


def fit_2sls(data: Dataset, sieve_degree: int = 1) -> NDArray:
    """Polynomial-sieve 2SLS of degree ``k``.

    Regressors are ``1, X, .., X^k`` and instruments ``1, Z, .., Z^k`` (powers
    column-wise).  Returns the coefficient vector in that order.
    """
    if sieve_degree not in (1, 2, 3):
        raise ValueError("sieve_degree must be 1, 2 or 3")
    coef, _ = two_stage_least_squares(
        data.y, polynomial_features(data.x, sieve_degree), polynomial_features(data.z, sieve_degree)
    )
    return coef


# --------------------------------------------------------------------------
# dispatcher
# --------------------------------------------------------------------------

def fit_method(data: Dataset, cfg: EstimatorConfig, ratio=None) -> FitResult:
    """Fit ``cfg.method``; importance-weighted methods take a ratio model or matrix."""
    start = time.perf_counter()
    method = cfg.method
    if method == Method.IW_MM:
        result = fit_iwmm(data, ratio, cfg=cfg)
    elif method == Method.IW_LS:
        result = fit_iwls(data, ratio, cfg=cfg)
    elif method == Method.LS:
        result = fit_ls(data, cfg=cfg)
    elif method == Method.IW_KRNL:
        result = fit_iw_krnl_cv(data, ratio, cfg)
    elif method == Method.IV_JUST:
        coef = fit_iv_just(data)
        model = PolynomialModel(coef, 1, data.d_x)
        result = FitResult(model, np.array([np.mean((data.y - model.predict(data.x)) ** 2)]),
                           {}, method)
    else:
        coef = fit_2sls(data, cfg.sieve_degree)
        model = PolynomialModel(coef, cfg.sieve_degree, data.d_x)
        result = FitResult(model, np.array([np.mean((data.y - model.predict(data.x)) ** 2)]),
                           {"sieve_degree": float(cfg.sieve_degree)}, method)
    diagnostics = dict(result.diagnostics)
    diagnostics["fit_seconds"] = time.perf_counter() - start
    return dataclasses.replace(result, diagnostics=diagnostics)
