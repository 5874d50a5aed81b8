"""Deterministic optimisation primitives shared by every estimator."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from .models import ParamVector

logger = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    """The objective or its gradient became NaN/Inf."""


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class OptConfig:
    """Adam settings plus early stopping on the per-epoch objective.

    Training stops once the best objective has improved by less than a
    relative ``tolerance`` over the last ``patience`` epochs.
    """

    max_epochs: int = 1000
    learning_rate: float = 1e-3
    batch_size: int = 256
    tolerance: float = 1e-6
    patience: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs, batch_size and patience must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.tolerance < 1:
            raise ValueError("tolerance must lie in (0, 1)")


def minimize(
    objective_and_gradient: Callable,
    init,
    cfg: OptConfig,
    *,
    stochastic_gradient: Optional[Callable] = None,
    steps_per_epoch: int = 1,
):
    """Adam descent returning the best parameters seen and the per-epoch trace.

    Parameters
    ----------
    objective_and_gradient : callable
        ``theta -> (value, grad)`` on the full objective.  In stochastic mode
        only the value is used (once per epoch) and ``grad`` may be ``None``.
    init : ParamVector or array
        Starting point; the return value has the same type.
    stochastic_gradient : callable, optional
        ``(theta, rng) -> grad``.  When given, each epoch takes
        ``steps_per_epoch`` steps along these gradients.

    Returns
    -------
    best, trace
        ``trace[k]`` is the objective at the start of epoch ``k``; the last
        entry is the objective at the final iterate.
    """
    layout = init.layout if isinstance(init, ParamVector) else None
    theta = np.array(init.values if layout is not None else init, dtype=float).reshape(-1)
    rng = np.random.default_rng(cfg.seed)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t = 0

    def check(value, where):
        if not np.isfinite(value):
            raise OptimizationError(f"non-finite objective {value!r} at {where}")

    best_value, best_theta = np.inf, theta.copy()
    trace, best_hist = [], []

    def adam_step(g):
        nonlocal t
        t += 1
        m[:] = cfg.beta1 * m + (1 - cfg.beta1) * g
        v[:] = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1**t)
        vhat = v / (1 - cfg.beta2**t)
        theta[:] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)

    for epoch in range(cfg.max_epochs):
        value, grad = objective_and_gradient(theta)
        value = float(value)
        check(value, f"epoch {epoch}")
        trace.append(value)
        if value < best_value:
            best_value, best_theta = value, theta.copy()
        best_hist.append(best_value)
        if epoch >= cfg.patience:
            old = best_hist[epoch - cfg.patience]
            if old - best_value <= cfg.tolerance * max(abs(old), 1e-300):
                logger.debug("early stop at epoch %d (best %.6g)", epoch, best_value)
                break
        if stochastic_gradient is None:
            grad = np.asarray(grad, dtype=float)
            if not np.all(np.isfinite(grad)):
                raise OptimizationError(f"non-finite gradient at epoch {epoch}")
            adam_step(grad)
        else:
            for _ in range(steps_per_epoch):
                grad = np.asarray(stochastic_gradient(theta, rng), dtype=float)
                if not np.all(np.isfinite(grad)):
                    raise OptimizationError(f"non-finite stochastic gradient at epoch {epoch}")
                adam_step(grad)
    else:
        value = float(objective_and_gradient(theta)[0])
        check(value, "final iterate")
        trace.append(value)
        if value < best_value:
            best_value, best_theta = value, theta.copy()

    result = ParamVector(best_theta, layout) if layout is not None else best_theta
    return result, np.asarray(trace)


def solve_ridge_normal_equations(A, b, ridge: float = 0.0, penalty_mask=None) -> NDArray:
    """Solve ``(A'A + ridge * diag(mask)) w = A'b`` by Cholesky.

    The residual is checked against ``1e-8 * (1 + ||A'b||_inf)`` after up to
    two rounds of iterative refinement.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    p = A.shape[1]
    mask = np.ones(p) if penalty_mask is None else np.asarray(penalty_mask, dtype=float)
    lhs = A.T @ A
    lhs[np.diag_indices(p)] += ridge * mask
    rhs = A.T @ b
    try:
        factor = scipy.linalg.cho_factor(lhs, check_finite=True)
    except np.linalg.LinAlgError:
        eig_min = float(np.linalg.eigvalsh(lhs)[0])
        raise SingularSystemError(
            f"normal equations are not positive definite (smallest eigenvalue {eig_min:.3g}); "
            f"increase ridge above {max(-eig_min, 0.0) + 1e-8:.3g} or penalise every coefficient"
        ) from None
    w = scipy.linalg.cho_solve(factor, rhs)
    bound = 1e-8 * (1.0 + np.max(np.abs(rhs), initial=0.0))
    for _ in range(2):
        resid = rhs - lhs @ w
        if np.max(np.abs(resid), initial=0.0) < bound:
            break
        w = w + scipy.linalg.cho_solve(factor, resid)
    else:
        resid = rhs - lhs @ w
        if np.max(np.abs(resid), initial=0.0) >= bound:
            raise SingularSystemError(
                f"normal equations too ill-conditioned (residual {np.max(np.abs(resid)):.3g}); "
                "increase ridge"
            )
    return w


def kfold_indices(n: int, k: int, seed: int = 0) -> list:
    """Random disjoint cover of ``range(n)`` by ``k`` folds (sorted within fold)."""
    if k < 2 or n < k:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def k_fold_cv(
    data,
    fit_fn: Callable,
    score_fn: Callable,
    grid: Sequence,
    k: int = 5,
    seed: int = 0,
    return_scores: bool = False,
):
    """Pick the grid point with the lowest mean held-out score.

    ``fit_fn(point, train_idx)`` returns a fitted object and
    ``score_fn(fitted, test_idx)`` a float.  ``data`` is anything with a
    length (or an int giving ``n``).  Points whose fit raises score ``inf``.
    Ties go to the earliest grid point.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    n = data if isinstance(data, (int, np.integer)) else getattr(data, "n", None) or len(data)
    folds = kfold_indices(int(n), k, seed)
    all_idx = np.arange(int(n))
    scores = []
    for point in grid:
        fold_scores = []
        for test_idx in folds:
            train_idx = np.setdiff1d(all_idx, test_idx, assume_unique=True)
            try:
                fitted = fit_fn(point, train_idx)
                fold_scores.append(float(score_fn(fitted, test_idx)))
            except (np.linalg.LinAlgError, OptimizationError) as err:
                logger.debug("cv point %r failed: %s", point, err)
                fold_scores.append(np.inf)
        score = float(np.mean(fold_scores))
        scores.append(score if np.isfinite(score) else np.inf)
    best = int(np.argmin(scores))
    if return_scores:
        return grid[best], scores
    return grid[best]
