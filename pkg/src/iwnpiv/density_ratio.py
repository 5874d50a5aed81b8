"""Direct least-squares estimation of the conditional density ratio.

The target is ``r*(w | z) = p(w, z) / (p(w) p(z))`` with ``w = (y, x)``.  The
fitted network minimises the empirical least-squares importance-fitting risk

    -(1/n) sum_i r(W_i | Z_i) + (1 / 2n^2) sum_j sum_i r(W_i | Z_j)^2

whose population minimiser is ``r*``.  Outputs pass through a softplus link
and are clipped to ``[output_floor, cap]``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from .datagen import Dataset
from .models import DimensionError, MlpModel
from .optimize import OptConfig, OptimizationError, k_fold_cv, minimize

logger = logging.getLogger(__name__)

_UNIT_BIAS = float(np.log(np.e - 1.0))  # softplus(_UNIT_BIAS) == 1


def softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    from scipy.special import expit

    return expit(a)


class FitFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class RatioModel:
    """Network over ``(y, x, z)`` returning a ratio in ``[output_floor, cap]``."""

    net: MlpModel
    d_w: int
    output_floor: float = 1e-6
    cap: float = 20.0

    def __post_init__(self):
        if not 0 < self.output_floor < self.cap:
            raise ValueError("need 0 < output_floor < cap")
        if self.net.layer_dims[-1] != 1:
            raise DimensionError("ratio network must have a scalar output")
        if not 0 < self.d_w < self.net.d_in:
            raise DimensionError(f"d_w={self.d_w} incompatible with input size {self.net.d_in}")

    @property
    def d_z(self) -> int:
        return self.net.d_in - self.d_w

    def link(self, a):
        return np.clip(softplus(a), self.output_floor, self.cap)

    def link_grad(self, a):
        sp = softplus(a)
        return np.where((sp > self.output_floor) & (sp < self.cap), _sigmoid(a), 0.0)

    def evaluate(self, w, z) -> NDArray:
        """Row-wise ratios ``r(w_k | z_k)`` for aligned batches."""
        w = np.asarray(w, dtype=float).reshape(-1, self.d_w)
        z = np.asarray(z, dtype=float).reshape(-1, self.d_z)
        return self.link(self.net.raw(np.hstack([w, z]))[:, 0])

    def ratio_matrix(self, w, z, dtype=np.float64, max_block_bytes: int = 4 * 2**20) -> NDArray:
        """``M[i, j] = r(w_i | z_j)`` for every pair, computed block-wise.

        The first layer is split into its ``w`` and ``z`` parts.  Writing the
        leaky ReLU as ``alpha * h + (1 - alpha) * relu(h)`` also makes the
        linear half of the second layer separable, so each pair costs one
        ReLU pass and the remaining hidden layers.
        """
        w = np.asarray(w, dtype=float).reshape(-1, self.d_w)
        z = np.asarray(z, dtype=float).reshape(-1, self.d_z)
        net = self.net
        shift, scale = net.in_shift, net.in_scale
        w_std = (w - shift[: self.d_w]) / scale[: self.d_w]
        z_std = (z - shift[self.d_w:]) / scale[self.d_w:]
        w1 = net.weights[0]
        part_w = w_std @ w1[: self.d_w]
        part_z = z_std @ w1[self.d_w:] + net.biases[0]
        n_w, n_z = w.shape[0], z.shape[0]
        out = np.empty((n_w, n_z), dtype=dtype)
        if len(net.weights) == 1:
            out[:] = self.link(part_w[:, 0][:, None] + part_z[:, 0][None, :])
            return out
        alpha = net.leakiness
        w2, b2 = net.weights[1], net.biases[1]
        lin_w = (alpha * part_w @ w2).astype(dtype)
        lin_z = (alpha * part_z @ w2 + b2).astype(dtype)
        relu_w2 = ((1.0 - alpha) * w2).astype(dtype)
        part_w = part_w.astype(dtype)
        part_z = part_z.astype(dtype)
        rest_w = [wk.astype(dtype) for wk in net.weights[2:]]
        rest_b = [bk.astype(dtype) for bk in net.biases[2:]]
        alpha_t = np.dtype(dtype).type(alpha)
        width = max(net.layer_dims[1:])
        rows = max(1, int(max_block_bytes // (np.dtype(dtype).itemsize * n_z * width)))
        h1, h2 = w2.shape
        for start in range(0, n_w, rows):
            stop = min(start + rows, n_w)
            h = part_w[start:stop, None, :] + part_z[None, :, :]
            np.maximum(h, 0, out=h)
            g = (h.reshape(-1, h1) @ relu_w2).reshape(stop - start, n_z, h2)
            g += lin_w[start:stop, None, :]
            g += lin_z[None, :, :]
            g = g.reshape(-1, h2)
            for wk, bk in zip(rest_w, rest_b):
                np.maximum(g, alpha_t * g, out=g)
                g = g @ wk
                g += bk
            out[start:stop] = self.link(g[:, 0]).reshape(stop - start, n_z)
        return out

    def to_dict(self) -> dict:
        return {
            "family": "ratio_mlp",
            "d_w": self.d_w,
            "output_floor": self.output_floor,
            "cap": self.cap,
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RatioModel":
        return cls(MlpModel.from_dict(doc["net"]), doc["d_w"], doc["output_floor"], doc["cap"])


@dataclass(frozen=True)
class ConstantRatio:
    """``r(w | z) = value`` everywhere; handy as a reference weighting."""

    value: float = 1.0

    def evaluate(self, w, z) -> NDArray:
        return np.full(np.asarray(w).shape[0], float(self.value))

    def ratio_matrix(self, w, z, dtype=np.float64) -> NDArray:
        return np.full((np.asarray(w).shape[0], np.asarray(z).shape[0]), self.value, dtype=dtype)


@dataclass(frozen=True)
class RatioFitConfig:
    hidden: Tuple[int, ...] = (128, 128)
    leakiness: float = 0.2
    epochs: int = 200
    batch_pairs: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    cv_folds: int = 5
    cap: float = 20.0
    output_floor: float = 1e-6
    val_fraction: float = 0.2
    patience: int = 20
    max_val_pairs: int = 10_000
    max_check_pairs: int = 250_000

    def __post_init__(self):
        positive = (self.epochs, self.batch_pairs, self.cv_folds, self.patience)
        if min(positive) < 1 or not self.learning_rate > 0 or not self.cap > 0:
            raise ValueError("epochs, batch_pairs, cv_folds, patience, learning_rate and cap must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def replace(self, **changes) -> "RatioFitConfig":
        return dataclasses.replace(self, **changes)


def pair_matrix(r, data: Dataset, dtype=np.float64) -> NDArray:
    """``M[i, j] = r(W_i | Z_j)``; ``r`` may already be such a matrix."""
    if isinstance(r, np.ndarray):
        if r.shape != (data.n, data.n):
            raise DimensionError(f"ratio matrix has shape {r.shape}, expected {(data.n, data.n)}")
        return r
    return r.ratio_matrix(data.w, data.z, dtype=dtype)


def lsif_empirical_risk(r, data: Dataset) -> float:
    """``-(1/n) sum_i r(W_i|Z_i) + (1/(2 n^2)) sum_{i,j} r(W_i|Z_j)^2`` (diagonal included)."""
    m = pair_matrix(r, data)
    return float(-np.mean(np.diag(m)) + 0.5 * np.mean(np.square(m, dtype=np.float64)))


def ratio_mass_check(r, data: Dataset) -> float:
    """Average ratio over all ``(W_i, Z_j)`` pairs; close to 1 for a good fit."""
    return float(np.mean(pair_matrix(r, data), dtype=np.float64))


def evaluate_ratio(r: RatioModel, w, z) -> float:
    """Ratio at one point ``w = (y, x)``, ``z``."""
    w = np.asarray(w, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    if w.size != r.d_w or z.size != r.d_z:
        raise DimensionError(f"expected |w|={r.d_w}, |z|={r.d_z}; got {w.size}, {z.size}")
    return float(r.evaluate(w[None, :], z[None, :])[0])


def init_ratio_model(w, z, cfg: RatioFitConfig) -> RatioModel:
    """Unit-ratio starting point: He-initialised hidden layers, zero last layer."""
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    inputs = np.hstack([w, z])
    scale = inputs.std(axis=0)
    scale[scale < 1e-12] = 1.0
    dims = (inputs.shape[1],) + tuple(cfg.hidden) + (1,)
    net = MlpModel.init(dims, seed=cfg.seed, leakiness=cfg.leakiness,
                        in_shift=inputs.mean(axis=0), in_scale=scale)
    weights = list(net.weights)
    biases = list(net.biases)
    weights[-1] = np.zeros_like(weights[-1])
    biases[-1] = np.full_like(biases[-1], _UNIT_BIAS)
    net = MlpModel(net.layer_dims, tuple(weights), tuple(biases), net.leakiness,
                   net.in_shift, net.in_scale)
    return RatioModel(net, w.shape[1], cfg.output_floor, cfg.cap)


class _PairSample:
    """Fixed joint rows plus a fixed set of (i, j) pairs for risk estimates."""

    def __init__(self, w, z, max_pairs, rng):
        n = w.shape[0]
        self.w, self.z = w, z
        if n * n <= max_pairs:
            ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
            ii, jj = ii.ravel(), jj.ravel()
        else:
            ii = rng.integers(0, n, size=max_pairs)
            jj = rng.integers(0, n, size=max_pairs)
        self.joint = np.hstack([w, z])
        self.pairs = np.hstack([w[ii], z[jj]])

    def risk(self, model: RatioModel) -> float:
        rj = model.link(model.net.raw(self.joint)[:, 0])
        rp = model.link(model.net.raw(self.pairs)[:, 0])
        return float(-rj.mean() + 0.5 * np.mean(rp**2))


def _fit_ratio_arrays(w, z, cfg: RatioFitConfig):
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    n = w.shape[0]
    if n < 2:
        raise ValueError("need at least 2 observations")
    rng = np.random.default_rng(cfg.seed)
    model0 = init_ratio_model(w, z, cfg)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    if n_val >= 2 and n - n_val >= 2:
        val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    else:
        val_idx = train_idx = np.arange(n)
    wt, zt = w[train_idx], z[train_idx]
    n_tr = train_idx.size
    monitor = _PairSample(w[val_idx], z[val_idx], cfg.max_val_pairs, rng)
    batch = cfg.batch_pairs

    def value(theta):
        return monitor.risk(dataclasses.replace(model0, net=model0.net.with_params(theta))), None

    def stochastic_gradient(theta, step_rng):
        model = dataclasses.replace(model0, net=model0.net.with_params(theta))
        i_joint = step_rng.integers(0, n_tr, size=batch)
        i_pair = step_rng.integers(0, n_tr, size=batch)
        j_pair = step_rng.integers(0, n_tr, size=batch)
        inputs = np.vstack([
            np.hstack([wt[i_joint], zt[i_joint]]),
            np.hstack([wt[i_pair], zt[j_pair]]),
        ])
        raw, (acts, pre) = model.net._forward(inputs)
        a = raw[:, 0]
        r = model.link(a)
        d_r = np.concatenate([np.full(batch, -1.0 / batch), r[batch:] / batch])
        delta = (d_r * model.link_grad(a))[:, None]
        return model.net._backward_raw(acts, pre, delta)

    opt = OptConfig(
        max_epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        batch_size=batch,
        tolerance=1e-4,
        patience=cfg.patience,
        seed=cfg.seed + 1,
    )
    steps = max(1, n_tr // batch)
    try:
        theta, trace = minimize(value, model0.net.params, opt,
                                stochastic_gradient=stochastic_gradient, steps_per_epoch=steps)
    except OptimizationError as err:
        raise FitFailedError(f"ratio fit diverged: {err}") from err
    fitted = dataclasses.replace(model0, net=model0.net.with_params(theta))

    # never hand back something worse than the constant-one ratio; exact on all
    # n^2 pairs when that is at most max_check_pairs, sampled otherwise
    check = _PairSample(w, z, cfg.max_check_pairs, np.random.default_rng(cfg.seed + 2))
    fallback = check.risk(fitted) > check.risk(model0)
    if fallback:
        logger.warning("ratio fit did not beat the unit ratio on training pairs; returning it")
        fitted = model0
    return fitted, trace, {"fallback_to_unit": float(fallback), "epochs": float(len(trace))}


def fit_ratio(data: Dataset, cfg: RatioFitConfig = RatioFitConfig()) -> RatioModel:
    """Fit ``r(y, x | z)`` by stochastic minimisation of the LSIF risk.

    Each step draws ``batch_pairs`` joint rows ``(W_i, Z_i)`` and the same
    number of uniformly random pairs ``(W_i, Z_j)``, an unbiased estimate of
    the double-sum risk.  A held-out ``val_fraction`` of rows drives early
    stopping through its own LSIF risk.
    """
    return _fit_ratio_arrays(data.w, data.z, cfg)[0]


def fit_ratio_with_trace(data: Dataset, cfg: RatioFitConfig = RatioFitConfig()):
    """Like :func:`fit_ratio` but also returns the validation-risk trace and a info dict."""
    return _fit_ratio_arrays(data.w, data.z, cfg)


def select_ratio_config(data: Dataset, base: RatioFitConfig, grid: Sequence[dict]) -> RatioFitConfig:
    """K-fold choice among ``base.replace(**point)`` by held-out LSIF risk."""
    w, z = data.w, data.z

    def fit_fn(point, train_idx):
        return _fit_ratio_arrays(w[train_idx], z[train_idx], base.replace(**point))[0]

    def score_fn(model, test_idx):
        return lsif_empirical_risk(model, data.subset(test_idx))

    best = k_fold_cv(data, fit_fn, score_fn, grid, k=base.cv_folds, seed=base.seed)
    return base.replace(**best)
