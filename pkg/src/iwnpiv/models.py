"""Hypothesis classes for the structural function and their parameter plumbing.

Three families are provided: a Gaussian-kernel linear-in-parameter model, a
dense leaky-ReLU network with hand-written backpropagation, and the
polynomial sieve used by the 2SLS baselines.  All of them expose a vectorised
``predict(x)``; the two trainable families additionally expose ``params``,
``with_params`` and a batched vector-Jacobian product ``vjp`` used by the
optimisers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.distance import cdist


class DimensionError(ValueError):
    pass


# --------------------------------------------------------------------------
# flat parameter vectors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamVector:
    """All trainable parameters as one flat vector plus the shapes to undo it."""

    values: NDArray
    layout: Tuple[Tuple[int, ...], ...]

    def __len__(self):
        return self.values.size


def flatten(arrays: Sequence) -> ParamVector:
    arrays = [np.asarray(a, dtype=float) for a in arrays]
    values = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
    return ParamVector(values, tuple(a.shape for a in arrays))


def unflatten(vec: ParamVector | NDArray, layout=None) -> list:
    if isinstance(vec, ParamVector):
        values, layout = vec.values, vec.layout
    else:
        values = np.asarray(vec, dtype=float)
    sizes = [int(np.prod(s)) for s in layout]
    if sum(sizes) != values.size:
        raise DimensionError(f"vector of length {values.size} does not fit layout {layout}")
    out, start = [], 0
    for shape, size in zip(layout, sizes):
        out.append(values[start:start + size].reshape(shape).copy())
        start += size
    return out


def _as_batch(x, d: int) -> Tuple[NDArray, bool]:
    """Coerce ``x`` to an ``(n, d)`` batch; the flag marks a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 and d == 1:
        return x.reshape(1, 1), True
    if x.ndim == 1:
        if x.size == d:
            return x.reshape(1, d), True
        if d == 1:
            return x.reshape(-1, 1), False
    if x.ndim == 2 and x.shape[1] == d:
        return x, False
    raise DimensionError(f"expected inputs with {d} columns, got shape {x.shape}")


# --------------------------------------------------------------------------
# Gaussian kernel model
# --------------------------------------------------------------------------

def kernel_features(x, centers, sigma2: float, input_scale=None) -> NDArray:
    """Gaussian kernel evaluations ``exp(-||x - c_u||^2 / (2 sigma2))``.

    ``x`` may be a single point (returns shape ``(m,)``) or a batch
    ``(n, d)`` (returns ``(n, m)``).
    """
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    centers = np.asarray(centers, dtype=float)
    if centers.ndim == 1:
        centers = centers[:, None]
    xb, single = _as_batch(x, centers.shape[1])
    if input_scale is not None:
        xb = xb / input_scale
        centers = centers / input_scale
    sq = cdist(xb, centers, "sqeuclidean")
    phi = np.exp(-sq / (2.0 * sigma2))
    return phi[0] if single else phi


@dataclass(frozen=True)
class GaussianKernelModel:
    """``f(x) = beta . phi(x; sigma2) + beta0`` over a fixed set of centres."""

    centers: NDArray
    sigma2: float
    beta: NDArray
    beta0: float = 0.0
    input_scale: Optional[NDArray] = None

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float)
        if centers.ndim == 1:
            centers = centers[:, None]
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if beta.size != centers.shape[0]:
            raise DimensionError(f"{beta.size} weights for {centers.shape[0]} centres")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "beta0", float(self.beta0))
        if self.input_scale is not None:
            object.__setattr__(self, "input_scale", np.asarray(self.input_scale, dtype=float))

    @property
    def d_in(self) -> int:
        return self.centers.shape[1]

    def features(self, x) -> NDArray:
        return kernel_features(x, self.centers, self.sigma2, self.input_scale)

    def predict(self, x) -> NDArray:
        xb, _ = _as_batch(x, self.d_in)
        return self.features(xb) @ self.beta + self.beta0

    @property
    def params(self) -> ParamVector:
        return flatten([self.beta, np.array([self.beta0])])

    def with_params(self, vec) -> "GaussianKernelModel":
        values = vec.values if isinstance(vec, ParamVector) else np.asarray(vec, dtype=float)
        return GaussianKernelModel(self.centers, self.sigma2, values[:-1], values[-1], self.input_scale)

    def vjp(self, x, upstream) -> NDArray:
        xb, _ = _as_batch(x, self.d_in)
        upstream = np.asarray(upstream, dtype=float).reshape(-1)
        return np.concatenate([self.features(xb).T @ upstream, [upstream.sum()]])

    def to_dict(self) -> dict:
        return {
            "family": "gaussian_kernel",
            "d_in": self.d_in,
            "sigma2": self.sigma2,
            "centers": self.centers.tolist(),
            "input_scale": None if self.input_scale is None else self.input_scale.tolist(),
            "params": self.params.values.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianKernelModel":
        centers = np.asarray(doc["centers"], dtype=float).reshape(-1, doc["d_in"])
        p = np.asarray(doc["params"], dtype=float)
        return cls(centers, doc["sigma2"], p[:-1], p[-1], doc.get("input_scale"))


# --------------------------------------------------------------------------
# dense leaky-ReLU network
# --------------------------------------------------------------------------

def leaky_relu(a, alpha):
    return np.where(a > 0, a, alpha * a)


@dataclass(frozen=True)
class MlpModel:
    """Fully connected network with leaky-ReLU after every layer but the last.

    Inputs are standardised by the fixed ``in_shift``/``in_scale`` and the raw
    scalar output is mapped back as ``out_scale * raw + out_shift``.  Those
    four affine constants are not trainable.
    """

    layer_dims: Tuple[int, ...]
    weights: Tuple[NDArray, ...]
    biases: Tuple[NDArray, ...]
    leakiness: float = 0.2
    in_shift: Optional[NDArray] = None
    in_scale: Optional[NDArray] = None
    out_shift: float = 0.0
    out_scale: float = 1.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"invalid layer_dims {self.layer_dims}")
        weights = tuple(np.asarray(w, dtype=float) for w in self.weights)
        biases = tuple(np.asarray(b, dtype=float).reshape(-1) for b in self.biases)
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[k], dims[k + 1]) or b.shape != (dims[k + 1],):
                raise DimensionError(f"layer {k} has weight {w.shape} / bias {b.shape}")
        if len(weights) != len(dims) - 1 or len(biases) != len(dims) - 1:
            raise DimensionError("one weight matrix and bias vector per layer expected")
        shift = np.zeros(dims[0]) if self.in_shift is None else np.asarray(self.in_shift, dtype=float)
        scale = np.ones(dims[0]) if self.in_scale is None else np.asarray(self.in_scale, dtype=float)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "in_shift", shift.reshape(dims[0]))
        object.__setattr__(self, "in_scale", scale.reshape(dims[0]))

    @classmethod
    def init(cls, layer_dims, seed: int = 0, leakiness: float = 0.2, **affine) -> "MlpModel":
        """He-style uniform initialisation with zero biases."""
        rng = np.random.default_rng(seed)
        gain = np.sqrt(2.0 / (1.0 + leakiness**2))
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = gain * np.sqrt(3.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(tuple(layer_dims), tuple(weights), tuple(biases), leakiness, **affine)

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    def _forward(self, xb):
        a = (xb - self.in_shift) / self.in_scale
        acts, pre = [a], []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            zk = a @ w + b
            pre.append(zk)
            a = zk if k == last else leaky_relu(zk, self.leakiness)
            acts.append(a)
        return a, (acts, pre)

    def raw(self, x) -> NDArray:
        """Network output before the output affine map, shape ``(n, d_out)``."""
        xb, _ = _as_batch(x, self.d_in)
        return self._forward(xb)[0]

    def predict(self, x) -> NDArray:
        return self.out_scale * self.raw(x)[:, 0] + self.out_shift

    def forward_cache(self, x):
        xb, _ = _as_batch(x, self.d_in)
        out, cache = self._forward(xb)
        return self.out_scale * out[:, 0] + self.out_shift, cache

    def backward(self, cache, upstream) -> NDArray:
        """Sum over the batch of ``upstream_i * d f(x_i) / d params`` (flat)."""
        acts, pre = cache
        delta = (np.asarray(upstream, dtype=float).reshape(-1) * self.out_scale)[:, None]
        return self._backward_raw(acts, pre, delta)

    def _backward_raw(self, acts, pre, delta) -> NDArray:
        n_layers = len(self.weights)
        grads_w = [None] * n_layers
        grads_b = [None] * n_layers
        for k in range(n_layers - 1, -1, -1):
            grads_w[k] = acts[k].T @ delta
            grads_b[k] = delta.sum(axis=0)
            if k > 0:
                delta = delta @ self.weights[k].T
                delta = np.where(pre[k - 1] > 0, delta, self.leakiness * delta)
        parts = []
        for gw, gb in zip(grads_w, grads_b):
            parts.append(gw.ravel())
            parts.append(gb)
        return np.concatenate(parts)

    def vjp(self, x, upstream) -> NDArray:
        _, cache = self.forward_cache(x)
        return self.backward(cache, upstream)

    @property
    def params(self) -> ParamVector:
        arrays = []
        for w, b in zip(self.weights, self.biases):
            arrays.extend([w, b])
        return flatten(arrays)

    def with_params(self, vec) -> "MlpModel":
        arrays = unflatten(vec, self.params.layout)
        return MlpModel(
            self.layer_dims,
            tuple(arrays[0::2]),
            tuple(arrays[1::2]),
            self.leakiness,
            self.in_shift,
            self.in_scale,
            self.out_shift,
            self.out_scale,
        )

    def to_dict(self) -> dict:
        return {
            "family": "mlp",
            "layer_dims": list(self.layer_dims),
            "leakiness": self.leakiness,
            "in_shift": self.in_shift.tolist(),
            "in_scale": self.in_scale.tolist(),
            "out_shift": self.out_shift,
            "out_scale": self.out_scale,
            "params": self.params.values.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpModel":
        dims = tuple(doc["layer_dims"])
        skeleton = cls.init(
            dims,
            leakiness=doc.get("leakiness", 0.2),
            in_shift=np.asarray(doc["in_shift"]),
            in_scale=np.asarray(doc["in_scale"]),
            out_shift=doc.get("out_shift", 0.0),
            out_scale=doc.get("out_scale", 1.0),
        )
        return skeleton.with_params(np.asarray(doc["params"], dtype=float))


# --------------------------------------------------------------------------
# polynomial sieve
# --------------------------------------------------------------------------

def polynomial_features(x, degree: int) -> NDArray:
    """``[1, x, x^2, ..., x^degree]`` with powers taken column-wise, no cross terms."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    cols = [np.ones((x.shape[0], 1))]
    for k in range(1, degree + 1):
        cols.append(x**k)
    return np.hstack(cols)


@dataclass(frozen=True)
class PolynomialModel:
    coef: NDArray
    degree: int
    d_in: int = 1

    def __post_init__(self):
        object.__setattr__(self, "coef", np.asarray(self.coef, dtype=float).reshape(-1))
        if self.coef.size != 1 + self.degree * self.d_in:
            raise DimensionError(
                f"{self.coef.size} coefficients for degree {self.degree} in {self.d_in} inputs"
            )

    def predict(self, x) -> NDArray:
        xb, _ = _as_batch(x, self.d_in)
        return polynomial_features(xb, self.degree) @ self.coef

    @property
    def params(self) -> ParamVector:
        return flatten([self.coef])

    def with_params(self, vec) -> "PolynomialModel":
        values = vec.values if isinstance(vec, ParamVector) else np.asarray(vec, dtype=float)
        return PolynomialModel(values, self.degree, self.d_in)

    def vjp(self, x, upstream) -> NDArray:
        xb, _ = _as_batch(x, self.d_in)
        return polynomial_features(xb, self.degree).T @ np.asarray(upstream, dtype=float).reshape(-1)

    def to_dict(self) -> dict:
        return {"family": "polynomial", "degree": self.degree, "d_in": self.d_in,
                "params": self.coef.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "PolynomialModel":
        return cls(np.asarray(doc["params"]), doc["degree"], doc["d_in"])


# --------------------------------------------------------------------------
# single-point helpers
# --------------------------------------------------------------------------

def forward(model, x) -> float:
    """``f(x)`` for a single point ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != model.d_in:
        raise DimensionError(f"model takes {model.d_in} inputs, got {x.size}")
    return float(model.predict(x[None, :])[0])


def grad_params(model, x) -> ParamVector:
    """Gradient of ``forward(model, x)`` with respect to every trainable parameter."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != model.d_in:
        raise DimensionError(f"model takes {model.d_in} inputs, got {x.size}")
    g = model.vjp(x[None, :], np.ones(1))
    return ParamVector(g, model.params.layout)


# --------------------------------------------------------------------------
# JSON serialisation
# --------------------------------------------------------------------------

def model_from_dict(doc: dict):
    family = doc.get("family")
    if family == "mlp":
        return MlpModel.from_dict(doc)
    if family == "gaussian_kernel":
        return GaussianKernelModel.from_dict(doc)
    if family == "polynomial":
        return PolynomialModel.from_dict(doc)
    if family == "ratio_mlp":
        from .density_ratio import RatioModel

        return RatioModel.from_dict(doc)
    raise ValueError(f"unknown model family {family!r}")


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
