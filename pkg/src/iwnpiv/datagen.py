"""Seeded synthetic data-generating processes with known structural functions.

Every generator is a pure function of its :class:`DgpConfig`.  Uniform draws
come from numpy's PCG64 bit generator and normal draws are produced by the
inverse normal CDF (``scipy.special.ndtri``) applied to those uniforms, so a
given seed reproduces the same arrays wherever PCG64 and ``ndtri`` agree.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.special import ndtri


class Family(str, Enum):
    NEWEY_POWELL = "NeweyPowell"
    NEWEY_POWELL_EXTENDED = "NeweyPowellExtended"
    AI_CHEN = "AiChen"
    AI_CHEN_EXTENDED = "AiChenExtended"
    DEMAND_DESIGN = "DemandDesign"


@dataclass(frozen=True)
class Dataset:
    """Observed sample ``(y, x, z)`` plus the hidden structural values.

    ``x`` and ``z`` are always 2-D; ``f_true`` is ``None`` for real data.
    """

    y: NDArray
    x: NDArray
    z: NDArray
    f_true: Optional[NDArray] = None
    seed: int = 0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if z.ndim == 1:
            z = z[:, None]
        n = y.shape[0]
        if n < 2:
            raise ValueError(f"a dataset needs at least 2 rows, got {n}")
        if x.shape[0] != n or z.shape[0] != n:
            raise ValueError(
                f"row mismatch: y has {n}, x has {x.shape[0]}, z has {z.shape[0]}"
            )
        arrays = [y, x, z]
        f_true = self.f_true
        if f_true is not None:
            f_true = np.asarray(f_true, dtype=float).reshape(-1)
            if f_true.shape[0] != n:
                raise ValueError(f"f_true has {f_true.shape[0]} rows, expected {n}")
            arrays.append(f_true)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("dataset contains non-finite values")
        for a in arrays:
            a.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "f_true", f_true)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    @property
    def w(self) -> NDArray:
        """Stacked ``(y, x)`` block that the density ratio conditions on."""
        return np.column_stack([self.y, self.x])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        f_true = None if self.f_true is None else self.f_true[idx]
        return Dataset(self.y[idx], self.x[idx], self.z[idx], f_true, self.seed)


@dataclass(frozen=True)
class DgpConfig:
    family: Family = Family.NEWEY_POWELL
    n: int = 1000
    seed: int = 0
    r_coef: float = 0.9
    gamma0: float = 1.0
    rho: float = 0.5
    price_noise_scale: float = 1.0
    error_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.price_noise_scale <= 0 or self.error_scale <= 0:
            raise ValueError("noise scales must be positive")
        if not np.isfinite(self.r_coef) or not np.isfinite(self.gamma0):
            raise ValueError("r_coef and gamma0 must be finite")

    def replace(self, **changes) -> "DgpConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# random primitives
# --------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, size) -> NDArray:
    # open interval (0, 1) so the inverse CDF stays finite
    bits = rng.integers(0, 2**53, size=size, dtype=np.uint64)
    return (bits.astype(np.float64) + 0.5) / 2.0**53


def _standard_normal(rng: np.random.Generator, size) -> NDArray:
    return ndtri(_uniform(rng, size))


def _correlated_normal(rng: np.random.Generator, n: int, cov: NDArray) -> NDArray:
    chol = np.linalg.cholesky(cov)
    return _standard_normal(rng, (n, cov.shape[0])) @ chol.T


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------------------
# structural functions
# --------------------------------------------------------------------------

def f_star_newey(x):
    """``ln(|x - 1| + 1) * sgn(x - 1)`` with ``sgn(0) = 0``."""
    x = np.asarray(x, dtype=float)
    return np.log(np.abs(x - 1.0) + 1.0) * np.sign(x - 1.0)


def h_ai_chen(u):
    """Logistic link ``exp(u) / (1 + exp(u))``."""
    from scipy.special import expit

    return expit(np.asarray(u, dtype=float))


def h_demand(t):
    """Seasonality curve of the airline demand design."""
    t = np.asarray(t, dtype=float)
    return 2.0 * ((t - 5.0) ** 4 / 600.0 + np.exp(-4.0 * (t - 5.0) ** 2) + t / 10.0 - 2.0)


def f_star_ai_chen(x, gamma0: float = 1.0):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return gamma0 * x[:, 0] + h_ai_chen(x[:, 1])


def f_star_demand(x):
    """Demand response for regressors ordered ``(P, T, S)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p, t, s = x[:, 0], x[:, 1], x[:, 2]
    return 100.0 + (10.0 + p) * s * h_demand(t) - 2.0 * p


def structural_function(cfg: DgpConfig):
    """Return a vectorised ``x -> f*(x)`` for ``cfg.family``."""
    fam = cfg.family
    if fam in (Family.NEWEY_POWELL, Family.NEWEY_POWELL_EXTENDED):
        return lambda x: f_star_newey(np.asarray(x, dtype=float).reshape(len(x), -1)[:, 0])
    if fam in (Family.AI_CHEN, Family.AI_CHEN_EXTENDED):
        return lambda x: f_star_ai_chen(x, cfg.gamma0)
    return f_star_demand


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------

def gen_newey_powell(cfg: DgpConfig) -> Dataset:
    if cfg.family not in (Family.NEWEY_POWELL, Family.NEWEY_POWELL_EXTENDED):
        raise ValueError(f"gen_newey_powell cannot generate family {cfg.family.value}")
    rng = _rng(cfg.seed)
    n_iv = 1 if cfg.family == Family.NEWEY_POWELL else 4
    cov = np.eye(2 + n_iv)
    cov[0, 1] = cov[1, 0] = 0.5
    draws = _correlated_normal(rng, cfg.n, cov)
    eps, u, z = draws[:, 0], draws[:, 1], draws[:, 2:]
    x = z.sum(axis=1) + u
    f = f_star_newey(x)
    return Dataset(f + eps, x[:, None], z, f, cfg.seed)


def gen_ai_chen(cfg: DgpConfig) -> Dataset:
    if cfg.family not in (Family.AI_CHEN, Family.AI_CHEN_EXTENDED):
        raise ValueError(f"gen_ai_chen cannot generate family {cfg.family.value}")
    rng = _rng(cfg.seed)
    n = cfg.n
    x1 = _uniform(rng, n)
    v = _uniform(rng, n)
    scale = x1**2 + v**2
    eps = np.sqrt(scale) * _standard_normal(rng, n)
    if cfg.family == Family.AI_CHEN:
        u = np.sqrt(scale) * _standard_normal(rng, n)
        x2 = x1 + v + cfg.r_coef * eps + u
        z = np.column_stack([x1, v])
    else:
        cov_w = np.full((3, 3), 0.3)
        np.fill_diagonal(cov_w, 1.0)
        w_parts = _correlated_normal(rng, n, cov_w)
        w = w_parts.sum(axis=1)
        u = np.sqrt(scale + np.abs(w)) * _standard_normal(rng, n)
        x2 = x1 + v + w + cfg.r_coef * eps + u
        z = np.column_stack([x1, v, w_parts])
    x = np.column_stack([x1, x2])
    f = f_star_ai_chen(x, cfg.gamma0)
    return Dataset(f + eps, x, z, f, cfg.seed)


def gen_demand_design(cfg: DgpConfig, return_noise: bool = False):
    """Airline demand design; regressors are ``(P, T, S)``, instruments ``(C, T, S)``.

    With ``return_noise=True`` the raw error draw ``eps`` and price shock ``V``
    are returned alongside the dataset.
    """
    if cfg.family != Family.DEMAND_DESIGN:
        raise ValueError(f"gen_demand_design cannot generate family {cfg.family.value}")
    rng = _rng(cfg.seed)
    n = cfg.n
    v = _standard_normal(rng, n)
    c = _standard_normal(rng, n)
    t = 10.0 * _uniform(rng, n)
    s = np.floor(7.0 * _uniform(rng, n)) + 1.0
    eps = cfg.rho * v + np.sqrt(1.0 - cfg.rho**2) * _standard_normal(rng, n)
    ht = h_demand(t)
    p = 25.0 + (c + 3.0) * ht + cfg.price_noise_scale * v
    x = np.column_stack([p, t, s])
    f = f_star_demand(x)
    data = Dataset(f + cfg.error_scale * eps, x, np.column_stack([c, t, s]), f, cfg.seed)
    if return_noise:
        return data, eps, v
    return data


def generate(cfg: DgpConfig) -> Dataset:
    """Dispatch on ``cfg.family``."""
    if cfg.family in (Family.NEWEY_POWELL, Family.NEWEY_POWELL_EXTENDED):
        return gen_newey_powell(cfg)
    if cfg.family in (Family.AI_CHEN, Family.AI_CHEN_EXTENDED):
        return gen_ai_chen(cfg)
    return gen_demand_design(cfg)


# --------------------------------------------------------------------------
# CSV persistence
# --------------------------------------------------------------------------

def write_csv(data: Dataset, path) -> None:
    """Write ``y,x1..xd,z1..zd[,f_true]`` with a header row."""
    header = ["y"] + [f"x{k + 1}" for k in range(data.d_x)] + [f"z{k + 1}" for k in range(data.d_z)]
    cols = [data.y[:, None], data.x, data.z]
    if data.f_true is not None:
        header.append("f_true")
        cols.append(data.f_true[:, None])
    table = np.hstack(cols)
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in table:
            writer.writerow([repr(float(v)) for v in row])


def read_csv(path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    table = np.asarray(rows, dtype=float).reshape(len(rows), len(header))
    cols = {name: table[:, k] for k, name in enumerate(header)}
    xs = sorted((h for h in header if h.startswith("x")), key=lambda h: int(h[1:]))
    zs = sorted((h for h in header if h.startswith("z")), key=lambda h: int(h[1:]))
    if "y" not in cols or not xs or not zs:
        raise ValueError(f"{path}: expected columns y, x1.., z1.. in header, got {header}")
    return Dataset(
        cols["y"],
        np.column_stack([cols[h] for h in xs]),
        np.column_stack([cols[h] for h in zs]),
        cols.get("f_true"),
    )
