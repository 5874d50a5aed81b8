import numpy as np
import pytest

from iwnpiv.datagen import Dataset
from iwnpiv.models import MlpModel


def central_difference(fun, theta, step=1e-5):
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for k in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[k] += step
        down[k] -= step
        grad[k] = (fun(up) - fun(down)) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def random_mlp(rng, d_in, hidden=(5, 4), seed=0):
    model = MlpModel.init((d_in,) + tuple(hidden) + (1,), seed=seed,
                          in_shift=rng.normal(size=d_in), in_scale=rng.uniform(0.5, 2, size=d_in),
                          out_shift=rng.normal(), out_scale=rng.uniform(0.5, 2))
    theta = model.params.values + 0.1 * rng.normal(size=model.params.values.size)
    return model.with_params(theta)


@pytest.fixture
def three_rows():
    # y, x and z chosen by hand; f(x) = x gives residuals (1, -2, 4)
    return Dataset(y=[2.0, 0.0, 7.0], x=[[1.0], [2.0], [3.0]], z=[[0.0], [1.0], [2.0]],
                   f_true=[1.5, 1.0, 3.0])
