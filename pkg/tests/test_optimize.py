import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iwnpiv.models import GaussianKernelModel, ParamVector, kernel_features
from iwnpiv.optimize import (
    OptConfig,
    OptimizationError,
    SingularSystemError,
    k_fold_cv,
    kfold_indices,
    minimize,
    solve_ridge_normal_equations,
)


def quadratic(theta):
    return float((theta[0] - 3.0) ** 2), np.array([2.0 * (theta[0] - 3.0)])


def rosenbrock(theta):
    a, b = theta
    value = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    grad = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return float(value), grad


class TestMinimize:
    def test_quadratic(self):
        best, trace = minimize(quadratic, np.zeros(1), OptConfig(max_epochs=5000, learning_rate=0.05,
                                                                   tolerance=1e-12, patience=500))
        assert abs(best[0] - 3.0) < 1e-4
        assert trace[0] == 9.0

    def test_optimal_start_is_kept(self):
        best, trace = minimize(quadratic, np.array([3.0]), OptConfig(max_epochs=50))
        assert best[0] == 3.0
        assert quadratic(best)[0] <= trace[0]

    def test_rosenbrock(self):
        cfg = OptConfig(max_epochs=20000, learning_rate=0.01, tolerance=1e-12, patience=2000)
        best, _ = minimize(rosenbrock, np.array([-1.2, 1.0]), cfg)
        assert rosenbrock(best)[0] < 1e-3

    def test_param_vector_in_and_out(self):
        init = ParamVector(np.zeros(1), ((1,),))
        best, _ = minimize(quadratic, init, OptConfig(max_epochs=10, learning_rate=0.1))
        assert isinstance(best, ParamVector) and best.layout == ((1,),)

    def test_nan_aborts(self):
        with pytest.raises(OptimizationError):
            minimize(lambda t: (np.nan, np.zeros(1)), np.zeros(1), OptConfig(max_epochs=3))

    def test_stochastic_mode(self):
        def noisy(theta, rng):
            return 2.0 * (theta - 3.0) + rng.normal(scale=0.1, size=1)

        best, trace = minimize(lambda t: (float((t[0] - 3) ** 2), None), np.zeros(1),
                               OptConfig(max_epochs=400, learning_rate=0.05, patience=400),
                               stochastic_gradient=noisy, steps_per_epoch=5)
        assert abs(best[0] - 3.0) < 0.05

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1e-4, 1.0))
    def test_never_worse_than_start(self, seed, lr):
        rng = np.random.default_rng(seed)
        start = rng.normal(size=2) * 2
        best, trace = minimize(rosenbrock, start, OptConfig(max_epochs=30, learning_rate=lr))
        assert rosenbrock(best)[0] <= rosenbrock(start)[0]
        assert rosenbrock(best)[0] == pytest.approx(np.min(trace))

    def test_deterministic(self):
        def noisy(theta, rng):
            return 2.0 * (theta - 3.0) + rng.normal(size=1)

        cfg = OptConfig(max_epochs=30, seed=4)
        a = minimize(quadratic, np.zeros(1), cfg, stochastic_gradient=noisy, steps_per_epoch=3)
        b = minimize(quadratic, np.zeros(1), cfg, stochastic_gradient=noisy, steps_per_epoch=3)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OptConfig(tolerance=1.0)
        with pytest.raises(ValueError):
            OptConfig(learning_rate=0.0)


def _gauss_elim(a, b):
    """Partial-pivot Gaussian elimination in exact rationals via Python floats' fractions."""
    from fractions import Fraction

    n = len(b)
    m = [[Fraction(float(v)) for v in row] + [Fraction(float(b[i]))] for i, row in enumerate(a)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        m[col], m[piv] = m[piv], m[col]
        for r in range(n):
            if r != col and m[r][col] != 0:
                factor = m[r][col] / m[col][col]
                m[r] = [vr - factor * vc for vr, vc in zip(m[r], m[col])]
    return np.array([float(m[i][n] / m[i][i]) for i in range(n)])


class TestRidgeSolve:
    def test_identity(self):
        b = np.array([1.0, -2.0, 5.0])
        np.testing.assert_array_equal(solve_ridge_normal_equations(np.eye(3), b, 0.0), b)

    def test_identity_ridge(self):
        b = np.array([1.0, -2.0, 5.0])
        np.testing.assert_allclose(solve_ridge_normal_equations(np.eye(3), b, 1.0), b / 2, rtol=1e-15)

    def test_against_exact_elimination(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(10, 3))
        b = rng.normal(size=10)
        mask = np.array([1.0, 1.0, 0.0])
        lhs = a.T @ a + 0.3 * np.diag(mask)
        expected = _gauss_elim(lhs, a.T @ b)
        got = solve_ridge_normal_equations(a, b, 0.3, mask)
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)

    def test_singular_reports_ridge(self):
        a = np.array([[1.0, 1.0], [2.0, 2.0]])
        with pytest.raises(SingularSystemError, match="ridge"):
            solve_ridge_normal_equations(a, np.ones(2), 0.0)
        solve_ridge_normal_equations(a, np.ones(2), 1e-3)

    def test_residual_bound(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(40, 6))
        b = rng.normal(size=40)
        w = solve_ridge_normal_equations(a, b, 0.01)
        lhs = a.T @ a + 0.01 * np.eye(6)
        rhs = a.T @ b
        assert np.max(np.abs(lhs @ w - rhs)) < 1e-8 * (1 + np.max(np.abs(rhs)))


class TestCrossValidation:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 200), st.integers(2, 10), st.integers(0, 1000))
    def test_folds_partition(self, n, k, seed):
        if n < k:
            return
        folds = kfold_indices(n, k, seed)
        joined = np.sort(np.concatenate(folds))
        assert np.array_equal(joined, np.arange(n))
        assert all(np.array_equal(a, b) for a, b in zip(folds, kfold_indices(n, k, seed)))

    def test_single_point(self):
        assert k_fold_cv(10, lambda p, idx: p, lambda f, idx: 1.0, [{"a": 1}], k=2) == {"a": 1}

    def test_zero_score_wins(self):
        grid = [0.5, 0.0, 2.0]
        best = k_fold_cv(20, lambda p, idx: p, lambda f, idx: abs(f), grid, k=4)
        assert best == 0.0

    def test_ties_take_first(self):
        assert k_fold_cv(20, lambda p, idx: p, lambda f, idx: 1.0, ["a", "b"], k=4) == "a"

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            k_fold_cv(10, None, None, [], k=2)

    def test_bandwidth_selection_close_to_exhaustive_optimum(self):
        rng = np.random.default_rng(0)
        n = 200
        x = rng.uniform(-3, 3, size=(n, 1))
        truth = lambda t: np.sin(2 * t[:, 0])
        y = truth(x) + 0.3 * rng.normal(size=n)
        x_test = rng.uniform(-3, 3, size=(20000, 1))
        ridge = 1e-3
        grid = [0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0]

        def fit(sigma2, idx):
            design = kernel_features(x[idx], x[idx], sigma2)
            a = np.hstack([design, np.ones((idx.size, 1))])
            mask = np.r_[np.ones(idx.size), 0.0]
            theta = solve_ridge_normal_equations(a, y[idx], ridge, mask)
            return GaussianKernelModel(x[idx], sigma2, theta[:-1], theta[-1])

        def score(model, idx):
            return float(np.mean((model.predict(x[idx]) - y[idx]) ** 2))

        # exhaustive oracle: the same score (squared error on noisy outcomes) of the
        # full-sample fit at every grid point, on a large fresh sample
        y_test = truth(x_test) + 0.3 * rng.normal(size=x_test.shape[0])
        oracle = {s: float(np.mean((fit(s, np.arange(n)).predict(x_test) - y_test) ** 2))
                  for s in grid}
        chosen = k_fold_cv(n, fit, score, grid, k=5, seed=1)
        assert oracle[chosen] <= 1.1 * min(oracle.values())
