"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are written straight
to the terminal) or ``python tests/test_acceptance.py`` for the lines alone.
Criteria 6 and 7 are Monte-Carlo studies and take most of the time.
"""

from __future__ import annotations

import contextlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize as scipy_minimize

from iwnpiv.bench import ExperimentConfig, convergence_study, experiment_config_to_dict, run_experiment
from iwnpiv.cli import main
from iwnpiv.datagen import Dataset, DgpConfig, Family, generate
from iwnpiv.density_ratio import (
    ConstantRatio,
    RatioFitConfig,
    evaluate_ratio,
    fit_ratio,
    lsif_empirical_risk,
    ratio_mass_check,
)
from iwnpiv.estimators import (
    EstimatorConfig,
    fit_2sls,
    fit_iv_just,
    fit_iw_krnl,
    kernel_moment_system,
    loss_and_gradient,
    moment_gram,
)
from iwnpiv.models import GaussianKernelModel, polynomial_features

sys.path.insert(0, str(Path(__file__).parent))
from conftest import central_difference, random_mlp, relative_error  # noqa: E402
from oracles import (  # noqa: E402
    discrete_dataset,
    discrete_ratio_table,
    endogenous_linear,
    gaussian_dataset,
    gaussian_held_out_error,
    independent_dataset,
    unit_ratio_held_out_deviation,
)

CONVERGENCE_SIZES = (500, 1000, 1500, 2000, 3500, 4000, 4500, 5000)


@pytest.fixture
def say(capsys):
    """Print a verdict line past pytest's output capture."""

    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        return ok

    return emit


def _verdict(say, number, checks, detail, seconds, limit):
    ok = all(checks) and seconds < limit
    say(number, ok, f"{detail}; {seconds:.1f}s (limit {limit:.0f}s)")
    assert all(checks), detail
    assert seconds < limit, f"took {seconds:.1f}s, limit {limit}s"


def test_c01_discrete_ratio_oracle(say):
    start = time.perf_counter()
    table = discrete_ratio_table()
    worst = []
    for seed in range(3):
        r = fit_ratio(discrete_dataset(4000, seed), RatioFitConfig(seed=seed))
        worst.append(max(abs(evaluate_ratio(r, [w, w], [z]) - table[w, z]) for w in (0, 1) for z in (0, 1)))
    seconds = time.perf_counter() - start
    _verdict(say, 1, [e < 0.1 for e in worst],
             f"max |r_hat - r*| per seed {np.round(worst, 4).tolist()} (< 0.1)", seconds, 60)


def test_c02_independence(say):
    start = time.perf_counter()
    data = independent_dataset(2000, seed=0)
    r = fit_ratio(data, RatioFitConfig(seed=0))
    dev = unit_ratio_held_out_deviation(r)
    mass = ratio_mass_check(r, data)
    seconds = time.perf_counter() - start
    _verdict(say, 2, [dev < 0.05, 0.9 <= mass <= 1.1],
             f"held-out mean (r_hat - 1)^2 = {dev:.4g} (< 0.05), mass check {mass:.4f} (in [0.9, 1.1])",
             seconds, 60)


def test_c03_gaussian_ratio_consistency(say):
    start = time.perf_counter()
    small, large = [], []
    for seed in range(3):
        for n, store in ((500, small), (8000, large)):
            r = fit_ratio(gaussian_dataset(n, seed), RatioFitConfig(seed=seed))
            store.append(gaussian_held_out_error(r))
    seconds = time.perf_counter() - start
    _verdict(say, 3, [b < a for a, b in zip(small, large)],
             f"held-out L2 error n=500 {np.round(small, 4).tolist()} vs n=8000 {np.round(large, 4).tolist()}",
             seconds, 300)


def test_c04_lsif_identities(say):
    start = time.perf_counter()
    data = independent_dataset(257, seed=1)
    gaps = [abs(lsif_empirical_risk(ConstantRatio(c), data) - (-c + c * c / 2)) for c in (0.0, 0.5, 1.0, 2.0, 3.7)]
    grid = np.linspace(0.0, 2.0, 2001)
    risks = np.array([lsif_empirical_risk(ConstantRatio(c), data) for c in grid])
    at_min = grid[int(np.argmin(risks))]
    seconds = time.perf_counter() - start
    _verdict(say, 4, [max(gaps) < 1e-14, at_min == 1.0, abs(risks.min() + 0.5) < 1e-15],
             f"max |risk - (-c + c^2/2)| = {max(gaps):.2e}, argmin c = {at_min}, min risk = {float(risks.min())!r}",
             seconds, 60)


def test_c05_iv_and_2sls(say):
    start = time.perf_counter()
    slopes = [fit_iv_just(endogenous_linear(50_000, seed))[1] for seed in range(5)]
    rng = np.random.default_rng(0)
    x = rng.normal(size=2000)
    exog = Dataset(1.0 + 3.0 * x, x[:, None], x[:, None])
    coef = fit_2sls(exog, 1)
    ols = np.linalg.lstsq(polynomial_features(x, 1), exog.y, rcond=None)[0]
    gap = float(np.max(np.abs(coef - ols)))
    seconds = time.perf_counter() - start
    _verdict(say, 5, [abs(s - 2) <= 0.05 for s in slopes] + [gap < 1e-10],
             f"IV slopes {np.round(slopes, 4).tolist()} (2 +- 0.05); |2SLS - OLS| = {gap:.1e} with Z = X",
             seconds, 30)


def _wins(family, challenger, dgp_changes=None):
    dgp = DgpConfig(family=family, **(dgp_changes or {}))
    cfg = ExperimentConfig(dgp=dgp, methods=(EstimatorConfig(method=challenger), EstimatorConfig(method="Ls")),
                           trials=20, sample_sizes=(1000,))
    report = run_experiment(cfg)
    a, b = report.mse_table(challenger), report.mse_table("Ls")
    wins = sum(a[s] < b[s] for s in a if s in b)
    return wins, report


def test_c06_monte_carlo_ordering(say):
    start = time.perf_counter()
    wins_np, rep_np = _wins(Family.NEWEY_POWELL, "IwMm")
    wins_ac, rep_ac = _wins(Family.AI_CHEN, "IwLs", {"r_coef": 0.9})
    seconds = time.perf_counter() - start

    def med(rep, m):
        return float(np.median(list(rep.mse_table(m).values())))

    detail = (f"Newey-Powell IwMm beats Ls in {wins_np}/20 (median MSE {med(rep_np, 'IwMm'):.4f} vs "
              f"{med(rep_np, 'Ls'):.4f}); Ai-Chen R=0.9 IwLs beats Ls in {wins_ac}/20 (median "
              f"{med(rep_ac, 'IwLs'):.4f} vs {med(rep_ac, 'Ls'):.4f}); need >= 15 each")
    _verdict(say, 6, [wins_np >= 15, wins_ac >= 15, rep_np.failures + rep_ac.failures == 0],
             detail, seconds, 20 * 60)


def test_c07_convergence_rate(say):
    start = time.perf_counter()
    cfg = ExperimentConfig(methods=(EstimatorConfig(method="IwMm"),), trials=10, sample_sizes=CONVERGENCE_SIZES)
    report, results = convergence_study(cfg)
    res = results["IwMm"]
    seconds = time.perf_counter() - start
    means = ", ".join(f"{n}:{m:.3f}" for n, m in zip(res.sample_sizes, res.mean_log10_mse))
    _verdict(say, 7, [-0.75 <= res.slope <= -0.25, report.failures == 0],
             f"log-log slope {res.slope:.4f} (in [-0.75, -0.25]); mean log10 MSE by n {means}",
             seconds, 45 * 60)


def test_c08_sieve_ordering(say):
    start = time.perf_counter()
    cfg = ExperimentConfig(methods=(EstimatorConfig(method="TwoSls", sieve_degree=3),
                                    EstimatorConfig(method="TwoSls", sieve_degree=1)),
                           trials=10, sample_sizes=(5000,))
    report = run_experiment(cfg)
    deg3 = float(np.mean(list(report.mse_table("TwoSls3").values())))
    deg1 = float(np.mean(list(report.mse_table("TwoSls1").values())))
    seconds = time.perf_counter() - start
    _verdict(say, 8, [deg3 <= deg1, report.failures == 0],
             f"mean MSE degree 3 = {deg3:.4f} <= degree 1 = {deg1:.4f}", seconds, 120)


def test_c09_kernel_closed_form(say):
    start = time.perf_counter()
    gaps = []
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(30, 80))
        data = generate(DgpConfig(family=Family.NEWEY_POWELL, n=n, seed=seed))
        m = rng.uniform(0.1, 3.0, size=(n, n))
        centers = data.x[rng.choice(n, int(rng.integers(5, 15)), replace=False)]
        sigma2, zeta = float(rng.uniform(0.3, 3.0)), float(10 ** rng.uniform(-4, -1))
        fit = fit_iw_krnl(data, m, sigma2, zeta, centers)
        b, c = kernel_moment_system(data, m, centers, sigma2)
        mask = np.r_[np.ones(b.shape[1] - 1), 0.0]

        def objective(theta):
            res = c - b @ theta
            return res @ res + zeta * np.sum(mask * theta**2), -2 * b.T @ res + 2 * zeta * mask * theta

        it = scipy_minimize(objective, np.zeros(b.shape[1]), jac=True, method="L-BFGS-B",
                            options={"gtol": 1e-14, "ftol": 1e-16, "maxiter": 100_000})
        gaps.append(abs(fit.diagnostics["objective"] - it.fun) / it.fun)
    seconds = time.perf_counter() - start
    _verdict(say, 9, [g < 1e-6 for g in gaps],
             f"relative objective gap closed form vs L-BFGS {[f'{g:.1e}' for g in gaps]} (< 1e-6)", seconds, 600)


def test_c10_gradient_suite(say):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(100):
        n = int(rng.integers(5, 15))
        data = Dataset(rng.normal(size=n), rng.normal(size=(n, 1)), rng.normal(size=(n, 1)))
        gram = moment_gram(rng.uniform(0.0, 3.0, size=(n, n)))
        if k % 2 == 0:
            model = random_mlp(rng, 1, hidden=(6, 5), seed=k)
        else:
            model = GaussianKernelModel(rng.normal(size=(5, 1)), float(rng.uniform(0.3, 2)), rng.normal(size=5),
                                        float(rng.normal()))
        # alternate the IW-MM and IW-LS weightings within each model family
        weights = (0.0, 1.0 / n) if k % 4 < 2 else (1.0, 1e-3)
        theta = model.params.values
        _, grad = loss_and_gradient(model, theta, data, gram, *weights)
        numeric = central_difference(lambda t: loss_and_gradient(model, t, data, gram, *weights)[0], theta)
        worst = max(worst, relative_error(np.asarray(grad), numeric))
    seconds = time.perf_counter() - start
    _verdict(say, 10, [worst < 1e-4],
             f"max relative error over 100 instances (MLP and kernel, IW-MM and IW-LS) {worst:.2e} (< 1e-4)",
             seconds, 600)


def test_c11_bench_determinism(say, tmp_path):
    start = time.perf_counter()
    cfg = ExperimentConfig(
        methods=(EstimatorConfig(method="IwMm", hidden=(16, 16)), EstimatorConfig(method="Ls", hidden=(16, 16)),
                 EstimatorConfig(method="TwoSls", sieve_degree=3)),
        trials=2, sample_sizes=(200,), eval_points=2000,
        ratio=RatioFitConfig(hidden=(32, 32), epochs=20),
    )
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(experiment_config_to_dict(cfg)))
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}.csv"
        with contextlib.redirect_stdout(io.StringIO()):
            main(["bench", "--config", str(path), "--out", str(out), "--format", "csv"])
        outs.append(out.read_bytes())
    seconds = time.perf_counter() - start
    _verdict(say, 11, [outs[0] == outs[1], outs[0].count(b"\n") == 7],
             f"two bench runs byte-identical: {outs[0] == outs[1]} ({len(outs[0])} bytes)", seconds, 600)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
