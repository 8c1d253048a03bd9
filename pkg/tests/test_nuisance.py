"""Nuisance-fit tests, including the brute-force leave-one-out oracle."""

import numpy as np
import pytest
from scipy.special import expit

from crossfit_aipw.nuisance import (
    LogisticFit,
    approx_loo_score,
    default_lambda_grid,
    fit_logistic,
    fit_ols,
    predict_propensity,
    select_lambda_loocv,
    winsorize,
)


def logistic_data(n, p, gamma=1.0, seed=0):
    rng = np.random.default_rng(seed)
    beta = rng.standard_normal(p)
    beta *= np.sqrt(n * gamma**2) / np.linalg.norm(beta)
    X = rng.standard_normal((n, p)) / np.sqrt(n)
    A = (rng.random(n) < expit(X @ beta)).astype(float)
    return X, A, beta


class TestFitLogistic:
    def test_constant_response_nonexistent(self):
        X, _, _ = logistic_data(200, 30)
        fit = fit_logistic(X, np.ones(200), lam=0.0)
        assert not fit.exists
        assert not fit.converged

    def test_zero_design_ridge(self):
        X = np.zeros((50, 4))
        A = np.r_[np.ones(25), np.zeros(25)]
        fit = fit_logistic(X, A, lam=1.0)
        assert fit.converged
        assert np.allclose(fit.coef, 0.0)

    def test_score_equation_at_mle(self):
        X, A, _ = logistic_data(800, 40, gamma=0.5, seed=3)
        fit = fit_logistic(X, A, lam=0.0)
        assert fit.converged and fit.exists
        score = X.T @ (A - expit(X @ fit.coef))
        assert np.max(np.abs(score)) <= 1e-6

    def test_penalized_gradient_norm(self):
        X, A, _ = logistic_data(500, 60, gamma=1.0, seed=4)
        fit = fit_logistic(X, A, lam=0.7)
        grad = X.T @ (expit(X @ fit.coef) - A) + 0.7 * fit.coef
        assert np.max(np.abs(grad)) <= 1e-8

    def test_objective_monotone(self):
        X, A, _ = logistic_data(400, 50, gamma=1.0, seed=5)
        fit = fit_logistic(X, A, lam=0.2)
        path = np.array(fit.objective_path)
        # Monotone decrease up to float rounding of the flat tail.
        assert np.all(np.diff(path) <= 1e-9 * (1.0 + abs(path[0])))

    def test_ridge_converges_on_separable_data(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((120, 10))
        w = rng.standard_normal(10)
        A = (X @ w > 0).astype(float)
        fit = fit_logistic(X, A, lam=0.5)
        assert fit.converged

    def test_input_validation(self):
        X, A, _ = logistic_data(50, 5)
        with pytest.raises(ValueError):
            fit_logistic(X, A[:-1])
        with pytest.raises(ValueError):
            fit_logistic(X, A + 0.5)

    @pytest.mark.slow
    def test_mle_bias_matches_state_evolution(self):
        # n=3000, p=210, gamma=1: mean of bhat'beta/||beta||^2 over 200
        # replicates against alpha* from the state-evolution solver.
        from crossfit_aipw.state_evolution import solve_se_mle

        se = solve_se_mle(210 / 3000, 1.0)
        vals = []
        for r in range(200):
            X, A, beta = logistic_data(3000, 210, gamma=1.0, seed=1000 + r)
            fit = fit_logistic(X, A, lam=0.0)
            if fit.converged:
                vals.append(fit.coef @ beta / (beta @ beta))
        assert len(vals) >= 195
        assert abs(np.mean(vals) / se.alpha_star - 1.0) <= 0.03


class TestPredictWinsorize:
    def test_zero_coef_predicts_half(self):
        fit = LogisticFit(coef=np.zeros(3), converged=True, exists=True,
                          iterations=1, final_grad_norm=0.0, lam=0.0,
                          norm_cap=200.0)
        assert np.allclose(predict_propensity(fit, np.eye(3)), 0.5)

    def test_log3_predicts_three_quarters(self):
        fit = LogisticFit(coef=np.array([np.log(3.0)]), converged=True,
                          exists=True, iterations=1, final_grad_norm=0.0,
                          lam=0.0, norm_cap=200.0)
        assert np.isclose(predict_propensity(fit, np.array([[1.0]]))[0], 0.75)

    def test_unconverged_rejected(self):
        fit = LogisticFit(coef=np.zeros(2), converged=False, exists=False,
                          iterations=1, final_grad_norm=1.0, lam=0.0,
                          norm_cap=200.0)
        with pytest.raises(ValueError):
            predict_propensity(fit, np.eye(2))

    def test_winsorize_examples(self):
        assert winsorize(np.array([0.001]), 0.005)[0] == 0.005
        assert winsorize(np.array([0.5]), 0.005)[0] == 0.5
        assert winsorize(np.array([0.999]), 0.0)[0] == 0.999

    def test_winsorize_idempotent_monotone(self):
        rng = np.random.default_rng(1)
        p = rng.random(500)
        w = winsorize(p, 0.01)
        assert np.array_equal(winsorize(w, 0.01), w)
        q = np.sort(p)
        assert np.all(np.diff(winsorize(q, 0.01)) >= 0)


class TestFitOls:
    def test_exact_interpolation(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((80, 6))
        y = 3.0 + X @ np.zeros(6)
        fit = fit_ols(X, y)
        assert fit.unique
        assert np.isclose(fit.intercept, 3.0, atol=1e-10)
        assert np.max(np.abs(fit.coef)) <= 1e-10

    def test_residual_orthogonality(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((120, 8))
        y = 1.0 + X @ rng.standard_normal(8) + rng.standard_normal(120)
        fit = fit_ols(X, y)
        xt = np.column_stack([np.ones(120), X])
        resid = y - xt @ np.r_[fit.intercept, fit.coef]
        scale = np.linalg.norm(y)
        assert np.max(np.abs(xt.T @ resid)) <= 1e-8 * scale

    @pytest.mark.parametrize("kappa_b,expect_unique", [(0.2, True), (0.6, False)])
    def test_uniqueness_boundary(self, kappa_b, expect_unique):
        # Theorem-type boundary: treated-arm OLS uniqueness iff kappa_b < 1/2.
        p = 60
        n_b = int(round(p / kappa_b))
        hits = 0
        reps = 100
        for r in range(reps):
            rng = np.random.default_rng(10_000 + r)
            X = rng.standard_normal((n_b, p)) / np.sqrt(n_b)
            beta = rng.standard_normal(p)
            beta *= np.sqrt(n_b * 0.25) / np.linalg.norm(beta)
            A = rng.random(n_b) < expit(X @ beta)
            y = X @ beta + rng.standard_normal(n_b)
            fit = fit_ols(X, y, mask=A)
            hits += fit.unique
        rate = hits / reps
        if expect_unique:
            assert rate >= 0.95
        else:
            assert rate <= 0.05

    def test_empty_selection_errors(self):
        X = np.random.default_rng(0).standard_normal((10, 2))
        with pytest.raises(ValueError):
            fit_ols(X, np.zeros(10), mask=np.zeros(10, dtype=bool))


def exact_loo_deviance(X, A, lam):
    """Brute-force oracle: refit without each point, average test deviance."""
    n = X.shape[0]
    dev = 0.0
    for i in range(n):
        keep = np.arange(n) != i
        fit = fit_logistic(X[keep], A[keep], lam=lam)
        assert fit.converged
        eta = float(X[i] @ fit.coef)
        dev += 2.0 * (np.logaddexp(0.0, eta) - A[i] * eta)
    return dev / n


class TestApproxLoo:
    def test_matches_exact_refit(self):
        X, A, _ = logistic_data(60, 5, gamma=1.0, seed=11)
        approx = approx_loo_score(X, A, lam=1.0)
        exact = exact_loo_deviance(X, A, lam=1.0)
        assert abs(approx / exact - 1.0) <= 0.01

    def test_infinite_shrinkage_limit(self):
        X, A, _ = logistic_data(80, 4, gamma=0.5, seed=12)
        score = approx_loo_score(X, A, lam=1e7)
        assert np.isclose(score, 2 * np.log(2), rtol=1e-3)

    def test_duplicated_rows_small_drift(self):
        X, A, _ = logistic_data(60, 5, gamma=1.0, seed=13)
        base = approx_loo_score(X, A, lam=1.0)
        Xd = np.vstack([X, X])
        Ad = np.r_[A, A]
        dup = approx_loo_score(Xd, Ad, lam=2.0)  # penalty matched to scale
        exact_dup = exact_loo_deviance(Xd, Ad, lam=2.0)
        assert abs(dup / base - 1.0) <= 0.05
        assert abs(dup / exact_dup - 1.0) <= 0.05

    def test_lambda_required(self):
        X, A, _ = logistic_data(30, 3)
        with pytest.raises(ValueError):
            approx_loo_score(X, A, lam=0.0)


class TestSelectLambda:
    def test_default_grid(self):
        grid = default_lambda_grid()
        assert grid.size == 10
        assert np.isclose(grid[0], 0.01)
        assert np.isclose(grid[-1], 100.0)
        assert np.allclose(np.diff(np.log(grid)), np.diff(np.log(grid))[0])

    def test_single_element_grid(self):
        X, A, _ = logistic_data(60, 4, seed=14)
        assert select_lambda_loocv(X, A, grid=np.array([0.3])) == 0.3

    def test_separable_data_selects_positive(self):
        rng = np.random.default_rng(15)
        X = rng.standard_normal((60, 4))
        w = rng.standard_normal(4)
        A = (X @ w > 0).astype(float)
        lam = select_lambda_loocv(X, A)
        assert lam > 0

    def test_tie_breaks_to_larger(self):
        X = np.zeros((40, 3))
        A = np.r_[np.ones(20), np.zeros(20)]
        # All lambdas give identical predictions on a zero design.
        lam = select_lambda_loocv(X, A, grid=np.array([0.1, 1.0, 10.0]))
        assert lam == 10.0
