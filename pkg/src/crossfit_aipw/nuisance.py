"""Nuisance model fits: logistic PS (MLE or ridge) and per-arm OLS.

The logistic solver is a damped Newton method with step-halving on the
penalized objective. For the unpenalized MLE, non-existence (data separable
or too high-dimensional) is detected by a norm-explosion heuristic; the
threshold is recorded on the fit for auditability. OLS is solved through a
Cholesky factorization of the Gram matrix with a cheap reciprocal-condition
estimate, flagging non-uniqueness instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, get_lapack_funcs
from scipy.special import expit


@dataclass
class LogisticFit:
    coef: np.ndarray
    converged: bool
    exists: bool
    iterations: int
    final_grad_norm: float
    lam: float
    norm_cap: float  # ||coef||^2 / n threshold used by the existence check
    objective_path: list | None = None  # penalized objective per accepted step


@dataclass
class OlsFit:
    intercept: float
    coef: np.ndarray
    unique: bool
    gram_condition: float


def _logistic_objective(eta: np.ndarray, A: np.ndarray, coef: np.ndarray, lam: float) -> float:
    # sum log(1 + e^eta) - A*eta, computed via logaddexp for stability
    return float(np.sum(np.logaddexp(0.0, eta) - A * eta) + 0.5 * lam * (coef @ coef))


def fit_logistic(
    X: np.ndarray,
    A: np.ndarray,
    lam: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 100,
    gamma_sq_cap: float = 1.0,
) -> LogisticFit:
    """Minimize sum{log(1+e^{x_i'b}) - A_i x_i'b} + (lam/2)||b||^2 from b=0.

    For lam=0, declares exists=False once ||b||^2/n exceeds
    100*(gamma_sq_cap + 1) or when the iteration budget is exhausted with a
    still-growing norm; exists=False forces converged=False.
    """
    X = np.asarray(X, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != A.shape[0]:
        raise ValueError("X rows must match A")
    if not np.all((A == 0) | (A == 1)):
        raise ValueError("A must be binary")
    if not tol > 0:
        raise ValueError("tol must be positive")
    n, p = X.shape
    norm_cap = 100.0 * (gamma_sq_cap + 1.0)

    if lam == 0.0 and (A.min() == A.max()):
        # Constant response: trivially separated, the MLE diverges.
        return LogisticFit(coef=np.zeros(p), converged=False, exists=False,
                           iterations=0, final_grad_norm=np.inf, lam=lam,
                           norm_cap=norm_cap, objective_path=[])

    coef = np.zeros(p)
    eta = np.zeros(n)
    obj = _logistic_objective(eta, A, coef, lam)
    objective_path = [obj]
    exists = True
    converged = False
    grad_norm = np.inf
    prev_sq_norm = 0.0
    growing = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        grad = X.T @ (mu - A) + lam * coef
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm <= tol:
            converged = True
            break
        w = mu * (1.0 - mu)
        H = (X * w[:, None]).T @ X
        if lam > 0:
            H[np.diag_indices_from(H)] += lam
        try:
            step = cho_solve(cho_factor(H, lower=True, check_finite=False), grad,
                             check_finite=False)
        except np.linalg.LinAlgError:
            step = grad  # Hessian numerically singular near separation
        # Step-halving line search on the penalized objective. The slack
        # covers float rounding so full Newton steps are accepted near the
        # optimum, where the objective is flat at machine precision.
        slack = 1e-12 * (abs(obj) + 1.0)
        t = 1.0
        for _ in range(40):
            cand = coef - t * step
            eta_cand = X @ cand
            obj_cand = _logistic_objective(eta_cand, A, cand, lam)
            if obj_cand <= obj + slack:
                break
            t *= 0.5
        coef, eta, obj = cand, eta_cand, obj_cand
        objective_path.append(obj)
        sq_norm = float(coef @ coef) / n
        growing = sq_norm > prev_sq_norm
        prev_sq_norm = sq_norm
        if lam == 0.0 and sq_norm > norm_cap:
            exists = False
            break
    if lam == 0.0 and not converged and it >= max_iter and growing:
        exists = False
    if not exists:
        converged = False
    return LogisticFit(
        coef=coef,
        converged=converged,
        exists=exists,
        iterations=it,
        final_grad_norm=grad_norm,
        lam=lam,
        norm_cap=norm_cap,
        objective_path=objective_path,
    )


def predict_propensity(fit: LogisticFit, X: np.ndarray) -> np.ndarray:
    if not fit.converged:
        raise ValueError("propensity prediction requires a converged fit")
    return expit(np.asarray(X) @ fit.coef)


def winsorize(prob: np.ndarray, eps: float) -> np.ndarray:
    """Clamp probabilities into [eps, 1-eps]; eps=0 is the identity."""
    if not 0 <= eps < 0.5:
        raise ValueError("eps must lie in [0, 0.5)")
    return np.clip(prob, eps, 1.0 - eps)


def fit_ols(X: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None) -> OlsFit:
    """Least squares for y ~ [1, X] on the selected rows.

    unique=False (a value, not an error) when the intercept-augmented Gram
    matrix is singular or has condition number above 1e10.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if mask is not None:
        sel = np.asarray(mask).astype(bool)
        X = X[sel]
        y = y[sel]
    m, p = X.shape
    if m < 1:
        raise ValueError("no selected rows")
    xt = np.empty((m, p + 1))
    xt[:, 0] = 1.0
    xt[:, 1:] = X
    gram = xt.T @ xt
    rhs = xt.T @ y
    cond = np.inf
    try:
        c, low = cho_factor(gram, lower=True, check_finite=False)
        pocon = get_lapack_funcs(("pocon",), (gram,))[0]
        anorm = float(np.max(np.sum(np.abs(gram), axis=1)))
        rcond, _ = pocon(c, anorm, uplo="L")
        cond = 1.0 / rcond if rcond > 0 else np.inf
        theta = cho_solve((c, low), rhs, check_finite=False)
    except np.linalg.LinAlgError:
        theta, *_ = np.linalg.lstsq(xt, y, rcond=None)
    unique = bool(np.isfinite(cond) and cond <= 1e10)
    return OlsFit(intercept=float(theta[0]), coef=theta[1:], unique=unique,
                  gram_condition=float(cond))


def ols_predict(fit: OlsFit, X: np.ndarray) -> np.ndarray:
    return fit.intercept + np.asarray(X) @ fit.coef


def _bernoulli_deviance(eta: np.ndarray, A: np.ndarray) -> float:
    """Mean of -2*loglik at linear predictors eta."""
    return float(np.mean(2.0 * (np.logaddexp(0.0, eta) - A * eta)))


def approx_loo_score(X: np.ndarray, A: np.ndarray, lam: float,
                     fit: LogisticFit | None = None) -> float:
    """Approximate leave-one-out CV deviance of ridge logistic regression.

    Uses the leave-one-out identity: with q_i the leverage through the
    penalized Hessian of the held-out problem, the full-fit predictor is
    prox_{q_i rho}(eta_loo_i + q_i A_i); inverting it gives
    eta_loo_i = eta_i + q_i (sigmoid(eta_i) - A_i), so no refits are needed.
    The exact algebraic form is pinned by a brute-force refit oracle test.
    """
    if not lam > 0:
        raise ValueError("approx LOO requires a ridge penalty lam > 0")
    X = np.asarray(X, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64).ravel()
    if fit is None:
        fit = fit_logistic(X, A, lam=lam)
    if not fit.converged:
        raise ValueError("ridge fit did not converge")
    eta = X @ fit.coef
    mu = expit(eta)
    w = mu * (1.0 - mu)
    H = (X * w[:, None]).T @ X
    H[np.diag_indices_from(H)] += lam
    c = cho_factor(H, lower=True, check_finite=False)
    # q_full_i = x_i' H^{-1} x_i; leave-one-out leverage via Sherman-Morrison.
    q_full = np.einsum("ij,ji->i", X, cho_solve(c, X.T, check_finite=False))
    q_loo = q_full / (1.0 - w * q_full)
    eta_loo = eta + q_loo * (mu - A)
    return _bernoulli_deviance(eta_loo, A)


def default_lambda_grid() -> np.ndarray:
    """Ten points equally spaced between 0.01 and 100 on the log scale."""
    return np.logspace(np.log10(0.01), np.log10(100.0), 10)


def select_lambda_loocv(X: np.ndarray, A: np.ndarray,
                        grid: np.ndarray | None = None) -> float:
    """Grid argmin of the approximate LOO deviance; ties go to larger lam."""
    grid = default_lambda_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    best_lam, best_score = None, np.inf
    failures = []
    for lam in np.sort(grid):
        try:
            score = approx_loo_score(X, A, lam)
        except ValueError as exc:
            failures.append((lam, str(exc)))
            continue
        if score <= best_score:
            best_lam, best_score = lam, score
    if best_lam is None:
        raise RuntimeError(f"all ridge fits failed on the grid: {failures}")
    return float(best_lam)
