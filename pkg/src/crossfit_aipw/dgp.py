"""Synthetic data generation under the logistic/linear working model.

Rows are x_i with i.i.d. mean-zero entries of variance 1/n (three families:
gaussian, uniform, centered Hardy-Weinberg-style discrete), the treatment is
A_i ~ Bernoulli(sigmoid(x_i'beta)) and the outcome is
y_i = alpha^(A_i) + x_i'beta^(A_i) + eps_i with Gaussian arm-specific noise.

Coefficient vectors are drawn Gaussian and then rescaled so the norm and
inner-product targets hold exactly, not just in the limit; this removes
O(p^{-1/2}) signal-norm noise from Monte Carlo comparisons against the
asymptotic variance formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import Generator
from scipy.special import expit

from .config import ProblemConfig


@dataclass(frozen=True)
class SignalSet:
    """The three coefficient vectors: PS signal and the two OR signals."""

    beta: np.ndarray
    beta0: np.ndarray
    beta1: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """One synthetic sample with its fixed 3-way split assignment."""

    X: np.ndarray
    A: np.ndarray
    y: np.ndarray
    split_of: np.ndarray  # values in {1, 2, 3}

    def split_rows(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.split_of == s)


def _rescale_exact(v: np.ndarray, target_sq_norm: float) -> np.ndarray:
    nrm2 = float(v @ v)
    if target_sq_norm == 0.0:
        return np.zeros_like(v)
    if nrm2 == 0.0:
        raise ValueError("cannot rescale a zero draw to a positive norm")
    return v * np.sqrt(target_sq_norm / nrm2)


def draw_signals(config: ProblemConfig, rng: Generator) -> SignalSet:
    """Draw (beta, beta0, beta1) with exact norm / inner-product targets.

    After rescaling: ||beta||^2 = n*gamma^2, ||beta_t||^2 = p*sigma_t^2 and
    beta0'beta1 = p*rho01*sigma0*sigma1, all to machine precision. Zero-signal
    targets yield exact zero vectors.
    """
    n, p = config.n, config.p
    beta = _rescale_exact(rng.standard_normal(p), n * config.gamma**2)

    s0, s1, rho = config.sigma0_beta, config.sigma1_beta, config.rho01
    raw = rng.standard_normal((p, 2))
    if s0 == 0.0 and s1 == 0.0:
        beta0 = np.zeros(p)
        beta1 = np.zeros(p)
    elif s0 == 0.0:
        beta0 = np.zeros(p)
        beta1 = _rescale_exact(raw[:, 1], p * s1**2)
    elif s1 == 0.0:
        beta0 = _rescale_exact(raw[:, 0], p * s0**2)
        beta1 = np.zeros(p)
    elif abs(rho) == 1.0:
        shared = _rescale_exact(raw[:, 0], p)
        beta0 = s0 * shared
        beta1 = rho * s1 * shared
    else:
        # Map the raw 2-column draw so its Gram equals the target exactly.
        gram_target = p * np.array(
            [[s0**2, rho * s0 * s1], [rho * s0 * s1, s1**2]]
        )
        l_raw = np.linalg.cholesky(raw.T @ raw)
        l_tgt = np.linalg.cholesky(gram_target)
        # raw -> raw L_raw^{-T} L_tgt^T has Gram exactly L_tgt L_tgt^T.
        pair = raw @ np.linalg.solve(l_raw.T, l_tgt.T)
        beta0 = pair[:, 0]
        beta1 = pair[:, 1]
    return SignalSet(beta=beta, beta0=beta0, beta1=beta1)


def _draw_covariates(config: ProblemConfig, rng: Generator) -> np.ndarray:
    n, p = config.n, config.p
    family = config.covariate_family
    if family == "gaussian":
        return rng.standard_normal((n, p)) / np.sqrt(n)
    if family == "uniform":
        half = np.sqrt(3.0 / n)
        return rng.uniform(-half, half, size=(n, p))
    if family == "hwe_discrete":
        # Column j takes values {0,1,2} w.p. (pj^2, 2pj(1-pj), (1-pj)^2),
        # pj equally spaced in [0.25, 0.75], then centered and scaled to
        # variance 1/n. Mean 2(1-pj), variance 2pj(1-pj).
        if p == 1:
            pj = np.array([0.5])
        else:
            pj = 0.25 + 0.5 * np.arange(p) / (p - 1)
        u = rng.random((n, p))
        # 0 below pj^2, 1 below pj^2 + 2pj(1-pj), else 2.
        c0 = pj**2
        c1 = c0 + 2 * pj * (1 - pj)
        vals = (u >= c0).astype(np.float64) + (u >= c1)
        return (vals - 2 * (1 - pj)) / np.sqrt(n * 2 * pj * (1 - pj))
    raise AssertionError(f"unreachable family {family}")


def draw_dataset(config: ProblemConfig, signals: SignalSet, rng: Generator) -> Dataset:
    """Draw one dataset; rows are exchangeable so splits are by position."""
    if signals.beta.shape != (config.p,):
        raise ValueError("signals are not dimensioned for this config")
    n = config.n
    X = _draw_covariates(config, rng)
    propensity = expit(X @ signals.beta)
    A = (rng.random(n) < propensity).astype(np.int8)
    noise = rng.standard_normal(n)
    treated = A == 1
    y = np.where(
        treated,
        config.alpha1 + X @ signals.beta1 + config.sigma_eps1 * noise,
        config.alpha0 + X @ signals.beta0 + config.sigma_eps0 * noise,
    )
    n1, n2, _ = config.split_sizes
    split_of = np.empty(n, dtype=np.int8)
    split_of[:n1] = 1
    split_of[n1 : n1 + n2] = 2
    split_of[n1 + n2 :] = 3
    return Dataset(X=X, A=A, y=y, split_of=split_of)
