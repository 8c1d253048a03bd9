"""State evolution of high-dimensional logistic regression (MLE and ridge).

Solves the three coupled fixed-point equations characterizing the logistic
MLE in the proportional regime p/n -> kappa with signal strength
Var(x'beta) -> gamma^2, plus the ridge-penalized variant. The solution
(alpha*, sigma*, lambda*) describes the estimator through

    bhat'beta / ||beta||^2 -> alpha*,      Var(x'bhat) -> kappa sigma*^2 + alpha*^2 gamma^2,

and lambda* is the limit of the leave-one-out leverage, entering through the
proximal operator of the logistic partition function rho(t) = log(1+e^t).

The equations are written in the +/-1 label symmetrization: with
(Q1, Q2) ~ N(0, [[g2, -a g2], [-a g2, a^2 g2 + kappa s^2]]) and
P = prox_{L rho}(Q2),

    (I)   kappa^2 s^2          = E[ 2 rho'(Q1) (L rho'(P))^2 ]
    (II)  lam_r * a * g2       = E[ 2 rho'(Q1) Q1 rho'(P) ]
    (III) 1 - kappa + lam_r*L  = E[ 2 rho'(Q1) / (1 + L rho''(P)) ]

with lam_r = 0 for the MLE. For ridge (lam_r > 0) the unknowns (a, s) are
directly the observable "tilde" quantities of the penalized estimator; the
Monte Carlo oracle tests are the acceptance authority for this transcription.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.optimize import brentq, root
from scipy.special import expit

from .gauss import _gh_rule


class SeSolverError(RuntimeError):
    """Raised when the state-evolution system cannot be solved."""


@dataclass(frozen=True)
class SeParams:
    alpha_star: float
    sigma_star: float
    lambda_star: float
    kappa_i: float
    gamma: float
    ridge_lambda: float = 0.0  # 0 = MLE; otherwise the split-normalized penalty
    is_tilde: bool = False
    residual: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SeParams":
        return SeParams(**d)

    @property
    def predictor_variance(self) -> float:
        """Limit of Var(x'bhat) for a fresh covariate row."""
        return self.kappa_i * self.sigma_star**2 + self.alpha_star**2 * self.gamma**2


@dataclass(frozen=True)
class JointLaw:
    """Joint Gaussian law of (Z_beta, Z_bhat_1, Z_bhat_2, Z_bhat_3)."""

    cov: np.ndarray

    def marginal(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=int)
        return self.cov[np.ix_(idx, idx)]


def prox_rho(lam: float, z):
    """Proximal operator of lam*rho at z: the unique t with lam*sigmoid(t)+t=z.

    Vectorized over z; safeguarded Newton with a bisection fallback on the
    bracket [z - lam, z], residual below 1e-12.
    """
    if lam < 0 or not np.isfinite(lam):
        raise ValueError("lam must be finite and nonnegative")
    z_arr = np.asarray(z, dtype=np.float64)
    scalar = z_arr.ndim == 0
    z_arr = np.atleast_1d(z_arr)
    if lam == 0.0:
        out = z_arr.copy()
        return float(out[0]) if scalar else out
    lo = z_arr - lam
    hi = z_arr.copy()
    t = z_arr - lam * expit(z_arr)
    # Alternate bisection and Newton on the bracket [z-lam, z]: the bracket
    # shrinks geometrically, and Newton polishes once it is tight.
    for k in range(200):
        s = expit(t)
        f = lam * s + t - z_arr
        if np.all(np.abs(f) <= 1e-12):
            break
        pos = f > 0
        hi = np.where(pos, t, hi)
        lo = np.where(pos, lo, t)
        if k % 2 == 0:
            t_new = t - f / (1.0 + lam * s * (1.0 - s))
            inside = (t_new > lo) & (t_new < hi)
            t = np.where(inside, t_new, 0.5 * (lo + hi))
        else:
            done = np.abs(f) <= 1e-12
            t = np.where(done, t, 0.5 * (lo + hi))
    return float(t[0]) if scalar else t


def _law_cov(gamma: float, alpha: float, sigma: float, kappa: float) -> np.ndarray:
    g2 = gamma * gamma
    return np.array(
        [[g2, -alpha * g2], [-alpha * g2, alpha * alpha * g2 + kappa * sigma * sigma]]
    )


class _SeSystem:
    """Residuals of the 3-equation system at fixed quadrature order."""

    def __init__(self, kappa: float, gamma: float, lam_ridge: float, order: int = 60):
        self.kappa = kappa
        self.gamma = gamma
        self.lam_ridge = lam_ridge
        self.nodes, self.weights = _gh_rule(2, order)

    def _fields(self, alpha: float, sigma: float):
        L = np.linalg.cholesky(_law_cov(self.gamma, alpha, sigma, self.kappa))
        q = self.nodes @ L.T
        q1, q2 = q[:, 0], q[:, 1]
        meas = self.weights * 2.0 * expit(q1)  # change of measure 2*rho'(Q1)
        return q1, q2, meas

    def residuals(self, alpha: float, sigma: float, lam_star: float,
                  fields=None) -> np.ndarray:
        if fields is None:
            fields = self._fields(alpha, sigma)
        q1, q2, meas = fields
        p = prox_rho(lam_star, q2)
        sp = expit(p)
        e1 = meas @ (lam_star * sp) ** 2 - self.kappa**2 * sigma**2
        e2 = meas @ (q1 * lam_star * sp) - self.lam_ridge * lam_star * alpha * self.gamma**2
        e3 = meas @ (1.0 / (1.0 + lam_star * sp * (1.0 - sp))) - (
            1.0 - self.kappa + self.lam_ridge * lam_star
        )
        return np.array([e1, e2, e3])

    def scaled_residuals(self, alpha: float, sigma: float, lam_star: float) -> np.ndarray:
        r = self.residuals(alpha, sigma, lam_star)
        s1 = max(self.kappa**2 * sigma**2, 1e-2)
        s2 = max(self.gamma**2, 1e-2)
        return np.array([r[0] / s1, r[1] / (s2 * lam_star), r[2]])

    def solve_lambda(self, alpha: float, sigma: float) -> float:
        """Root of equation (III) in lambda* at fixed (alpha, sigma)."""
        fields = self._fields(alpha, sigma)

        def f(lam_star):
            return self.residuals(alpha, sigma, lam_star, fields)[2]

        lo, hi = 1e-9, 4.0
        flo = f(lo)
        fhi = f(hi)
        while flo * fhi > 0 and hi < 1e7:
            hi *= 4.0
            fhi = f(hi)
        if flo * fhi > 0:
            raise SeSolverError(
                f"no lambda* bracket at alpha={alpha:.4g}, sigma={sigma:.4g} "
                f"(kappa={self.kappa:.4g}, gamma={self.gamma:.4g}); "
                "the configuration may be infeasible"
            )
        return brentq(f, lo, hi, xtol=1e-13, rtol=8.9e-16)


def _solve_system(kappa: float, gamma: float, lam_ridge: float,
                  tol: float = 1e-9, max_iter: int = 500) -> tuple:
    """Damped Gauss-Seidel fixed point, then a root-finder fallback."""
    if gamma <= 0:
        raise SeSolverError("state evolution requires gamma > 0")
    sys60 = _SeSystem(kappa, gamma, lam_ridge, order=60)
    alpha, sigma, lam_star = 1.0, 1.0 + gamma, 1.0
    damp = 0.5
    h = 1e-5
    converged = False
    for _ in range(max_iter):
        try:
            lam_new = sys60.solve_lambda(alpha, sigma)
        except SeSolverError:
            break
        e1 = sys60.residuals(alpha, sigma, lam_new)[0]
        sigma_new = math.sqrt(max((e1 + kappa**2 * sigma**2), 1e-14)) / kappa
        # One secant step in alpha on equation (II).
        f0 = sys60.residuals(alpha, sigma_new, lam_new)[1]
        f1 = sys60.residuals(alpha + h, sigma_new, lam_new)[1]
        dfda = (f1 - f0) / h
        alpha_new = alpha - f0 / dfda if dfda != 0 else alpha
        alpha = (1 - damp) * alpha + damp * alpha_new
        sigma = (1 - damp) * sigma + damp * sigma_new
        lam_star = (1 - damp) * lam_star + damp * lam_new
        if sigma <= 0 or not np.isfinite([alpha, sigma, lam_star]).all():
            break
        res = np.max(np.abs(sys60.scaled_residuals(alpha, sigma, lam_star)))
        if res <= tol:
            converged = True
            break

    if not converged:
        # Derivative-free fallback in (alpha, log sigma, log lambda).
        def vec(x):
            a, ls, ll = x
            return sys60.scaled_residuals(a, math.exp(ls), math.exp(ll))

        best = None
        for start in ((alpha, sigma, lam_star), (1.0, 1.0 + gamma, 1.0),
                      (0.5, 1.0, 0.5)):
            if start[1] <= 0 or start[2] <= 0:
                continue
            sol = root(vec, x0=[start[0], math.log(start[1]), math.log(start[2])],
                       method="hybr", options={"xtol": 1e-13, "maxfev": 4000})
            cand = (sol.x[0], math.exp(sol.x[1]), math.exp(sol.x[2]))
            res = np.max(np.abs(sys60.scaled_residuals(*cand)))
            if best is None or res < best[1]:
                best = (cand, res)
            if res <= tol:
                break
        (alpha, sigma, lam_star), res = best
        if res > 1e-8:
            raise SeSolverError(
                f"state-evolution solver did not converge at kappa={kappa:.6g}, "
                f"gamma={gamma:.6g}, ridge={lam_ridge:.6g}: residual {res:.3e}"
            )

    # Confirm the fixed point at a finer quadrature order.
    sys90 = _SeSystem(kappa, gamma, lam_ridge, order=90)
    res90 = np.max(np.abs(sys90.scaled_residuals(alpha, sigma, lam_star)))
    if res90 > 1e-9:
        def vec90(x):
            a, ls, ll = x
            return sys90.scaled_residuals(a, math.exp(ls), math.exp(ll))

        sol = root(vec90, x0=[alpha, math.log(sigma), math.log(lam_star)],
                   method="hybr", options={"xtol": 1e-13})
        alpha, sigma, lam_star = sol.x[0], math.exp(sol.x[1]), math.exp(sol.x[2])
        res90 = np.max(np.abs(sys90.scaled_residuals(alpha, sigma, lam_star)))
        if res90 > 1e-8:
            raise SeSolverError(
                f"state-evolution refinement failed at kappa={kappa:.6g}, "
                f"gamma={gamma:.6g}, ridge={lam_ridge:.6g}: residual {res90:.3e}"
            )
    return alpha, sigma, lam_star, float(res90)


def solve_se_mle(kappa_i: float, gamma: float) -> SeParams:
    """Solve the MLE state evolution at dimension ratio kappa_i, signal gamma."""
    alpha, sigma, lam_star, res = _solve_system(kappa_i, gamma, 0.0)
    return SeParams(alpha_star=alpha, sigma_star=sigma, lambda_star=lam_star,
                    kappa_i=kappa_i, gamma=gamma, ridge_lambda=0.0,
                    is_tilde=False, residual=res)


def solve_se_ridge(kappa_i: float, gamma: float, ridge_lambda_scaled: float) -> SeParams:
    """Solve the ridge state evolution; returns observable (tilde) parameters.

    ``ridge_lambda_scaled`` is the penalty of the split-normalized problem
    (the global penalty divided by the split fraction).
    """
    if not ridge_lambda_scaled > 0:
        raise ValueError("ridge_lambda_scaled must be > 0")
    alpha, sigma, lam_star, res = _solve_system(kappa_i, gamma, ridge_lambda_scaled)
    return SeParams(alpha_star=alpha, sigma_star=sigma, lambda_star=lam_star,
                    kappa_i=kappa_i, gamma=gamma,
                    ridge_lambda=ridge_lambda_scaled, is_tilde=True, residual=res)


def joint_covariance(params, gamma: float) -> JointLaw:
    """Fill the 4x4 covariance of (Z_beta, Z_bhat_1, Z_bhat_2, Z_bhat_3)."""
    params = tuple(params)
    if len(params) != 3:
        raise ValueError("need one SeParams per split")
    if any(abs(p.gamma - gamma) > 1e-12 for p in params):
        raise ValueError("SeParams were solved for a different gamma")
    g2 = gamma * gamma
    cov = np.empty((4, 4))
    cov[0, 0] = g2
    for i, p in enumerate(params, start=1):
        cov[0, i] = cov[i, 0] = p.alpha_star * g2
        cov[i, i] = p.kappa_i * p.sigma_star**2 + p.alpha_star**2 * g2
    for i in range(1, 4):
        for j in range(i + 1, 4):
            v = params[i - 1].alpha_star * params[j - 1].alpha_star * g2
            cov[i, j] = cov[j, i] = v
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.min() < -1e-10:
        raise ValueError(f"joint covariance is not PSD: min eigenvalue {eigvals.min():.3e}")
    if eigvals.min() < 0:
        cov = (eigvecs * np.clip(eigvals, 0, None)) @ eigvecs.T
        cov = 0.5 * (cov + cov.T)
    return JointLaw(cov=cov)


# JSON-backed cache of solved parameters, keyed exactly by (kappa_i, gamma, lambda).
_SE_CACHE: dict = {}


def _cache_key(kappa_i: float, gamma: float, ridge_lambda: float) -> str:
    return f"kappa={kappa_i!r}|gamma={gamma!r}|lambda={ridge_lambda!r}"


def solve_se_cached(kappa_i: float, gamma: float, ridge_lambda: float = 0.0) -> SeParams:
    key = _cache_key(kappa_i, gamma, ridge_lambda)
    hit = _SE_CACHE.get(key)
    if hit is not None:
        return hit
    if ridge_lambda == 0.0:
        params = solve_se_mle(kappa_i, gamma)
    else:
        params = solve_se_ridge(kappa_i, gamma, ridge_lambda)
    _SE_CACHE[key] = params
    return params


def save_se_cache(path) -> None:
    with open(path, "w") as fh:
        json.dump({k: v.to_dict() for k, v in _SE_CACHE.items()}, fh, indent=2,
                  sort_keys=True)


def load_se_cache(path) -> int:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        return 0
    for k, v in raw.items():
        _SE_CACHE.setdefault(k, SeParams.from_dict(v))
    return len(raw)
