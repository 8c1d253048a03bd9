"""The 3-split cross-fit AIPW estimator and its covariance decomposition.

For each of the six permutations (a, b, c) of the splits, the propensity
score is fit on S_a, the two outcome regressions on S_b, and the AIPW value
is evaluated on S_c; the cross-fit estimate is the average of the six.
Nuisances are fit once per split and shared across permutations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations
from typing import List, Sequence, Tuple

import numpy as np

from .config import ProblemConfig
from .dgp import Dataset
from .nuisance import (
    LogisticFit,
    OlsFit,
    fit_logistic,
    fit_ols,
    ols_predict,
    predict_propensity,
    winsorize,
)

# Canonical permutation order: (ps_split, or_split, eval_split).
PERMUTATIONS: Tuple[Tuple[int, int, int], ...] = tuple(permutations((1, 2, 3)))


@dataclass
class PreCrossFit:
    perm: Tuple[int, int, int]
    delta1: float
    delta0: float
    delta: float
    ps_exists: bool
    or_unique: bool

    @property
    def ok(self) -> bool:
        return self.ps_exists and self.or_unique


@dataclass
class CrossFitResult:
    prefits: List[PreCrossFit]
    delta_cf: float
    valid: bool
    failures: List[Tuple[Tuple[int, int, int], str]] = field(default_factory=list)


@dataclass
class CovDecomposition:
    var_sum: float
    within_pair: float
    between_pair: float
    total: float


def aipw_terms(y: np.ndarray, A: np.ndarray, phat: np.ndarray,
               m1: np.ndarray, m0: np.ndarray) -> Tuple[float, float]:
    """The two AIPW averages on one evaluation set, given nuisance values."""
    y = np.asarray(y, dtype=float)
    A = np.asarray(A, dtype=float)
    delta1 = float(np.mean(A * y / phat - (A - phat) / phat * m1))
    delta0 = float(np.mean((1.0 - A) * y / (1.0 - phat) + (A - phat) / (1.0 - phat) * m0))
    return delta1, delta0


@dataclass
class SplitNuisances:
    """Per-split fits: one PS fit and one OLS fit per arm."""

    ps: List[LogisticFit]
    or0: List[OlsFit]
    or1: List[OlsFit]

    def ps_for(self, split: int) -> LogisticFit:
        return self.ps[split - 1]

    def or_for(self, split: int, arm: int) -> OlsFit:
        return (self.or1 if arm == 1 else self.or0)[split - 1]


def _ols_or_flagged(Xs, ys, mask) -> OlsFit:
    if int(np.count_nonzero(mask)) < 1:
        return OlsFit(intercept=np.nan, coef=np.full(Xs.shape[1], np.nan),
                      unique=False, gram_condition=np.inf)
    return fit_ols(Xs, ys, mask=mask)


def fit_split_nuisances(dataset: Dataset, config: ProblemConfig) -> SplitNuisances:
    ps_fits, or0_fits, or1_fits = [], [], []
    lam = config.ps_method.lam if config.ps_method.kind == "ridge" else 0.0
    for s in (1, 2, 3):
        rows = dataset.split_rows(s)
        Xs = dataset.X[rows]
        As = dataset.A[rows]
        ys = dataset.y[rows]
        ps_fits.append(
            fit_logistic(Xs, As, lam=lam, gamma_sq_cap=max(config.gamma**2, 1.0))
        )
        or1_fits.append(_ols_or_flagged(Xs, ys, As == 1))
        or0_fits.append(_ols_or_flagged(Xs, ys, As == 0))
    return SplitNuisances(ps=ps_fits, or0=or0_fits, or1=or1_fits)


def aipw_prefit(dataset: Dataset, config: ProblemConfig, perm: Tuple[int, int, int],
                nuisances: SplitNuisances, winsor_eps: float | None = None) -> PreCrossFit:
    """One pre-cross-fit AIPW estimate for permutation (a, b, c)."""
    a, b, c = perm
    ps_fit = nuisances.ps_for(a)
    or1 = nuisances.or_for(b, 1)
    or0 = nuisances.or_for(b, 0)
    ps_exists = ps_fit.exists and ps_fit.converged
    or_unique = or1.unique and or0.unique
    if not (ps_exists and or_unique):
        return PreCrossFit(perm=perm, delta1=np.nan, delta0=np.nan, delta=np.nan,
                           ps_exists=ps_exists, or_unique=or_unique)
    rows = dataset.split_rows(c)
    Xc = dataset.X[rows]
    eps = config.winsor_eps if winsor_eps is None else winsor_eps
    phat = winsorize(predict_propensity(ps_fit, Xc), eps)
    m1 = ols_predict(or1, Xc)
    m0 = ols_predict(or0, Xc)
    delta1, delta0 = aipw_terms(dataset.y[rows], dataset.A[rows], phat, m1, m0)
    return PreCrossFit(perm=perm, delta1=delta1, delta0=delta0,
                       delta=delta1 - delta0, ps_exists=ps_exists,
                       or_unique=or_unique)


def crossfit_aipw(dataset: Dataset, config: ProblemConfig,
                  nuisances: SplitNuisances | None = None,
                  winsor_eps: float | None = None) -> CrossFitResult:
    """Average the six pre-cross-fit estimates; nuisances fit once per split."""
    if nuisances is None:
        nuisances = fit_split_nuisances(dataset, config)
    prefits = [aipw_prefit(dataset, config, perm, nuisances, winsor_eps)
               for perm in PERMUTATIONS]
    failures = []
    for pf in prefits:
        if not pf.ok:
            reasons = []
            if not pf.ps_exists:
                reasons.append("ps fit does not exist / did not converge")
            if not pf.or_unique:
                reasons.append("ols fit not unique")
            failures.append((pf.perm, "; ".join(reasons)))
    valid = not failures
    delta_cf = float(np.mean([pf.delta for pf in prefits])) if valid else np.nan
    return CrossFitResult(prefits=prefits, delta_cf=delta_cf, valid=valid,
                          failures=failures)


def _eval_split_of(perm: Tuple[int, int, int]) -> int:
    return perm[2]


def decompose_covariance(replicate_prefits: Sequence[Sequence[float]],
                         true_delta: float, n: int) -> CovDecomposition:
    """Empirical covariance decomposition of the six pre-cross-fit estimates.

    Input rows are the six prefit deltas per replicate in PERMUTATIONS order;
    they are centered at the true effect and put on the sqrt(n) scale. The
    three groups sum covariance entries of the 6x6 matrix: variances, ordered
    pairs sharing the evaluation split, and ordered pairs with distinct
    evaluation splits. With this convention
    var_sum + within_pair + between_pair = 36 * Var(mean prefit) exactly.
    """
    D = np.asarray(replicate_prefits, dtype=float)
    if D.ndim != 2 or D.shape[1] != 6:
        raise ValueError("expected an (R, 6) array of prefit deltas")
    if D.shape[0] < 2:
        raise ValueError("need at least 2 replicates")
    if not np.all(np.isfinite(D)):
        raise ValueError("invalid replicates must be filtered by the caller")
    Z = np.sqrt(n) * (D - true_delta)
    C = np.cov(Z.T, ddof=1)
    evals = [_eval_split_of(p) for p in PERMUTATIONS]
    var_sum = float(np.trace(C))
    within = 0.0
    between = 0.0
    for i in range(6):
        for j in range(6):
            if i == j:
                continue
            if evals[i] == evals[j]:
                within += C[i, j]
            else:
                between += C[i, j]
    return CovDecomposition(var_sum=var_sum, within_pair=float(within),
                            between_pair=float(between),
                            total=float(var_sum + within + between))
