"""Experiment harness: deterministic replicate-parallel Monte Carlo runs.

Each experiment kind consumes an ``ExperimentSpec``, writes one or more CSV
artifacts plus a shared ``summary.json`` into the output directory, and is
bit-reproducible: replicate seeds are derived from the master seed by
counter-based substreams, results are merged by replicate index, and floats
are serialized with 17 significant digits, so reruns and different worker
counts produce byte-identical files.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .config import ProblemConfig, PsMethod
from .dgp import draw_dataset, draw_signals
from .estimator import (
    PERMUTATIONS,
    aipw_prefit,
    aipw_terms,
    decompose_covariance,
    fit_split_nuisances,
)
from .nuisance import (
    approx_loo_score,
    default_lambda_grid,
    fit_logistic,
    fit_ols,
    ols_predict,
    predict_propensity,
    winsorize,
)
from .rng import STREAM_MISC, dataset_rng, signals_rng, substream
from .state_evolution import joint_covariance
from .variance_oracle import (
    between_pair_theory,
    classical_variance,
    f_ratio_curve,
    scalar_constants,
    sigma_cf,
    solve_se_for_config,
)

EXPERIMENT_KINDS = (
    "variance_inflation",
    "qq",
    "ratio_curves",
    "between_pair",
    "loocv_curve",
    "robustness",
    "ols_existence",
    "se_validation",
)


@dataclass
class ExperimentSpec:
    kind: str
    base: ProblemConfig
    reps: int
    outer_reps: int = 1
    grid: dict = field(default_factory=dict)
    out_dir: str = "."

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.reps < 2:
            raise ValueError("reps must be >= 2 for any variance estimate")


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return str(path)


def merge_summary(out_dir, kind: str, payload: dict) -> str:
    path = os.path.join(out_dir, "summary.json")
    summary = {}
    if os.path.exists(path):
        with open(path) as fh:
            summary = json.load(fh)
    summary[kind] = payload
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _map_indexed(fn, tasks: list, threads: int) -> list:
    """Order-stable parallel map; results identical for any thread count."""
    if threads <= 1:
        return [fn(t) for t in tasks]
    chunk = max(1, len(tasks) // (threads * 8))
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tasks, chunksize=chunk))


# --- replicate worker -------------------------------------------------------

def _crossfit_task(args):
    """One dataset replicate; returns prefit deltas per winsor level."""
    config, signals, outer, rep, eps_levels = args
    ds = draw_dataset(config, signals, dataset_rng(config.seed, outer, rep))
    nus = fit_split_nuisances(ds, config)
    out = []
    valid = True
    for eps in eps_levels:
        prefits = [aipw_prefit(ds, config, perm, nus, winsor_eps=eps)
                   for perm in PERMUTATIONS]
        if not all(pf.ok for pf in prefits):
            valid = False
            out.append(None)
        else:
            out.append([pf.delta for pf in prefits])
    return outer, rep, valid, out


def _run_crossfit_mc(config: ProblemConfig, signals, outer: int, reps: int,
                     threads: int, eps_levels=(None,)):
    """Prefit deltas of shape (valid_reps, 6) per winsor level, plus drops."""
    eps_levels = tuple(config.winsor_eps if e is None else e for e in eps_levels)
    tasks = [(config, signals, outer, r, eps_levels) for r in range(reps)]
    results = _map_indexed(_crossfit_task, tasks, threads)
    results.sort(key=lambda t: (t[0], t[1]))
    per_level: List[list] = [[] for _ in eps_levels]
    dropped = 0
    for _, _, valid, out in results:
        if not valid:
            dropped += 1
            continue
        for k, deltas in enumerate(out):
            per_level[k].append(deltas)
    return [np.asarray(v) for v in per_level], dropped


def _sd_of_scaled(prefits: np.ndarray, config: ProblemConfig) -> float:
    d = math.sqrt(config.n) * (prefits.mean(axis=1) - config.true_ate)
    return float(np.std(d, ddof=1))


# --- experiments ------------------------------------------------------------

def run_variance_inflation(spec: ExperimentSpec, threads: int = 1) -> dict:
    """SD of sqrt(n)(cross-fit - truth) per signal draw, against both theories."""
    cfg = spec.base
    report = sigma_cf(cfg)
    sd_classical = math.sqrt(classical_variance(cfg))
    rows = []
    total_dropped = 0
    for outer in range(spec.outer_reps):
        signals = draw_signals(cfg, signals_rng(cfg.seed, outer))
        (prefits,), dropped = _run_crossfit_mc(cfg, signals, outer, spec.reps, threads)
        total_dropped += dropped
        rows.append((outer, _sd_of_scaled(prefits, cfg), sd_classical,
                     report.sd_cf, prefits.shape[0], dropped))
    path = os.path.join(spec.out_dir, "variance_inflation.csv")
    write_csv(path, ["outer_idx", "sd_empirical", "sd_classical", "sd_theory",
                     "n_valid", "n_dropped"], rows)
    payload = {
        "sd_theory": report.sd_cf,
        "sd_classical": sd_classical,
        "sigma_cf_sq": report.sigma_cf_sq,
        "dropped": total_dropped,
        "drop_fraction": total_dropped / (spec.reps * spec.outer_reps),
        "reps": spec.reps,
        "outer_reps": spec.outer_reps,
        "seed": cfg.seed,
    }
    merge_summary(spec.out_dir, "variance_inflation", payload)
    return {"csv": path, **payload}


def _qq_rows(prefits_wins, prefits_raw, config, sd_theory, sd_classical):
    n = config.n
    est_w = np.sort(math.sqrt(n) * (prefits_wins.mean(axis=1) - config.true_ate))
    est_r = np.sort(math.sqrt(n) * (prefits_raw.mean(axis=1) - config.true_ate))
    m = est_w.size
    q = norm.ppf((np.arange(1, m + 1) - 0.5) / m)
    rows = []
    for i in range(m):
        rows.append((i, q[i], est_w[i] / sd_theory, est_w[i] / sd_classical,
                     est_r[i] / sd_theory, est_r[i] / sd_classical))
    return rows


def run_qq(spec: ExperimentSpec, threads: int = 1, csv_name: str = "qq.csv",
           summary_key: str = "qq") -> dict:
    """Normal QQ data for the standardized cross-fit estimator (winsorized+raw)."""
    cfg = spec.base
    report = sigma_cf(cfg)
    sd_classical = math.sqrt(classical_variance(cfg))
    signals = draw_signals(cfg, signals_rng(cfg.seed, 0))
    (wins, raw), dropped = _run_crossfit_mc(
        cfg, signals, 0, spec.reps, threads, eps_levels=(cfg.winsor_eps, 0.0)
    )
    rows = _qq_rows(wins, raw, cfg, report.sd_cf, sd_classical)
    path = os.path.join(spec.out_dir, csv_name)
    write_csv(path, ["idx", "normal_quantile", "std_theory_wins",
                     "std_classical_wins", "std_theory_raw", "std_classical_raw"],
              rows)
    payload = {
        "sd_theory": report.sd_cf,
        "sd_classical": sd_classical,
        "sd_empirical_wins": _sd_of_scaled(wins, cfg),
        "sd_empirical_raw": _sd_of_scaled(raw, cfg),
        "covariate_family": cfg.covariate_family,
        "dropped": dropped,
        "drop_fraction": dropped / spec.reps,
        "reps": spec.reps,
        "seed": cfg.seed,
    }
    merge_summary(spec.out_dir, summary_key, payload)
    return {"csv": path, **payload}


def run_ratio_curves(spec: ExperimentSpec, threads: int = 1) -> dict:
    """log f-ratio and log total-variance ratio over a (kappa, gamma) grid."""
    kappas = spec.grid.get("kappa", [0.01, 0.02, 0.04, 0.06, 0.08, 0.10, 0.12])
    gammas = spec.grid.get("gamma", [0.4, 0.8])
    rows = []
    skipped = []
    for gamma in gammas:
        got, skip = f_ratio_curve(gamma, kappas,
                                  split_fractions=spec.base.split_fractions,
                                  ps_method=spec.base.ps_method)
        for row in got:
            rows.append((row["kappa"], gamma, row["f_value"],
                         row["classical_moment"], row["log_f_ratio"],
                         row["log_total_ratio"]))
        skipped.extend({**s, "gamma": gamma} for s in skip)
    path = os.path.join(spec.out_dir, "ratio_curves.csv")
    write_csv(path, ["kappa", "gamma", "f_value", "classical_moment",
                     "log_f_ratio", "log_total_ratio"], rows)
    payload = {"skipped": skipped, "n_points": len(rows)}
    merge_summary(spec.out_dir, "ratio_curves", payload)
    return {"csv": path, **payload}


def _theory_between(kappa_split: float, gamma: float, base: ProblemConfig) -> float:
    """between_pair_theory at equal thirds with per-split ratio kappa_split."""
    n = 30000
    p = max(1, int(round(kappa_split / 3.0 * n)))
    kappa = p / n
    cfg = base.with_(n=n, p=p, split_sizes=(10000, 10000, 10000), gamma=gamma,
                     sigma0_beta=0.1 / math.sqrt(kappa),
                     sigma1_beta=0.1 / math.sqrt(kappa))
    se = solve_se_for_config(cfg)
    law = joint_covariance(se, gamma)
    consts = scalar_constants(cfg, se, law)
    return between_pair_theory(cfg, se, law, consts)


def run_between_pair(spec: ExperimentSpec, threads: int = 1) -> dict:
    """Theoretical between-pair covariance over a grid plus one empirical check."""
    kappa_splits = spec.grid.get("kappa_split", [0.05, 0.1, 0.2])
    gammas = spec.grid.get("gamma", [0.2, 0.5, 0.8])
    rows = []
    theory_grid = {}
    for gamma in gammas:
        for ks in kappa_splits:
            theory = _theory_between(ks, gamma, spec.base)
            theory_grid[f"kappa_split={ks:g},gamma={gamma:g}"] = theory
            rows.append((ks / 3.0, ks, gamma, theory, float("nan"), float("nan")))
    # Empirical check at the base configuration.
    cfg = spec.base
    report = sigma_cf(cfg)
    signals = draw_signals(cfg, signals_rng(cfg.seed, 0))
    (prefits,), dropped = _run_crossfit_mc(cfg, signals, 0, spec.reps, threads)
    dec = decompose_covariance(prefits, cfg.true_ate, cfg.n)
    boot_rng = substream(cfg.seed, STREAM_MISC, 1)
    R = prefits.shape[0]
    boots = []
    for _ in range(200):
        idx = boot_rng.integers(0, R, R)
        boots.append(decompose_covariance(prefits[idx], cfg.true_ate, cfg.n).between_pair)
    mc_se = float(np.std(boots, ddof=1))
    rows.append((cfg.kappa, cfg.kappa_splits[0], cfg.gamma,
                 report.between_pair_theory, dec.between_pair, mc_se))
    path = os.path.join(spec.out_dir, "between_pair.csv")
    write_csv(path, ["kappa", "kappa_split", "gamma", "theory", "empirical",
                     "mc_se"], rows)
    payload = {
        "theory_grid": theory_grid,
        "base_theory": report.between_pair_theory,
        "base_empirical": dec.between_pair,
        "base_mc_se": mc_se,
        "decomposition": {
            "var_sum": dec.var_sum, "within_pair": dec.within_pair,
            "between_pair": dec.between_pair, "total": dec.total,
        },
        "dropped": dropped,
        "reps": spec.reps,
    }
    merge_summary(spec.out_dir, "between_pair", payload)
    return {"csv": path, **payload}


def _loocv_task(args):
    """One replicate of the ridge-lambda sweep: per-lambda cross-fit deltas
    plus the lambda chosen by approximate LOOCV on split 1."""
    config, signals, rep, lambdas = args
    ds = draw_dataset(config, signals, dataset_rng(config.seed, 0, rep))
    or_fits = {}
    for s in (1, 2, 3):
        rows = ds.split_rows(s)
        or_fits[(s, 1)] = fit_ols(ds.X[rows], ds.y[rows], mask=ds.A[rows] == 1)
        or_fits[(s, 0)] = fit_ols(ds.X[rows], ds.y[rows], mask=ds.A[rows] == 0)
    if not all(f.unique for f in or_fits.values()):
        return rep, None, None
    deltas = []
    chosen = None
    best_score = np.inf
    for lam in lambdas:
        ps_fits = {}
        for s in (1, 2, 3):
            rows = ds.split_rows(s)
            ps_fits[s] = fit_logistic(ds.X[rows], ds.A[rows], lam=lam)
        if not all(f.converged for f in ps_fits.values()):
            return rep, None, None
        per_perm = []
        for (a, b, c) in PERMUTATIONS:
            rows = ds.split_rows(c)
            Xc = ds.X[rows]
            phat = winsorize(predict_propensity(ps_fits[a], Xc), config.winsor_eps)
            m1 = ols_predict(or_fits[(b, 1)], Xc)
            m0 = ols_predict(or_fits[(b, 0)], Xc)
            d1, d0 = aipw_terms(ds.y[rows], ds.A[rows], phat, m1, m0)
            per_perm.append(d1 - d0)
        deltas.append(float(np.mean(per_perm)))
        rows1 = ds.split_rows(1)
        score = approx_loo_score(ds.X[rows1], ds.A[rows1], lam, fit=ps_fits[1])
        if score <= best_score:
            best_score = score
            chosen = lam
    return rep, deltas, chosen


def run_loocv_curve(spec: ExperimentSpec, threads: int = 1) -> dict:
    """SD of the ridge cross-fit estimator across the LOOCV lambda grid."""
    cfg = spec.base
    lambdas = [float(x) for x in spec.grid.get("lambda", default_lambda_grid())]
    theory = {lam: sigma_cf(cfg, PsMethod("ridge", lam)).sd_cf for lam in lambdas}
    sd_mle = sigma_cf(cfg, PsMethod("mle")).sd_cf
    signals = draw_signals(cfg, signals_rng(cfg.seed, 0))
    tasks = [(cfg, signals, r, lambdas) for r in range(spec.reps)]
    results = _map_indexed(_loocv_task, tasks, threads)
    results.sort(key=lambda t: t[0])
    deltas = np.array([d for _, d, _ in results if d is not None])
    chosen = [c for _, _, c in results if c is not None]
    dropped = spec.reps - deltas.shape[0]
    scaled = math.sqrt(cfg.n) * (deltas - cfg.true_ate)
    sd_emp = np.std(scaled, axis=0, ddof=1)
    counts = {lam: 0 for lam in lambdas}
    for c in chosen:
        counts[c] += 1
    modal = max(lambdas, key=lambda lam: (counts[lam], lam))
    rows = [(lam, theory[lam], sd_emp[i], int(lam == modal), counts[lam])
            for i, lam in enumerate(lambdas)]
    path = os.path.join(spec.out_dir, "loocv_curve.csv")
    write_csv(path, ["lambda", "sd_theory", "sd_empirical", "chosen_by_loocv",
                     "n_chosen"], rows)
    lam_best = min(lambdas, key=lambda lam: theory[lam])
    payload = {
        "lambda_grid": lambdas,
        "lambda_loocv_modal": modal,
        "lambda_theory_optimal": lam_best,
        "sd_theory_at_loocv": theory[modal],
        "sd_theory_optimal": theory[lam_best],
        "sd_theory_mle": sd_mle,
        "suboptimality": theory[modal] / theory[lam_best] - 1.0,
        "dropped": dropped,
        "reps": spec.reps,
    }
    merge_summary(spec.out_dir, "loocv_curve", payload)
    return {"csv": path, **payload}


def run_robustness(spec: ExperimentSpec, threads: int = 1) -> dict:
    """QQ experiment under the uniform and discrete covariate families."""
    out = {}
    for family in ("uniform", "hwe_discrete"):
        sub = ExperimentSpec(kind="qq", base=spec.base.with_(covariate_family=family),
                             reps=spec.reps, outer_reps=1, out_dir=spec.out_dir)
        out[family] = run_qq(sub, threads, csv_name=f"robustness_{family}.csv",
                             summary_key=f"robustness_{family}")
    return out


def _ols_existence_task(args):
    config, kappa_b, rep, p = args
    n_b = int(round(p / kappa_b))
    rng = dataset_rng(config.seed, int(round(kappa_b * 1000)), rep)
    beta = rng.standard_normal(p)
    nrm = np.linalg.norm(beta)
    if config.gamma > 0 and nrm > 0:
        beta *= math.sqrt(n_b * config.gamma**2) / nrm
    else:
        beta[:] = 0.0
    X = rng.standard_normal((n_b, p)) / math.sqrt(n_b)
    A = (rng.random(n_b) < expit(X @ beta)).astype(np.int8)
    if int(A.sum()) == 0:
        return kappa_b, rep, False
    y = X @ beta + rng.standard_normal(n_b)
    fit = fit_ols(X, y, mask=A == 1)
    return kappa_b, rep, bool(fit.unique)


def run_ols_existence(spec: ExperimentSpec, threads: int = 1) -> dict:
    """Empirical OLS-uniqueness rate versus the per-arm dimension ratio."""
    kappas = spec.grid.get("kappa_b", [0.3, 0.4, 0.45, 0.5, 0.55, 0.6, 0.7])
    p = int(spec.grid.get("p", 200))
    rows = []
    rates = {}
    for kb in kappas:
        tasks = [(spec.base, kb, r, p) for r in range(spec.reps)]
        results = _map_indexed(_ols_existence_task, tasks, threads)
        rate = float(np.mean([ok for _, _, ok in results]))
        rates[f"{kb:g}"] = rate
        rows.append((kb, rate, spec.reps))
    path = os.path.join(spec.out_dir, "ols_existence.csv")
    write_csv(path, ["kappa_b", "unique_rate", "n_reps"], rows)
    payload = {"rates": rates, "p": p, "reps": spec.reps}
    merge_summary(spec.out_dir, "ols_existence", payload)
    return {"csv": path, **payload}


def _se_validation_task(args):
    n, kappa, gamma, lam, rep, seed = args
    p = int(round(kappa * n))
    rng = dataset_rng(seed, int(1000 * lam) + 7, rep)
    beta = rng.standard_normal(p)
    beta *= math.sqrt(n * gamma**2) / np.linalg.norm(beta)
    X = rng.standard_normal((n, p)) / math.sqrt(n)
    A = (rng.random(n) < expit(X @ beta)).astype(np.int8)
    fit = fit_logistic(X, A, lam=lam, gamma_sq_cap=gamma**2)
    if not fit.converged:
        return rep, None, None
    return rep, float(fit.coef @ beta / (beta @ beta)), float(fit.coef @ fit.coef / n)


def run_se_validation(spec: ExperimentSpec, threads: int = 1) -> dict:
    """State-evolution parameters against direct Monte Carlo single-split fits."""
    from .state_evolution import solve_se_cached

    n = int(spec.grid.get("n", 8000))
    kappa = float(spec.grid.get("kappa", 0.21))
    gamma = float(spec.grid.get("gamma", 1.0))
    ridge_lam = float(spec.grid.get("ridge_lambda", 0.5))
    rows = []
    payload = {}
    for lam in (0.0, ridge_lam):
        se = solve_se_cached(kappa, gamma, lam)
        tasks = [(n, kappa, gamma, lam, r, spec.base.seed) for r in range(spec.reps)]
        results = _map_indexed(_se_validation_task, tasks, threads)
        alphas = np.array([a for _, a, _ in results if a is not None])
        norms = np.array([m for _, _, m in results if m is not None])
        for name, theory, mc in (
            ("alpha", se.alpha_star, alphas),
            ("predictor_variance", se.predictor_variance, norms),
        ):
            mean = float(mc.mean())
            mc_se = float(mc.std(ddof=1) / math.sqrt(mc.size))
            rows.append((name, kappa, gamma, lam, theory, mean, mc_se,
                         mean / theory - 1.0, mc.size))
            payload[f"{name}_lam_{lam:g}"] = {
                "theory": theory, "mc": mean, "mc_se": mc_se,
                "rel_err": mean / theory - 1.0,
            }
    path = os.path.join(spec.out_dir, "se_validation.csv")
    write_csv(path, ["quantity", "kappa", "gamma", "lambda", "theory", "mc_mean",
                     "mc_se", "rel_err", "n_reps"], rows)
    payload.update({"n": n, "kappa": kappa, "gamma": gamma, "reps": spec.reps})
    merge_summary(spec.out_dir, "se_validation", payload)
    return {"csv": path, **payload}


RUNNERS = {
    "variance_inflation": run_variance_inflation,
    "qq": run_qq,
    "ratio_curves": run_ratio_curves,
    "between_pair": run_between_pair,
    "loocv_curve": run_loocv_curve,
    "robustness": run_robustness,
    "ols_existence": run_ols_existence,
    "se_validation": run_se_validation,
}


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> dict:
    os.makedirs(spec.out_dir, exist_ok=True)
    return RUNNERS[spec.kind](spec, threads)
