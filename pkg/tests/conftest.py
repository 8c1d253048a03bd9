"""Shared fixtures. BLAS threading is pinned before numpy loads so that
results are identical no matter how tests parallelize work."""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from crossfit_aipw.config import benchmark_config  # noqa: E402


@pytest.fixture(scope="session")
def desk_config():
    """Reduced-scale benchmark configuration (one third of the full size)."""
    return benchmark_config(scale=1 / 3, seed=2024)


@pytest.fixture(scope="session")
def desk_report(desk_config):
    from crossfit_aipw.variance_oracle import sigma_cf

    return sigma_cf(desk_config)


@pytest.fixture(scope="session")
def desk_mc(desk_config):
    """Shared Monte Carlo at the desk-scale benchmark: >= 1000 valid
    replicates of the six pre-cross-fit estimates (winsorized)."""
    from crossfit_aipw.dgp import draw_signals
    from crossfit_aipw.experiments import _run_crossfit_mc
    from crossfit_aipw.rng import signals_rng

    cfg = desk_config
    signals = draw_signals(cfg, signals_rng(cfg.seed, 0))
    (prefits,), dropped = _run_crossfit_mc(cfg, signals, 0, 1050, threads=2)
    assert prefits.shape[0] >= 1000, "too many dropped replicates"
    return prefits, dropped


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
