"""Problem configuration: all scalar parameters of the synthetic problem.

A ``ProblemConfig`` fully determines one simulation setting: sizes, the
3-way split, signal strengths of the propensity-score (PS) and outcome-
regression (OR) models, noise levels, the covariate family, winsorization
level and the PS fitting method. Configs are ingested from JSON documents
whose field names match the dataclass fields exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Tuple

COVARIATE_FAMILIES = ("gaussian", "uniform", "hwe_discrete")


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


@dataclass(frozen=True)
class PsMethod:
    """Propensity-score fitting method: MLE or ridge with penalty lam."""

    kind: str = "mle"  # "mle" | "ridge"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("mle", "ridge"):
            raise ConfigError(f"unknown ps_method kind {self.kind!r}")
        if self.kind == "ridge" and not self.lam > 0:
            raise ConfigError("ridge ps_method requires lam > 0")
        if self.kind == "mle" and self.lam != 0.0:
            raise ConfigError("mle ps_method must have lam == 0")

    def to_json_obj(self):
        return "mle" if self.kind == "mle" else {"ridge": self.lam}

    @staticmethod
    def from_json_obj(obj) -> "PsMethod":
        if obj == "mle" or obj is None:
            return PsMethod("mle", 0.0)
        if isinstance(obj, dict) and set(obj) == {"ridge"}:
            return PsMethod("ridge", float(obj["ridge"]))
        raise ConfigError(f"cannot parse ps_method {obj!r}")


@dataclass(frozen=True)
class ProblemConfig:
    """Scalar problem parameters; see module docstring."""

    n: int
    p: int
    split_sizes: Tuple[int, int, int]
    gamma: float
    sigma0_beta: float
    sigma1_beta: float
    rho01: float
    alpha0: float
    alpha1: float
    sigma_eps0: float
    sigma_eps1: float
    covariate_family: str = "gaussian"
    winsor_eps: float = 0.005
    ps_method: PsMethod = field(default_factory=PsMethod)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split_sizes", tuple(int(s) for s in self.split_sizes))
        if self.n < 1 or self.p < 1:
            raise ConfigError("n and p must be positive")
        if len(self.split_sizes) != 3:
            raise ConfigError("split_sizes must have exactly 3 entries")
        if sum(self.split_sizes) != self.n:
            raise ConfigError("split_sizes must sum to n")
        if any(s < self.p + 2 for s in self.split_sizes):
            raise ConfigError("each split must have at least p + 2 samples")
        if self.gamma < 0 or self.sigma0_beta < 0 or self.sigma1_beta < 0:
            raise ConfigError("signal scales must be nonnegative")
        if abs(self.rho01) > 1:
            raise ConfigError("|rho01| must be <= 1")
        if not (self.sigma_eps0 > 0 and self.sigma_eps1 > 0):
            raise ConfigError("noise SDs must be positive")
        if self.covariate_family not in COVARIATE_FAMILIES:
            raise ConfigError(f"unknown covariate_family {self.covariate_family!r}")
        if not (0 <= self.winsor_eps < 0.5):
            raise ConfigError("winsor_eps must lie in [0, 0.5)")
        if not isinstance(self.ps_method, PsMethod):
            object.__setattr__(self, "ps_method", PsMethod.from_json_obj(self.ps_method))

    # Derived dimension ratios.
    @property
    def kappa(self) -> float:
        return self.p / self.n

    @property
    def split_fractions(self) -> Tuple[float, float, float]:
        return tuple(s / self.n for s in self.split_sizes)

    @property
    def kappa_splits(self) -> Tuple[float, float, float]:
        return tuple(self.p / s for s in self.split_sizes)

    def with_(self, **kwargs) -> "ProblemConfig":
        return replace(self, **kwargs)

    def to_json(self) -> str:
        obj = {
            "n": self.n,
            "p": self.p,
            "split_sizes": list(self.split_sizes),
            "gamma": self.gamma,
            "sigma0_beta": self.sigma0_beta,
            "sigma1_beta": self.sigma1_beta,
            "rho01": self.rho01,
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "sigma_eps0": self.sigma_eps0,
            "sigma_eps1": self.sigma_eps1,
            "covariate_family": self.covariate_family,
            "winsor_eps": self.winsor_eps,
            "ps_method": self.ps_method.to_json_obj(),
            "seed": self.seed,
        }
        return json.dumps(obj, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ProblemConfig":
        obj = json.loads(text)
        try:
            return ProblemConfig(
                n=int(obj["n"]),
                p=int(obj["p"]),
                split_sizes=tuple(obj["split_sizes"]),
                gamma=float(obj["gamma"]),
                sigma0_beta=float(obj["sigma0_beta"]),
                sigma1_beta=float(obj["sigma1_beta"]),
                rho01=float(obj["rho01"]),
                alpha0=float(obj["alpha0"]),
                alpha1=float(obj["alpha1"]),
                sigma_eps0=float(obj["sigma_eps0"]),
                sigma_eps1=float(obj["sigma_eps1"]),
                covariate_family=obj.get("covariate_family", "gaussian"),
                winsor_eps=float(obj.get("winsor_eps", 0.005)),
                ps_method=PsMethod.from_json_obj(obj.get("ps_method", "mle")),
                seed=int(obj.get("seed", 0)),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config field {exc}") from exc

    @property
    def true_ate(self) -> float:
        return self.alpha1 - self.alpha0

    @property
    def signal_diff_var(self) -> float:
        """kappa * Var-limit factor of x'(beta1 - beta0): the V_T2 ingredient."""
        return (
            self.sigma0_beta**2
            + self.sigma1_beta**2
            - 2 * self.rho01 * self.sigma0_beta * self.sigma1_beta
        )


def benchmark_config(scale: float = 1.0, seed: int = 0, **overrides) -> ProblemConfig:
    """Benchmark configuration: equal thirds, gamma=0.1, OR scales 0.1/sqrt(kappa).

    ``scale=1`` is the full benchmark size (n=10000, p=700, splits
    3333/3333/3334); smaller scales shrink n and p proportionally while
    keeping every dimension ratio fixed.
    """
    if not 0 < scale <= 1:
        raise ConfigError("scale must lie in (0, 1]")
    n = max(30, int(round(10000 * scale)))
    p = max(3, int(round(700 * scale)))
    n1 = n // 3
    n2 = n // 3
    n3 = n - n1 - n2
    kappa = p / n
    base = ProblemConfig(
        n=n,
        p=p,
        split_sizes=(n1, n2, n3),
        gamma=0.1,
        sigma0_beta=0.1 / kappa**0.5,
        sigma1_beta=0.1 / kappa**0.5,
        rho01=0.2,
        alpha0=0.0,
        alpha1=2.0,
        sigma_eps0=1.0,
        sigma_eps1=1.0,
        covariate_family="gaussian",
        winsor_eps=0.005,
        ps_method=PsMethod(),
        seed=seed,
    )
    if overrides:
        base = base.with_(**overrides)
    return base
