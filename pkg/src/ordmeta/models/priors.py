"""Prior configuration and scalar log-density helpers (numpy route).

All hyperpriors are weakly informative and overridable through a JSON
config.  Scale parameters are sampled on the log scale, so every helper
that takes an unconstrained value includes its transform Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import stats

__all__ = ["PriorSet", "DEFAULT_PRIORS"]

_LOG_2 = math.log(2.0)


@dataclass(frozen=True)
class PriorSet:
    """Hyperprior settings shared by every model family.

    ``sigma_*_sd`` values are half-normal scales for between-study SDs;
    ``rho_conc`` is the symmetric Beta shape placed on (rho+1)/2; the
    Student-t triple is the prior on log(kappa) for random-cutpoint
    models; ``dirichlet_alpha`` is the flat induced-Dirichlet
    concentration used by fixed-cutpoint models.
    """

    mu_beta_sd: float = 2.0
    sigma_beta_sd: float = 0.5
    rho_conc: float = 2.0
    dirichlet_alpha: float = 1.0
    log_kappa_df: float = 5.0
    log_kappa_loc: float = 3.0
    log_kappa_scale: float = 1.5
    mu_gamma_sd: float = 0.5
    sigma_gamma_sd: float = 0.25
    mu_logscale_sd: float = 0.5
    sigma_logscale_sd: float = 0.25

    def __post_init__(self):
        for name in ("mu_beta_sd", "sigma_beta_sd", "rho_conc",
                     "dirichlet_alpha", "log_kappa_df", "log_kappa_scale",
                     "mu_gamma_sd", "sigma_gamma_sd", "mu_logscale_sd",
                     "sigma_logscale_sd"):
            if getattr(self, name) <= 0:
                raise ValueError(f"prior hyperparameter {name} must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PriorSet":
        unknown = set(doc) - set(cls().to_dict())
        if unknown:
            raise ValueError(f"unknown prior fields: {sorted(unknown)}")
        return replace(cls(), **{k: float(v) for k, v in doc.items()})


DEFAULT_PRIORS = PriorSet()


def normal_logpdf(x, sd) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(-0.5 * (x / sd) ** 2 - 0.5 * math.log(2 * math.pi)
                        - math.log(sd)))


def std_normal_logpdf(z) -> float:
    return normal_logpdf(z, 1.0)


def halfnormal_logsigma_logpdf(log_sigma, sd) -> float:
    """Half-normal prior on sigma evaluated at u = log(sigma), Jacobian in."""
    log_sigma = np.asarray(log_sigma, dtype=float)
    sigma = np.exp(log_sigma)
    return float(np.sum(_LOG_2 - 0.5 * (sigma / sd) ** 2
                        - 0.5 * math.log(2 * math.pi) - math.log(sd)
                        + log_sigma))


def rho_logpdf(rho_raw: float, conc: float) -> float:
    """Symmetric Beta(conc, conc) prior on (-1,1), at the raw logit value.

    rho = 2*expit(raw) - 1; the expit Jacobian folds in so the density is
    with respect to the unconstrained raw coordinate.
    """
    g = 1.0 / (1.0 + math.exp(-rho_raw))
    log_beta = float(stats.beta.logpdf(g, conc, conc))
    return log_beta + math.log(g) + math.log1p(-g)


def student_t_logpdf(x: float, df: float, loc: float, scale: float) -> float:
    return float(stats.t.logpdf(x, df, loc=loc, scale=scale))
