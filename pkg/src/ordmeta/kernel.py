"""Threshold-probability algebra for ordinal test-accuracy models.

Everything here is a pure numpy/scipy function: ordinal category
probabilities, survival/conditional probabilities, the factorized
binomial log-likelihood with missing-threshold skip-conditioning, the
cutpoint<->probability bijection, and the induced-Dirichlet density on
ordered cutpoints with its exact Jacobian.

Conventions
-----------
* ``K`` ordinal categories, cutpoints ``c[0..K-2]`` strictly increasing
  (1-based threshold k corresponds to ``c[k-1]``).
* Survival probability at threshold k is Pr(score > k) = Phi((beta - c_k)
  / scale); category probabilities telescope from the CDF.
* Probabilities are clamped to ``[CLAMP_EPS, 1 - CLAMP_EPS]`` before
  logs; inside the clamped region derivatives are zero by construction,
  which keeps gradients finite (documented behavior, see tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special, stats

__all__ = [
    "CLAMP_EPS",
    "MISSING",
    "DirichletHyper",
    "CutpointResult",
    "ordinal_probs",
    "cumulative_probs",
    "survival_probs",
    "conditional_probs",
    "factorized_loglik",
    "log_chain_coeffs",
    "probs_to_cutpoints",
    "cutpoints_to_probs",
    "induced_dirichlet_logpdf",
    "log_kappa_jacobian",
    "cutpoints_from_unconstrained",
    "unconstrained_from_cutpoints",
    "simplex_from_unconstrained",
    "unconstrained_from_simplex",
]

#: Probability clamp applied before logs.
CLAMP_EPS = 1e-12

#: Sentinel for a missing threshold count.
MISSING = -1


def _phi(x):
    return special.ndtr(x)


def _phi_inv(p):
    return special.ndtri(p)


def _check_cutpoints(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.ndim != 1 or c.size < 1:
        raise ValueError("cutpoints must be a 1-D vector of length >= 1")
    if np.any(np.diff(c) <= 0):
        raise ValueError(f"cutpoints must be strictly increasing, got {c}")
    return c


@dataclass(frozen=True)
class DirichletHyper:
    """Concentration parameters of the induced-Dirichlet prior.

    ``alpha[j] = 0.01 + phi_mean[j] * kappa`` when built from a simplex
    mean and a concentration scalar; the 0.01 floor keeps every
    concentration strictly positive.  ``anchor`` is the location the
    cutpoint-to-probability map is centered on.
    """

    alpha: tuple = ()
    anchor: float = 0.0
    phi_mean: tuple = field(default=(), compare=False)
    kappa: float = field(default=float("nan"), compare=False)

    ALPHA_FLOOR = 0.01

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.size < 2:
            raise ValueError("alpha needs at least 2 categories")
        if np.any(alpha <= 0):
            raise ValueError(f"alpha must be positive, got {alpha}")
        object.__setattr__(self, "alpha", tuple(alpha))

    @classmethod
    def from_phi_kappa(cls, phi_mean, kappa: float, anchor: float = 0.0) -> "DirichletHyper":
        phi = np.asarray(phi_mean, dtype=float)
        if abs(phi.sum() - 1.0) > 1e-8 or np.any(phi < 0):
            raise ValueError("phi_mean must be a simplex")
        if kappa <= 0:
            raise ValueError("kappa must be positive")
        alpha = cls.ALPHA_FLOOR + phi * kappa
        return cls(alpha=tuple(alpha), anchor=anchor, phi_mean=tuple(phi), kappa=kappa)

    @classmethod
    def flat(cls, n_categories: int, anchor: float = 0.0) -> "DirichletHyper":
        """Flat prior: a length-K vector of ones."""
        return cls(alpha=(1.0,) * n_categories, anchor=anchor)


class CutpointResult(NamedTuple):
    cutpoints: np.ndarray
    clamped: bool


def ordinal_probs(c, beta: float, scale: float = 1.0) -> np.ndarray:
    """Category probabilities p[j], j = 1..K, from cutpoints and a location.

    p[1] = Phi((c_1 - beta)/scale); interior categories are consecutive
    CDF differences; p[K] = 1 - Phi((c_{K-1} - beta)/scale).
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    c = _check_cutpoints(c)
    z = _phi((c - beta) / scale)
    return np.diff(np.concatenate(([0.0], z, [1.0])))


def cumulative_probs(c, beta: float, scale: float = 1.0) -> np.ndarray:
    """Pr(score <= k) for k = 1..K-1 (scores at or below threshold k)."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    c = _check_cutpoints(c)
    return _phi((c - beta) / scale)


def survival_probs(c, beta: float, scale: float = 1.0) -> np.ndarray:
    """Pr(score > k) for k = 1..K-1."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    c = _check_cutpoints(c)
    return _phi((beta - c) / scale)


def conditional_probs(c, beta: float, scale: float = 1.0) -> np.ndarray:
    """Pr(score > k | score > k-1) for k = 1..K-1, clamped to [eps, 1-eps].

    The first conditional equals the first survival probability because
    every score exceeds threshold 0 by convention.
    """
    surv = survival_probs(c, beta, scale)
    prev = np.concatenate(([1.0], surv[:-1]))
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(prev > 0, surv / prev, 0.0)
    return np.clip(cond, CLAMP_EPS, 1.0 - CLAMP_EPS)


def _observed_pairs(n_total: int, cum_counts: Sequence[int]):
    """Yield (prev_count, count, prev_threshold, threshold) for consecutive
    observed thresholds, with the virtual threshold 0 carrying ``n_total``."""
    prev_k, prev_c = 0, n_total
    for k, c in enumerate(cum_counts, start=1):
        if c == MISSING:
            continue
        yield prev_c, int(c), prev_k, k
        prev_k, prev_c = k, int(c)


def factorized_loglik(counts, pcond: Sequence[float]) -> float:
    """Factorized binomial log-likelihood kernel with skip-conditioning.

    ``counts`` carries ``n_total`` and ``cum_counts`` (missing entries are
    the -1 sentinel).  ``pcond`` are the conditional probabilities for
    thresholds 1..K-1.  Each observed cumulative count is conditioned on
    the most recent observed one: the success probability is the ratio of
    the two survival probabilities (a product of the intervening
    conditionals), so missing thresholds are marginalized exactly.
    Binomial coefficients are dropped (constant in the parameters).
    """
    pcond = np.asarray(pcond, dtype=float)
    n_total = int(counts.n_total)
    if n_total == 0:
        return 0.0
    total = 0.0
    for prev_c, c, prev_k, k in _observed_pairs(n_total, counts.cum_counts):
        ratio = float(np.prod(pcond[prev_k:k]))
        ratio = min(max(ratio, CLAMP_EPS), 1.0 - CLAMP_EPS)
        if not 0.0 < ratio < 1.0 or math.isnan(ratio):
            raise FloatingPointError(
                f"survival ratio {ratio} outside (0,1) between thresholds "
                f"{prev_k} and {k} (n={n_total}, cum={list(counts.cum_counts)})"
            )
        total += c * math.log(ratio) + (prev_c - c) * math.log1p(-ratio)
    return total


def log_chain_coeffs(counts) -> float:
    """Log product of binomial coefficients over observed threshold pairs.

    Adding this constant to :func:`factorized_loglik` gives the exact log
    probability mass of the observed cumulative counts (the chain of
    coefficients telescopes to the multinomial coefficient when every
    threshold is observed).
    """
    total = 0.0
    for prev_c, c, _, _ in _observed_pairs(int(counts.n_total), counts.cum_counts):
        total += (special.gammaln(prev_c + 1) - special.gammaln(c + 1)
                  - special.gammaln(prev_c - c + 1))
    return float(total)


def probs_to_cutpoints(p, anchor: float = 0.0) -> CutpointResult:
    """Map a simplex of K category probabilities to K-1 ordered cutpoints.

    ``c_k = Phi^{-1}(sum_{j<=k} p_j) + anchor``.  Zero probabilities are
    clamped at 1e-12 before the quantile map; ``clamped`` reports whether
    that happened.
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("p must be a 1-D simplex with K >= 2")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-8:
        raise ValueError(f"p must be a simplex, got {p}")
    cum = np.cumsum(p)[:-1]
    clamped = bool(np.any(cum < CLAMP_EPS) or np.any(cum > 1.0 - CLAMP_EPS))
    cum = np.clip(cum, CLAMP_EPS, 1.0 - CLAMP_EPS)
    return CutpointResult(_phi_inv(cum) + anchor, clamped)


def cutpoints_to_probs(c, anchor: float = 0.0) -> np.ndarray:
    """Inverse of :func:`probs_to_cutpoints`."""
    c = _check_cutpoints(c)
    z = _phi(c - anchor)
    return np.diff(np.concatenate(([0.0], z, [1.0])))


def induced_dirichlet_logpdf(c, hyper: DirichletHyper) -> float:
    """Log-density of ordered cutpoints under the induced-Dirichlet prior.

    The Dirichlet density on the ordinal probabilities is pushed through
    the probability->cutpoint map; the Jacobian of the cumulative map is
    lower-bidiagonal with standard-normal pdf entries on the diagonal, so
    log|J| = sum_k log phi_pdf(c_k - anchor).  Degenerate (non-increasing)
    cutpoints yield -inf rather than an exception.
    """
    c = np.asarray(c, dtype=float)
    alpha = np.asarray(hyper.alpha, dtype=float)
    if c.ndim != 1 or c.size != alpha.size - 1:
        raise ValueError(f"expected {alpha.size - 1} cutpoints, got {c.size}")
    if np.any(~np.isfinite(c)) or np.any(np.diff(c) <= 0):
        return -np.inf
    log_p = _log_ordinal_probs_from_z(c - hyper.anchor)
    if np.any(~np.isfinite(log_p)):
        return -np.inf
    log_dir = (
        math.lgamma(alpha.sum())
        - np.sum(special.gammaln(alpha))
        + np.sum((alpha - 1.0) * log_p)
    )
    log_jac = np.sum(stats.norm.logpdf(c - hyper.anchor))
    return float(log_dir + log_jac)


def _log1mexp(x):
    """log(1 - exp(x)) for x < 0, accurate over the whole range."""
    x = np.asarray(x, dtype=float)
    small = x > -math.log(2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(small, np.log(-np.expm1(x)), np.log1p(-np.exp(x)))
    return out


def _log_ordinal_probs_from_z(z):
    """Tail-stable log category probabilities from standardized cutpoints.

    Edge categories use log_ndtr directly; interior differences are
    computed in whichever tail (lower/upper CDF) keeps the two terms
    distinguishable, so probabilities far below the float64 underflow of
    ``ndtr`` still get correct logs (e.g. tiny Dirichlet concentrations
    place real mass out there).
    """
    z = np.asarray(z, dtype=float)
    log_cdf = special.log_ndtr(z)
    log_sf = special.log_ndtr(-z)
    out = np.empty(z.size + 1)
    out[0] = log_cdf[0]
    out[-1] = log_sf[-1]
    for k in range(1, z.size):
        a, b = z[k - 1], z[k]
        if a + b < 0.0:
            out[k] = log_cdf[k] + _log1mexp(log_cdf[k - 1] - log_cdf[k])
        else:
            out[k] = log_sf[k - 1] + _log1mexp(log_sf[k] - log_sf[k - 1])
    return out


def log_kappa_jacobian(kappa: float) -> float:
    """The -log(kappa) adjustment used when the Student-t prior is written
    on log(kappa) but kappa itself enters the density after exponentiating
    an unconstrained parameter.

    Applied exactly once; together with the +log(kappa) exp-transform
    Jacobian the net effect is the Student-t density evaluated directly on
    the unconstrained parameter (verified against quadrature in tests).
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return -math.log(kappa)


def cutpoints_from_unconstrained(u) -> tuple:
    """Ordered cutpoints from an unconstrained vector.

    ``c_1 = u_1`` and ``c_k = c_{k-1} + exp(u_k)``; the log-Jacobian of
    the transform is ``sum_{k>=2} u_k``.  Returns ``(c, log_jac)``.
    """
    u = np.asarray(u, dtype=float)
    c = np.empty_like(u)
    c[0] = u[0]
    if u.size > 1:
        c[1:] = u[0] + np.cumsum(np.exp(u[1:]))
    return c, float(np.sum(u[1:]))


def unconstrained_from_cutpoints(c) -> np.ndarray:
    """Inverse of :func:`cutpoints_from_unconstrained`."""
    c = _check_cutpoints(c)
    u = np.empty_like(c)
    u[0] = c[0]
    if c.size > 1:
        u[1:] = np.log(np.diff(c))
    return u


def simplex_from_unconstrained(u) -> tuple:
    """Stick-breaking map from R^{K-1} to the K-simplex.

    Returns ``(p, log_jac)`` using the centered stick-breaking transform:
    the k-th stick fraction is ``sigmoid(u_k - log(K - k))`` so that
    u = 0 maps to the uniform simplex.
    """
    u = np.asarray(u, dtype=float)
    km1 = u.size
    p = np.empty(km1 + 1)
    remaining = 1.0
    log_jac = 0.0
    for k in range(km1):
        zk = special.expit(u[k] - math.log(km1 - k))
        p[k] = remaining * zk
        log_jac += math.log(zk) + math.log1p(-zk) + math.log(remaining)
        remaining *= 1.0 - zk
    p[km1] = remaining
    return p, log_jac


def unconstrained_from_simplex(p) -> np.ndarray:
    """Inverse stick-breaking map."""
    p = np.asarray(p, dtype=float)
    km1 = p.size - 1
    u = np.empty(km1)
    remaining = 1.0
    for k in range(km1):
        zk = p[k] / remaining
        u[k] = special.logit(zk) + math.log(km1 - k)
        remaining -= p[k]
    return u
