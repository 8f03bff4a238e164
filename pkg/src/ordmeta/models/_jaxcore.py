"""Vectorized autodiff route for every model family (private).

Mirrors ``reference.py`` term for term — same priors, same transforms,
same clamping constants — but built on jax.numpy so the sampler gets a
jitted value-and-gradient.  The test suite cross-checks the two routes;
any change here must keep them in lockstep.

Float64 is enabled at package import.
"""

from __future__ import annotations

import math
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy import special as jspecial
from jax.scipy import stats as jstats

from .common import (ModelSpec, build_obs_table, jones_thresholds, layout_for,
                     stratum_indices)

LOG_EPS = math.log(1e-12)
LOG_ONE_MINUS_EPS = math.log1p(-1e-12)
_LOG_2 = math.log(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------

def log1mexp(x):
    """log(1 - exp(x)) for x < 0; inputs are capped just below 0 so both
    where-branches stay finite (keeps autodiff clean)."""
    x = jnp.minimum(x, -1e-15)
    return jnp.where(x > -_LOG_2,
                     jnp.log(-jnp.expm1(x)),
                     jnp.log1p(-jnp.exp(jnp.maximum(x, -745.0))))


def log_ordinal_probs(z):
    """Tail-stable log category probabilities, batched over leading axes.

    ``z`` has the K-1 standardized cutpoints on its last axis; the result
    appends one axis entry (K categories).  Interior differences pick the
    CDF tail that keeps consecutive values distinguishable.
    """
    log_cdf = jspecial.log_ndtr(z)
    log_sf = jspecial.log_ndtr(-z)
    first = log_cdf[..., :1]
    last = log_sf[..., -1:]
    if z.shape[-1] == 1:
        return jnp.concatenate([first, last], axis=-1)
    lower = log_cdf[..., 1:] + log1mexp(log_cdf[..., :-1] - log_cdf[..., 1:])
    upper = log_sf[..., :-1] + log1mexp(log_sf[..., 1:] - log_sf[..., :-1])
    interior = jnp.where(z[..., :-1] + z[..., 1:] < 0, lower, upper)
    return jnp.concatenate([first, interior, last], axis=-1)


def normal_logpdf(x, sd):
    return jnp.sum(-0.5 * (x / sd) ** 2 - _LOG_SQRT_2PI - math.log(sd))


def std_normal_logpdf(z):
    return normal_logpdf(z, 1.0)


def halfnormal_logsigma_logpdf(log_sigma, sd):
    sigma = jnp.exp(log_sigma)
    return jnp.sum(_LOG_2 - 0.5 * (sigma / sd) ** 2 - _LOG_SQRT_2PI
                   - math.log(sd) + log_sigma)


def rho_logpdf(rho_raw, conc):
    log_g = jax.nn.log_sigmoid(rho_raw)
    log_1mg = jax.nn.log_sigmoid(-rho_raw)
    log_beta_norm = (jspecial.gammaln(2 * conc)
                     - 2 * jspecial.gammaln(conc))
    return (log_beta_norm + (conc - 1) * (log_g + log_1mg)
            + log_g + log_1mg)


def student_t_logpdf(x, df, loc, scale):
    return jstats.t.logpdf(x, df, loc=loc, scale=scale)


def cutpoints_from_unconstrained(raw):
    """Ordered transform on the last axis; returns (cutpoints, log_jac)."""
    first = raw[..., :1]
    rest = jnp.cumsum(jnp.exp(raw[..., 1:]), axis=-1)
    c = jnp.concatenate([first, first + rest], axis=-1)
    return c, jnp.sum(raw[..., 1:])


def simplex_from_unconstrained(u):
    """Stick-breaking on the last axis; returns (probs, total log_jac)."""
    m = u.shape[-1]
    offsets = jnp.log(jnp.arange(m, 0, -1, dtype=u.dtype))
    t = u - offsets
    log_z = jax.nn.log_sigmoid(t)
    log_1mz = jax.nn.log_sigmoid(-t)
    log_rem = jnp.concatenate(
        [jnp.zeros(u.shape[:-1] + (1,), u.dtype),
         jnp.cumsum(log_1mz, axis=-1)], axis=-1)
    log_p = jnp.concatenate([log_rem[..., :-1] + log_z, log_rem[..., -1:]],
                            axis=-1)
    log_jac = jnp.sum(log_z + log_1mz + log_rem[..., :-1])
    return jnp.exp(log_p), log_jac


def induced_dirichlet_logpdf(c, alpha, anchor=0.0):
    """Batched induced-Dirichlet log-density, summed over leading axes.

    ``c`` ends in K-1 ordered cutpoints; ``alpha`` broadcasts against the
    trailing K-category axis of the log-probabilities.
    """
    z = c - anchor
    log_p = log_ordinal_probs(z)
    log_dir = (jspecial.gammaln(jnp.sum(alpha, axis=-1))
               - jnp.sum(jspecial.gammaln(alpha), axis=-1)
               + jnp.sum((alpha - 1.0) * log_p, axis=-1))
    log_jac = jnp.sum(-0.5 * z ** 2 - _LOG_SQRT_2PI, axis=-1)
    return jnp.sum(log_dir + log_jac)


def corr_mix(z, rho):
    """Rows of z through the 2x2 correlation Cholesky."""
    mixed = rho * z[..., 0] + jnp.sqrt(1.0 - rho ** 2) * z[..., 1]
    return jnp.stack([z[..., 0], mixed], axis=-1)


def rho_from_raw(raw):
    return 2.0 * jax.nn.sigmoid(raw) - 1.0


# ---------------------------------------------------------------------------
# likelihood assembly
# ---------------------------------------------------------------------------

def _obs_constants(data):
    obs = build_obs_table(data)
    return {k: jnp.asarray(v) for k, v in obs.items()}


def _loglik_by_study(logS, obs, n_studies):
    """Per-study factorized log-likelihood from log survival curves.

    ``logS`` is (S, 2, K-1); a leading zero column is the virtual
    threshold 0, so gathers at prev_k = 0 read log(1) = 0.
    """
    padded = jnp.concatenate(
        [jnp.zeros(logS.shape[:-1] + (1,), logS.dtype), logS], axis=-1)
    log_k = padded[obs["s"], obs["d"], obs["k"]]
    log_prev = padded[obs["s"], obs["d"], obs["prev_k"]]
    delta = jnp.clip(log_k - log_prev, LOG_EPS, LOG_ONE_MINUS_EPS)
    terms = (obs["count"] * delta
             + (obs["prev_count"] - obs["count"]) * log1mexp(delta))
    return jax.ops.segment_sum(terms, obs["s"], num_segments=n_studies)


def _scale_link(name):
    if name == "exp":
        return jnp.exp
    return jax.nn.softplus


# ---------------------------------------------------------------------------
# family builders: each returns (logpost_fn, loglik_by_study_fn)
# ---------------------------------------------------------------------------

def _unpacker(layout):
    slices = [(name, layout.slices[name], layout.shapes[name])
              for name in layout.names]

    def unpack(u):
        out = {}
        for name, slc, shape in slices:
            block = u[slc]
            out[name] = block.reshape(shape) if shape else block[0]
        return out

    return unpack


def _build_obiv(spec: ModelSpec, data):
    P = spec.priors
    layout = layout_for(spec)
    unpack = _unpacker(layout)
    obs = _obs_constants(data)
    S, K = spec.n_studies, spec.K
    random_cuts = spec.family == "OBivRC"
    alpha_flat = jnp.full(K, P.dirichlet_alpha)

    def beta_of(p):
        rho = rho_from_raw(p["rho_raw"])
        sigma = jnp.exp(p["log_sigma_beta"])
        return p["mu_beta"] + sigma * corr_mix(p["z_beta"], rho)

    def cuts_of(p):
        c, _ = cutpoints_from_unconstrained(p["cut_raw"])
        return c

    def loglik(u):
        p = unpack(u)
        beta = beta_of(p)
        c = cuts_of(p)  # FC: (2, K-1); RC: (S, 2, K-1)
        if not random_cuts:
            c = jnp.broadcast_to(c[None, :, :], (S, 2, K - 1))
        logS = jspecial.log_ndtr(beta[:, :, None] - c)
        return _loglik_by_study(logS, obs, S)

    def logpost(u):
        p = unpack(u)
        c, cut_jac = cutpoints_from_unconstrained(p["cut_raw"])
        lp = cut_jac
        if random_cuts:
            phi0, phi_jac0 = simplex_from_unconstrained(p["phi_raw"][0])
            phi1, phi_jac1 = simplex_from_unconstrained(p["phi_raw"][1])
            lp += 2 * jspecial.gammaln(float(K)) + phi_jac0 + phi_jac1
            kappa = jnp.exp(p["log_kappa"])
            lp += jnp.sum(student_t_logpdf(jnp.log(kappa), P.log_kappa_df,
                                           P.log_kappa_loc, P.log_kappa_scale)
                          - jnp.log(kappa) + p["log_kappa"])
            alpha = 0.01 + jnp.stack([phi0, phi1]) * kappa[:, None]
            lp += induced_dirichlet_logpdf(c, alpha[None, :, :])
        else:
            lp += induced_dirichlet_logpdf(c, alpha_flat)
        lp += normal_logpdf(p["mu_beta"], P.mu_beta_sd)
        lp += halfnormal_logsigma_logpdf(p["log_sigma_beta"], P.sigma_beta_sd)
        lp += rho_logpdf(p["rho_raw"], P.rho_conc)
        lp += std_normal_logpdf(p["z_beta"])
        return lp + jnp.sum(loglik(u))

    return logpost, loglik


def _build_ohsroc(spec: ModelSpec, data):
    P = spec.priors
    layout = layout_for(spec)
    unpack = _unpacker(layout)
    obs = _obs_constants(data)
    S, K = spec.n_studies, spec.K
    random_cuts = spec.family == "OHsrocRC"
    link = _scale_link(spec.scale_link)
    alpha_flat = jnp.full(K, P.dirichlet_alpha)

    def natural(p):
        beta = p["mu_beta"] + jnp.exp(p["log_sigma_beta"]) * p["z_beta"]
        gamma = p["mu_gamma"] + jnp.exp(p["log_sigma_gamma"]) * p["z_gamma"]
        loc = jnp.stack([-beta, beta], axis=-1)
        scale = jnp.stack([link(-gamma), link(gamma)], axis=-1)
        return loc, scale

    def loglik(u):
        p = unpack(u)
        loc, scale = natural(p)
        c, _ = cutpoints_from_unconstrained(p["cut_raw"])
        c = c[:, None, :] if random_cuts else c[None, None, :]
        logS = jspecial.log_ndtr((loc[:, :, None] - c) / scale[:, :, None])
        return _loglik_by_study(logS, obs, S)

    def logpost(u):
        p = unpack(u)
        c, cut_jac = cutpoints_from_unconstrained(p["cut_raw"])
        lp = cut_jac
        if random_cuts:
            phi, phi_jac = simplex_from_unconstrained(p["phi_raw"])
            lp += jspecial.gammaln(float(K)) + phi_jac
            kappa = jnp.exp(p["log_kappa"])
            lp += (student_t_logpdf(jnp.log(kappa), P.log_kappa_df,
                                    P.log_kappa_loc, P.log_kappa_scale)
                   - jnp.log(kappa) + p["log_kappa"])
            lp += induced_dirichlet_logpdf(c, 0.01 + phi * kappa)
        else:
            lp += induced_dirichlet_logpdf(c, alpha_flat)
        lp += normal_logpdf(p["mu_beta"], P.mu_beta_sd)
        lp += halfnormal_logsigma_logpdf(p["log_sigma_beta"], P.sigma_beta_sd)
        lp += std_normal_logpdf(p["z_beta"])
        lp += normal_logpdf(p["mu_gamma"], P.mu_gamma_sd)
        lp += halfnormal_logsigma_logpdf(p["log_sigma_gamma"], P.sigma_gamma_sd)
        lp += std_normal_logpdf(p["z_gamma"])
        return lp + jnp.sum(loglik(u))

    return logpost, loglik


def _build_jones(spec: ModelSpec, data):
    P = spec.priors
    layout = layout_for(spec)
    unpack = _unpacker(layout)
    obs = _obs_constants(data)
    S = spec.n_studies
    thresholds = jnp.asarray(jones_thresholds(spec))

    def loglik(u):
        p = unpack(u)
        rho = rho_from_raw(p["rho_raw"])
        loc = p["mu_loc"] + jnp.exp(p["log_sigma_loc"]) * corr_mix(p["z_loc"], rho)
        scale = jnp.exp(p["mu_logscale"]
                        + jnp.exp(p["log_sigma_logscale"]) * p["z_logscale"])
        logS = jspecial.log_ndtr((loc[:, :, None] - thresholds)
                                 / scale[:, :, None])
        return _loglik_by_study(logS, obs, S)

    def logpost(u):
        p = unpack(u)
        lp = normal_logpdf(p["mu_loc"], P.mu_beta_sd)
        lp += halfnormal_logsigma_logpdf(p["log_sigma_loc"], P.sigma_beta_sd)
        lp += rho_logpdf(p["rho_raw"], P.rho_conc)
        lp += std_normal_logpdf(p["z_loc"])
        lp += normal_logpdf(p["mu_logscale"], P.mu_logscale_sd)
        lp += halfnormal_logsigma_logpdf(p["log_sigma_logscale"],
                                         P.sigma_logscale_sd)
        lp += std_normal_logpdf(p["z_logscale"])
        return lp + jnp.sum(loglik(u))

    return logpost, loglik


def _build_stratbiv(spec: ModelSpec, data):
    """``data`` must already be subset to the stratum."""
    P = spec.priors
    layout = layout_for(spec)
    unpack = _unpacker(layout)
    k = spec.stratbiv_threshold
    S = spec.n_studies
    n = np.zeros((S, 2))
    c = np.zeros((S, 2))
    for row, pair in enumerate(data.studies):
        for d in (0, 1):
            n[row, d] = pair[d].n_total
            c[row, d] = pair[d].cum_counts[k - 1]
    n = jnp.asarray(n)
    c = jnp.asarray(c)

    def theta_of(p):
        rho = rho_from_raw(p["rho_raw"])
        sigma = jnp.exp(p["log_sigma_theta"])
        return p["mu_theta"] + sigma * corr_mix(p["z_theta"], rho)

    def loglik(u):
        theta = theta_of(unpack(u))
        terms = c * jspecial.log_ndtr(theta) + (n - c) * jspecial.log_ndtr(-theta)
        return jnp.sum(terms, axis=-1)

    def logpost(u):
        p = unpack(u)
        lp = normal_logpdf(p["mu_theta"], P.mu_beta_sd)
        lp += halfnormal_logsigma_logpdf(p["log_sigma_theta"], P.sigma_beta_sd)
        lp += rho_logpdf(p["rho_raw"], P.rho_conc)
        lp += std_normal_logpdf(p["z_theta"])
        return lp + jnp.sum(loglik(u))

    return logpost, loglik


_BUILDERS = {
    "OBivFC": _build_obiv, "OBivRC": _build_obiv,
    "OHsrocFC": _build_ohsroc, "OHsrocRC": _build_ohsroc,
    "JonesFC": _build_jones, "StratBiv": _build_stratbiv,
}


def build(spec: ModelSpec, data):
    """(logpost, loglik_by_study) jax-traceable closures for a family.

    For StratBiv, ``data`` must be the stratum subset with
    ``spec.n_studies`` matching.
    """
    return _BUILDERS[spec.family](spec, data)
