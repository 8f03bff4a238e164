"""Readable numpy log-posteriors, one study at a time.

This is the reference route: it leans on the scalar kernel functions and
scipy densities, making every term auditable.  The vectorized autodiff
route in ``_jaxcore`` is cross-checked against these functions in the
test suite; both must agree to float tolerance.
"""

from __future__ import annotations

import math

import numpy as np

from .. import kernel as kn
from . import priors as pr
from .common import (ModelSpec, jones_thresholds, layout_for, scale_link_fn,
                     stratum_indices)

__all__ = ["reference_log_posterior", "reference_log_likelihood"]


def _bvn_location_priors(p, prior_sd_mu, prior_sd_sigma, rho_conc, priors):
    """Hyperpriors for a (mu, sigma, rho, z) bivariate location block."""
    lp = pr.normal_logpdf(p["mu"], prior_sd_mu)
    lp += pr.halfnormal_logsigma_logpdf(p["log_sigma"], prior_sd_sigma)
    lp += pr.rho_logpdf(float(p["rho_raw"]), rho_conc)
    lp += pr.std_normal_logpdf(p["z"])
    return lp


def _mix(z, rho):
    out = np.empty_like(z)
    out[:, 0] = z[:, 0]
    out[:, 1] = rho * z[:, 0] + math.sqrt(max(1 - rho * rho, 0.0)) * z[:, 1]
    return out


def _rho_from_raw(raw):
    return 2.0 / (1.0 + math.exp(-float(raw))) - 1.0


def _flat_hyper(K, alpha):
    return kn.DirichletHyper(alpha=(alpha,) * K)


def _obiv_log_posterior(spec: ModelSpec, data, u) -> float:
    P = spec.priors
    p = layout_for(spec).unpack(np.asarray(u, dtype=float))
    random_cuts = spec.family == "OBivRC"
    lp = 0.0

    if random_cuts:
        phi, kappa = [], []
        for d in (0, 1):
            simplex, jac = kn.simplex_from_unconstrained(p["phi_raw"][d])
            lp += math.lgamma(spec.K) + jac  # flat Dirichlet on the simplex
            phi.append(simplex)
            k_d = float(np.exp(p["log_kappa"][d]))
            lp += (pr.student_t_logpdf(math.log(k_d), P.log_kappa_df,
                                       P.log_kappa_loc, P.log_kappa_scale)
                   + kn.log_kappa_jacobian(k_d) + float(p["log_kappa"][d]))
            kappa.append(k_d)
        hypers = [kn.DirichletHyper.from_phi_kappa(phi[d], kappa[d])
                  for d in (0, 1)]
        study_cuts = np.empty((spec.n_studies, 2, spec.K - 1))
        for s in range(spec.n_studies):
            for d in (0, 1):
                c, jac = kn.cutpoints_from_unconstrained(p["cut_raw"][s, d])
                lp += kn.induced_dirichlet_logpdf(c, hypers[d]) + jac
                study_cuts[s, d] = c
    else:
        cuts = []
        for d in (0, 1):
            c, jac = kn.cutpoints_from_unconstrained(p["cut_raw"][d])
            lp += kn.induced_dirichlet_logpdf(
                c, _flat_hyper(spec.K, P.dirichlet_alpha)) + jac
            cuts.append(c)

    lp += _bvn_location_priors(
        {"mu": p["mu_beta"], "log_sigma": p["log_sigma_beta"],
         "rho_raw": p["rho_raw"], "z": p["z_beta"]},
        P.mu_beta_sd, P.sigma_beta_sd, P.rho_conc, P)
    rho = _rho_from_raw(p["rho_raw"])
    beta = p["mu_beta"] + np.exp(p["log_sigma_beta"]) * _mix(p["z_beta"], rho)

    for s, pair in enumerate(data.studies):
        for d in (0, 1):
            c = study_cuts[s, d] if random_cuts else cuts[d]
            pcond = kn.conditional_probs(c, beta[s, d], 1.0)
            lp += kn.factorized_loglik(pair[d], pcond)
    return float(lp)


def _ohsroc_log_posterior(spec: ModelSpec, data, u) -> float:
    P = spec.priors
    p = layout_for(spec).unpack(np.asarray(u, dtype=float))
    random_cuts = spec.family == "OHsrocRC"
    link = scale_link_fn(spec.scale_link)
    lp = 0.0

    if random_cuts:
        simplex, jac = kn.simplex_from_unconstrained(p["phi_raw"])
        lp += math.lgamma(spec.K) + jac
        kappa = float(np.exp(p["log_kappa"]))
        lp += (pr.student_t_logpdf(math.log(kappa), P.log_kappa_df,
                                   P.log_kappa_loc, P.log_kappa_scale)
               + kn.log_kappa_jacobian(kappa) + float(p["log_kappa"]))
        hyper = kn.DirichletHyper.from_phi_kappa(simplex, kappa)
        study_cuts = np.empty((spec.n_studies, spec.K - 1))
        for s in range(spec.n_studies):
            c, jac = kn.cutpoints_from_unconstrained(p["cut_raw"][s])
            lp += kn.induced_dirichlet_logpdf(c, hyper) + jac
            study_cuts[s] = c
    else:
        shared_cuts, jac = kn.cutpoints_from_unconstrained(p["cut_raw"])
        lp += kn.induced_dirichlet_logpdf(
            shared_cuts, _flat_hyper(spec.K, P.dirichlet_alpha)) + jac

    lp += pr.normal_logpdf(p["mu_beta"], P.mu_beta_sd)
    lp += pr.halfnormal_logsigma_logpdf(p["log_sigma_beta"], P.sigma_beta_sd)
    lp += pr.std_normal_logpdf(p["z_beta"])
    lp += pr.normal_logpdf(p["mu_gamma"], P.mu_gamma_sd)
    lp += pr.halfnormal_logsigma_logpdf(p["log_sigma_gamma"], P.sigma_gamma_sd)
    lp += pr.std_normal_logpdf(p["z_gamma"])

    beta = p["mu_beta"] + np.exp(p["log_sigma_beta"]) * p["z_beta"]
    gamma = p["mu_gamma"] + np.exp(p["log_sigma_gamma"]) * p["z_gamma"]

    for s, pair in enumerate(data.studies):
        c = study_cuts[s] if random_cuts else shared_cuts
        for d, sign in ((0, -1.0), (1, 1.0)):
            loc = sign * beta[s]
            scale = float(link(sign * gamma[s]))
            pcond = kn.conditional_probs(c, loc, scale)
            lp += kn.factorized_loglik(pair[d], pcond)
    return float(lp)


def jones_log_posterior(spec: ModelSpec, data, u) -> float:
    """Transformed-threshold model: fixed g(k+1) cut locations."""
    P = spec.priors
    p = layout_for(spec).unpack(np.asarray(u, dtype=float))
    t = jones_thresholds(spec)
    lp = _bvn_location_priors(
        {"mu": p["mu_loc"], "log_sigma": p["log_sigma_loc"],
         "rho_raw": p["rho_raw"], "z": p["z_loc"]},
        P.mu_beta_sd, P.sigma_beta_sd, P.rho_conc, P)
    lp += pr.normal_logpdf(p["mu_logscale"], P.mu_logscale_sd)
    lp += pr.halfnormal_logsigma_logpdf(p["log_sigma_logscale"],
                                        P.sigma_logscale_sd)
    lp += pr.std_normal_logpdf(p["z_logscale"])

    rho = _rho_from_raw(p["rho_raw"])
    loc = p["mu_loc"] + np.exp(p["log_sigma_loc"]) * _mix(p["z_loc"], rho)
    scale = np.exp(p["mu_logscale"]
                   + np.exp(p["log_sigma_logscale"]) * p["z_logscale"])

    for s, pair in enumerate(data.studies):
        for d in (0, 1):
            pcond = kn.conditional_probs(t, loc[s, d], scale[s, d])
            lp += kn.factorized_loglik(pair[d], pcond)
    return float(lp)


def stratbiv_log_posterior(data, threshold_k: int, u,
                           priors: pr.PriorSet = None) -> float:
    """Dichotomized bivariate model at one threshold.

    Only studies observing the threshold in both groups contribute; the
    model is a bivariate normal on the probit survival pair.
    """
    P = priors or pr.DEFAULT_PRIORS
    keep = stratum_indices(data, threshold_k)
    if keep.size == 0:
        raise ValueError(f"empty stratum: no study observes threshold "
                         f"{threshold_k}")
    spec = ModelSpec(family="StratBiv", K=data.K, n_studies=int(keep.size),
                     priors=P, stratbiv_threshold=threshold_k)
    p = layout_for(spec).unpack(np.asarray(u, dtype=float))
    lp = _bvn_location_priors(
        {"mu": p["mu_theta"], "log_sigma": p["log_sigma_theta"],
         "rho_raw": p["rho_raw"], "z": p["z_theta"]},
        P.mu_beta_sd, P.sigma_beta_sd, P.rho_conc, P)
    rho = _rho_from_raw(p["rho_raw"])
    theta = p["mu_theta"] + np.exp(p["log_sigma_theta"]) * _mix(p["z_theta"], rho)

    for row, s in enumerate(keep):
        pair = data.studies[s]
        for d in (0, 1):
            n = pair[d].n_total
            c = pair[d].cum_counts[threshold_k - 1]
            psurv = float(np.clip(kn._phi(theta[row, d]),
                                  kn.CLAMP_EPS, 1 - kn.CLAMP_EPS))
            lp += c * math.log(psurv) + (n - c) * math.log1p(-psurv)
    return float(lp)


def reference_log_posterior(spec: ModelSpec, data, u) -> float:
    """Numpy-route log-posterior for any family."""
    if spec.family in ("OBivFC", "OBivRC"):
        return _obiv_log_posterior(spec, data, u)
    if spec.family in ("OHsrocFC", "OHsrocRC"):
        return _ohsroc_log_posterior(spec, data, u)
    if spec.family == "JonesFC":
        return jones_log_posterior(spec, data, u)
    if spec.family == "StratBiv":
        return stratbiv_log_posterior(data, spec.stratbiv_threshold, u,
                                      priors=spec.priors)
    raise AssertionError(spec.family)


def reference_log_likelihood(spec: ModelSpec, data, u) -> np.ndarray:
    """Per-study log-likelihood (no priors), numpy route."""
    from .common import constrain
    nat = constrain(spec, u)
    S = spec.n_studies
    out = np.zeros(S)
    f = spec.family
    if f == "StratBiv":
        k = spec.stratbiv_threshold
        for row in range(S):
            pair = data.studies[row]
            for d in (0, 1):
                n = pair[d].n_total
                c = pair[d].cum_counts[k - 1]
                psurv = float(np.clip(kn._phi(nat["theta"][row, d]),
                                      kn.CLAMP_EPS, 1 - kn.CLAMP_EPS))
                out[row] += c * math.log(psurv) + (n - c) * math.log1p(-psurv)
        return out
    for s, pair in enumerate(data.studies):
        for d in (0, 1):
            if f == "OBivFC":
                c, loc, scale = nat["cutpoints"][d], nat["beta"][s, d], 1.0
            elif f == "OBivRC":
                c, loc, scale = nat["study_cutpoints"][s, d], nat["beta"][s, d], 1.0
            elif f == "OHsrocFC":
                sign = -1.0 if d == 0 else 1.0
                c = nat["cutpoints"]
                loc, scale = sign * nat["beta"][s], nat["scale"][s, d]
            elif f == "OHsrocRC":
                sign = -1.0 if d == 0 else 1.0
                c = nat["study_cutpoints"][s]
                loc, scale = sign * nat["beta"][s], nat["scale"][s, d]
            elif f == "JonesFC":
                c = nat["thresholds"]
                loc, scale = nat["loc"][s, d], nat["scale"][s, d]
            pcond = kn.conditional_probs(c, loc, float(scale))
            out[s] += kn.factorized_loglik(pair[d], pcond)
    return out
