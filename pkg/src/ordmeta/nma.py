"""Network layer: several tests over a shared study index.

Each test keeps the within-study ordinal model of its single-test
counterpart; the between-study structure decomposes every study/test
location into a test mean (optionally a covariate regression), a study
effect shared by all tests in that study, and an independent
test-specific deviation:

    beta[s, t, d] = x[s, t, d] . coef[t, d] + eta[s, d] + delta[s, t, d]

The shared effects are bivariate normal across disease groups (inducing
between-study correlation); the deviations are independent normals with
per-test SDs tau (optionally pooled across tests, "compound symmetry").
The HSROC variant applies the same decomposition separately to its
location and raw-scale parameters, each with scalar study effects.

Studies missing a test contribute nothing for it; deviation and
random-cutpoint blocks exist only for (study, test) pairs actually
observed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy import special as jspecial
from scipy.special import ndtr

from . import kernel as kn
from .analysis import AccuracySummary, _central_interval, auc_from_curve
from .data import CovariateSet, DataError, NMADataset
from .models import _jaxcore as jc
from .models import priors as pr
from .models.common import (build_obs_table, scale_link_fn,
                            transformed_thresholds)
from .models.layout import ParamLayout
from .models.priors import DEFAULT_PRIORS, PriorSet

__all__ = [
    "NMA_FAMILIES", "NMASpec", "BaselineCase",
    "intercept_only_covariates", "nma_layout", "nma_constrain",
    "nma_reference_log_posterior", "nma_reference_log_likelihood",
    "CompiledNMAModel", "build_nma_model", "nma_initialize",
    "nma_accuracy_draws", "summarize_nma_accuracy", "nma_auc_summary",
    "variance_decomposition", "pairwise_difference_draws",
    "pairwise_comparisons", "recompute_baseline", "load_scenarios",
]

NMA_FAMILIES = ("OBivFC", "OBivRC", "OHsrocFC", "OHsrocRC", "JonesFC")


@dataclass(frozen=True)
class NMASpec:
    """Settings for a multi-test model.

    ``compound_symmetry`` pools the test-specific deviation SD within
    each disease group (one tau per group instead of one per test and
    group), dropping T-1 parameters per group.
    """

    family: str
    K_per_test: tuple
    compound_symmetry: bool = True
    priors: PriorSet = field(default_factory=PriorSet)
    scale_link: str = "exp"
    jones_transform: str = "log"
    jones_lambda: float = 0.5

    def __post_init__(self):
        if self.family not in NMA_FAMILIES:
            raise ValueError(f"unknown network family '{self.family}'; "
                             f"expected one of {NMA_FAMILIES}")
        object.__setattr__(self, "K_per_test",
                           tuple(int(k) for k in self.K_per_test))
        if len(self.K_per_test) < 1:
            raise ValueError("need at least one test")
        if any(k < 2 for k in self.K_per_test):
            raise ValueError("every test needs K >= 2 categories")
        if self.scale_link not in ("exp", "softplus"):
            raise ValueError("scale_link must be 'exp' or 'softplus'")

    @property
    def n_tests(self) -> int:
        return len(self.K_per_test)


@dataclass(frozen=True)
class BaselineCase:
    """A named covariate setting to evaluate summaries at.

    ``x[d][t]`` is the covariate vector for test t in group d (the HSROC
    variant has one shared regression and reads the group-0 row).
    """

    name: str
    x: tuple  # x[d][t]: ndarray matching the design matrix columns

    @classmethod
    def from_vectors(cls, name, x) -> "BaselineCase":
        packed = tuple(tuple(np.asarray(v, dtype=float) for v in x[d])
                       for d in (0, 1))
        return cls(name=name, x=packed)


def intercept_only_covariates(data: NMADataset) -> CovariateSet:
    """The design used when no covariates are supplied: one intercept
    column, 1 for included studies and 0 for padded rows."""
    X = [[], []]
    baseline = [[], []]
    for t in range(data.n_tests):
        col = data.indicator[:, t:t + 1].astype(float)
        for d in (0, 1):
            X[d].append(col.copy())
            baseline[d].append(np.ones(1))
    return CovariateSet(X=X, baseline_case=baseline,
                        column_names=["intercept"])


def _check_spec_against_data(spec: NMASpec, data: NMADataset):
    if spec.n_tests != data.n_tests:
        raise DataError(f"model has {spec.n_tests} tests but dataset has "
                        f"{data.n_tests}")
    for t in range(data.n_tests):
        if spec.K_per_test[t] != data.tests[t].K:
            raise DataError(
                f"test {data.test_names[t]}: model K = {spec.K_per_test[t]} "
                f"but dataset has K = {data.tests[t].K}")


def _check_covariates(data: NMADataset, covs: CovariateSet):
    """Design matrices must be padded consistently with the indicator."""
    if len(covs.X) != 2 or any(len(covs.X[d]) != data.n_tests for d in (0, 1)):
        raise DataError("covariate set does not cover both groups of every "
                        "test")
    for d in (0, 1):
        for t in range(data.n_tests):
            X = np.asarray(covs.X[d][t], dtype=float)
            if X.shape[0] != data.n_studies:
                raise DataError(
                    f"design matrix for test {data.test_names[t]} has "
                    f"{X.shape[0]} rows but there are {data.n_studies} "
                    f"studies")
            included = data.indicator[:, t] == 1
            if np.any(X[~included] != 0.0):
                raise DataError(
                    f"test {data.test_names[t]}: studies not reporting the "
                    f"test must have all-zero covariate rows")
            if np.any(X[included, 0] != 1.0):
                raise DataError(
                    f"test {data.test_names[t]}: included studies must have "
                    f"an intercept 1 in the first design column")
            if np.asarray(covs.baseline_case[d][t]).shape != (X.shape[1],):
                raise DataError(
                    f"test {data.test_names[t]}: baseline vector length does "
                    f"not match the design matrix columns")


def nma_layout(spec: NMASpec, data: NMADataset,
               covs: CovariateSet) -> ParamLayout:
    """Named unconstrained blocks; per-test blocks first, shared last.

    Deviation (and random-cutpoint) blocks are sized to each test's
    included studies, so absent (study, test) pairs add no parameters.
    """
    S, T = data.n_studies, data.n_tests
    hsroc = spec.family in ("OHsrocFC", "OHsrocRC")
    blocks = []
    for t in range(T):
        K_t = spec.K_per_test[t]
        S_t = data.tests[t].n_studies
        P_t = np.asarray(covs.X[0][t]).shape[1]
        if hsroc:
            blocks += [(f"coef_beta_t{t}", (P_t,)),
                       (f"coef_gamma_t{t}", (P_t,))]
            if spec.family == "OHsrocFC":
                blocks.append((f"cut_raw_t{t}", (K_t - 1,)))
            else:
                blocks += [(f"cut_raw_t{t}", (S_t, K_t - 1)),
                           (f"phi_raw_t{t}", (K_t - 1,)),
                           (f"log_kappa_t{t}", ())]
            blocks += [(f"z_delta_beta_t{t}", (S_t,)),
                       (f"z_delta_gamma_t{t}", (S_t,))]
            continue
        blocks.append((f"coef_t{t}", (2, P_t)))
        if spec.family == "OBivFC":
            blocks.append((f"cut_raw_t{t}", (2, K_t - 1)))
        elif spec.family == "OBivRC":
            blocks += [(f"cut_raw_t{t}", (S_t, 2, K_t - 1)),
                       (f"phi_raw_t{t}", (2, K_t - 1)),
                       (f"log_kappa_t{t}", (2,))]
        else:  # JonesFC: fixed transformed thresholds, log-normal scales
            blocks += [(f"mu_logscale_t{t}", (2,)),
                       (f"log_sigma_logscale_t{t}", (2,)),
                       (f"z_logscale_t{t}", (S_t, 2))]
        blocks.append((f"z_delta_t{t}", (S_t, 2)))
    if hsroc:
        blocks += [("log_sigma_eta_beta", ()), ("z_eta_beta", (S,)),
                   ("log_sigma_eta_gamma", ()), ("z_eta_gamma", (S,)),
                   ("log_tau_beta", () if spec.compound_symmetry else (T,)),
                   ("log_tau_gamma", () if spec.compound_symmetry else (T,))]
    else:
        blocks += [("log_sigma_eta", (2,)), ("rho_raw", ()), ("z_eta", (S, 2)),
                   ("log_tau",
                    (2,) if spec.compound_symmetry else (T, 2))]
    return ParamLayout(blocks)


def _resolve_covs(data, covs):
    covs = covs if covs is not None else intercept_only_covariates(data)
    _check_covariates(data, covs)
    return covs


def _mix_rows(z, rho):
    out = np.empty_like(z)
    out[:, 0] = z[:, 0]
    out[:, 1] = rho * z[:, 0] + math.sqrt(max(1 - rho * rho, 0.0)) * z[:, 1]
    return out


def _rho_from_raw(raw):
    return 2.0 / (1.0 + math.exp(-float(raw))) - 1.0


def _tau_matrix(p, spec):
    """Deviation SDs as (T, 2), expanding the pooled parameterization."""
    tau = np.exp(np.asarray(p["log_tau"], dtype=float))
    return np.broadcast_to(tau, (spec.n_tests, 2)).copy()


def _tau_vector(p, key, spec):
    tau = np.exp(np.asarray(p[key], dtype=float))
    return np.broadcast_to(tau, (spec.n_tests,)).copy()


def _test_thresholds(spec: NMASpec, t: int) -> np.ndarray:
    return transformed_thresholds(spec.K_per_test[t], spec.jones_transform,
                                  spec.jones_lambda)


# ---------------------------------------------------------------------------
# Reference route (numpy, one study at a time)
# ---------------------------------------------------------------------------

def _shared_effect_logprior(p, P):
    lp = pr.halfnormal_logsigma_logpdf(p["log_sigma_eta"], P.sigma_beta_sd)
    lp += pr.rho_logpdf(float(p["rho_raw"]), P.rho_conc)
    lp += pr.std_normal_logpdf(p["z_eta"])
    lp += pr.halfnormal_logsigma_logpdf(p["log_tau"], P.sigma_beta_sd)
    return lp


def _rc_cutpoint_logprior(cut_raw, phi_raw, log_kappa, K, P):
    """Induced-Dirichlet hierarchy for one test/group: flat simplex on
    phi, Student-t on log kappa, per-study induced-Dirichlet cutpoints.
    Returns (log prior, per-study cutpoints)."""
    simplex, jac = kn.simplex_from_unconstrained(phi_raw)
    lp = math.lgamma(K) + jac
    kappa = float(np.exp(log_kappa))
    lp += (pr.student_t_logpdf(math.log(kappa), P.log_kappa_df,
                               P.log_kappa_loc, P.log_kappa_scale)
           + kn.log_kappa_jacobian(kappa) + float(log_kappa))
    hyper = kn.DirichletHyper.from_phi_kappa(simplex, kappa)
    cuts = np.empty(cut_raw.shape)
    for s in range(cut_raw.shape[0]):
        c, cjac = kn.cutpoints_from_unconstrained(cut_raw[s])
        lp += kn.induced_dirichlet_logpdf(c, hyper) + cjac
        cuts[s] = c
    return lp, cuts


def _reference_terms(spec: NMASpec, data: NMADataset, covs: CovariateSet, u):
    """(log prior, per-study log likelihood) for any network family."""
    P = spec.priors
    layout = nma_layout(spec, data, covs)
    p = layout.unpack(np.asarray(u, dtype=float))
    S, T = data.n_studies, data.n_tests
    loglik = np.zeros(S)
    f = spec.family

    if f in ("OHsrocFC", "OHsrocRC"):
        link = scale_link_fn(spec.scale_link)
        lp = pr.halfnormal_logsigma_logpdf(p["log_sigma_eta_beta"],
                                           P.sigma_beta_sd)
        lp += pr.std_normal_logpdf(p["z_eta_beta"])
        lp += pr.halfnormal_logsigma_logpdf(p["log_sigma_eta_gamma"],
                                            P.sigma_gamma_sd)
        lp += pr.std_normal_logpdf(p["z_eta_gamma"])
        lp += pr.halfnormal_logsigma_logpdf(p["log_tau_beta"], P.sigma_beta_sd)
        lp += pr.halfnormal_logsigma_logpdf(p["log_tau_gamma"],
                                            P.sigma_gamma_sd)
        eta_beta = np.exp(float(p["log_sigma_eta_beta"])) * p["z_eta_beta"]
        eta_gamma = np.exp(float(p["log_sigma_eta_gamma"])) * p["z_eta_gamma"]
        tau_beta = _tau_vector(p, "log_tau_beta", spec)
        tau_gamma = _tau_vector(p, "log_tau_gamma", spec)
        for t in range(T):
            idx = data.included_studies(t)
            K_t = spec.K_per_test[t]
            lp += pr.normal_logpdf(p[f"coef_beta_t{t}"], P.mu_beta_sd)
            lp += pr.normal_logpdf(p[f"coef_gamma_t{t}"], P.mu_gamma_sd)
            lp += pr.std_normal_logpdf(p[f"z_delta_beta_t{t}"])
            lp += pr.std_normal_logpdf(p[f"z_delta_gamma_t{t}"])
            X = np.asarray(covs.X[0][t], dtype=float)[idx]
            beta = (X @ p[f"coef_beta_t{t}"] + eta_beta[idx]
                    + tau_beta[t] * p[f"z_delta_beta_t{t}"])
            gamma = (X @ p[f"coef_gamma_t{t}"] + eta_gamma[idx]
                     + tau_gamma[t] * p[f"z_delta_gamma_t{t}"])
            if f == "OHsrocFC":
                c, jac = kn.cutpoints_from_unconstrained(p[f"cut_raw_t{t}"])
                lp += kn.induced_dirichlet_logpdf(
                    c, kn.DirichletHyper(alpha=(P.dirichlet_alpha,) * K_t))
                lp += jac
                cuts = None
            else:
                lp_t, cuts = _rc_cutpoint_logprior(
                    p[f"cut_raw_t{t}"], p[f"phi_raw_t{t}"],
                    p[f"log_kappa_t{t}"], K_t, P)
                lp += lp_t
            for i, s in enumerate(idx):
                pair = data.tests[t].studies[i]
                c_i = c if cuts is None else cuts[i]
                for d, sign in ((0, -1.0), (1, 1.0)):
                    pcond = kn.conditional_probs(
                        c_i, sign * beta[i], float(link(sign * gamma[i])))
                    loglik[s] += kn.factorized_loglik(pair[d], pcond)
        return lp, loglik

    # OBiv / Jones: bivariate shared effects over groups
    lp = _shared_effect_logprior(p, P)
    rho = _rho_from_raw(p["rho_raw"])
    eta = np.exp(p["log_sigma_eta"]) * _mix_rows(p["z_eta"], rho)
    tau = _tau_matrix(p, spec)
    for t in range(T):
        idx = data.included_studies(t)
        K_t = spec.K_per_test[t]
        coef = p[f"coef_t{t}"]
        lp += pr.normal_logpdf(coef, P.mu_beta_sd)
        lp += pr.std_normal_logpdf(p[f"z_delta_t{t}"])
        loc = np.stack(
            [np.asarray(covs.X[d][t], dtype=float)[idx] @ coef[d]
             for d in (0, 1)], axis=1)
        loc = loc + eta[idx] + tau[t] * p[f"z_delta_t{t}"]
        if f == "OBivFC":
            cuts_fixed = []
            for d in (0, 1):
                c, jac = kn.cutpoints_from_unconstrained(p[f"cut_raw_t{t}"][d])
                lp += kn.induced_dirichlet_logpdf(
                    c, kn.DirichletHyper(alpha=(P.dirichlet_alpha,) * K_t))
                lp += jac
                cuts_fixed.append(c)
        elif f == "OBivRC":
            study_cuts = []
            for d in (0, 1):
                lp_d, cuts_d = _rc_cutpoint_logprior(
                    p[f"cut_raw_t{t}"][:, d, :], p[f"phi_raw_t{t}"][d],
                    p[f"log_kappa_t{t}"][d], K_t, P)
                lp += lp_d
                study_cuts.append(cuts_d)
        else:  # JonesFC
            lp += pr.normal_logpdf(p[f"mu_logscale_t{t}"], P.mu_logscale_sd)
            lp += pr.halfnormal_logsigma_logpdf(p[f"log_sigma_logscale_t{t}"],
                                                P.sigma_logscale_sd)
            lp += pr.std_normal_logpdf(p[f"z_logscale_t{t}"])
            scale = np.exp(p[f"mu_logscale_t{t}"]
                           + np.exp(p[f"log_sigma_logscale_t{t}"])
                           * p[f"z_logscale_t{t}"])
            thresholds = _test_thresholds(spec, t)
        for i, s in enumerate(idx):
            pair = data.tests[t].studies[i]
            for d in (0, 1):
                if f == "OBivFC":
                    c_i, sc = cuts_fixed[d], 1.0
                elif f == "OBivRC":
                    c_i, sc = study_cuts[d][i], 1.0
                else:
                    c_i, sc = thresholds, float(scale[i, d])
                pcond = kn.conditional_probs(c_i, loc[i, d], sc)
                loglik[s] += kn.factorized_loglik(pair[d], pcond)
    return lp, loglik


def nma_reference_log_posterior(spec: NMASpec, data: NMADataset, covs, u
                                ) -> float:
    """Numpy-route log-posterior of the network hierarchy."""
    _check_spec_against_data(spec, data)
    covs = _resolve_covs(data, covs)
    lp, loglik = _reference_terms(spec, data, covs, u)
    return float(lp + loglik.sum())


def nma_reference_log_likelihood(spec: NMASpec, data: NMADataset, covs, u
                                 ) -> np.ndarray:
    """Per-study log-likelihood summed over that study's tests (numpy)."""
    _check_spec_against_data(spec, data)
    covs = _resolve_covs(data, covs)
    return _reference_terms(spec, data, covs, u)[1]

# ---------------------------------------------------------------------------
# Autodiff route (vectorized per test, mirrors the reference term-for-term)
# ---------------------------------------------------------------------------

def _static_tables(spec, data, covs):
    """Per-test constants the traced functions close over."""
    out = []
    for t in range(data.n_tests):
        idx = data.included_studies(t)
        obs = {k: jnp.asarray(v)
               for k, v in build_obs_table(data.tests[t]).items()}
        X = [jnp.asarray(np.asarray(covs.X[d][t], dtype=float)[idx])
             for d in (0, 1)]
        out.append({"idx": jnp.asarray(idx), "obs": obs, "X": X,
                    "S_t": data.tests[t].n_studies,
                    "thresholds": jnp.asarray(_test_thresholds(spec, t))})
    return out


def _jax_rc_block(cut_raw, phi_raw, log_kappa, K, P):
    """Traced twin of :func:`_rc_cutpoint_logprior`."""
    phi, phi_jac = jc.simplex_from_unconstrained(phi_raw)
    lp = jspecial.gammaln(float(K)) + phi_jac
    kappa = jnp.exp(log_kappa)
    lp += (jc.student_t_logpdf(jnp.log(kappa), P.log_kappa_df,
                               P.log_kappa_loc, P.log_kappa_scale)
           - jnp.log(kappa) + log_kappa)
    c, cut_jac = jc.cutpoints_from_unconstrained(cut_raw)
    lp += cut_jac
    lp += jc.induced_dirichlet_logpdf(c, (0.01 + phi * kappa)[None, :])
    return lp, c


def _build_nma_obiv_like(spec, data, covs):
    """OBivFC / OBivRC / JonesFC: bivariate shared effects + per-test
    deviations; per-test cutpoint or scale structure."""
    P = spec.priors
    layout = nma_layout(spec, data, covs)
    unpack = jc._unpacker(layout)
    tables = _static_tables(spec, data, covs)
    S, T = data.n_studies, data.n_tests
    f = spec.family

    def shared(p):
        rho = jc.rho_from_raw(p["rho_raw"])
        eta = jnp.exp(p["log_sigma_eta"]) * jc.corr_mix(p["z_eta"], rho)
        tau = jnp.broadcast_to(jnp.exp(p["log_tau"]), (T, 2))
        return eta, tau

    def test_logS(p, t, eta, tau):
        tab = tables[t]
        coef = p[f"coef_t{t}"]
        loc = jnp.stack([tab["X"][0] @ coef[0], tab["X"][1] @ coef[1]],
                        axis=-1)
        loc = loc + eta[tab["idx"]] + tau[t] * p[f"z_delta_t{t}"]
        if f == "OBivFC":
            c, _ = jc.cutpoints_from_unconstrained(p[f"cut_raw_t{t}"])
            return jspecial.log_ndtr(loc[:, :, None] - c[None, :, :])
        if f == "OBivRC":
            c, _ = jc.cutpoints_from_unconstrained(p[f"cut_raw_t{t}"])
            return jspecial.log_ndtr(loc[:, :, None] - c)
        scale = jnp.exp(p[f"mu_logscale_t{t}"]
                        + jnp.exp(p[f"log_sigma_logscale_t{t}"])
                        * p[f"z_logscale_t{t}"])
        return jspecial.log_ndtr((loc[:, :, None] - tab["thresholds"])
                                 / scale[:, :, None])

    def loglik(u):
        p = unpack(u)
        eta, tau = shared(p)
        out = jnp.zeros(S)
        for t in range(T):
            tab = tables[t]
            by_study = jc._loglik_by_study(test_logS(p, t, eta, tau),
                                           tab["obs"], tab["S_t"])
            out = out.at[tab["idx"]].add(by_study)
        return out

    def logpost(u):
        p = unpack(u)
        lp = jc.halfnormal_logsigma_logpdf(p["log_sigma_eta"], P.sigma_beta_sd)
        lp += jc.rho_logpdf(p["rho_raw"], P.rho_conc)
        lp += jc.std_normal_logpdf(p["z_eta"])
        lp += jc.halfnormal_logsigma_logpdf(p["log_tau"], P.sigma_beta_sd)
        for t in range(T):
            K_t = spec.K_per_test[t]
            lp += jc.normal_logpdf(p[f"coef_t{t}"], P.mu_beta_sd)
            lp += jc.std_normal_logpdf(p[f"z_delta_t{t}"])
            if f == "OBivFC":
                c, jac = jc.cutpoints_from_unconstrained(p[f"cut_raw_t{t}"])
                lp += jac + jc.induced_dirichlet_logpdf(
                    c, jnp.full(K_t, P.dirichlet_alpha))
            elif f == "OBivRC":
                for d in (0, 1):
                    lp_d, _ = _jax_rc_block(
                        p[f"cut_raw_t{t}"][:, d, :], p[f"phi_raw_t{t}"][d],
                        p[f"log_kappa_t{t}"][d], K_t, P)
                    lp += lp_d
            else:
                lp += jc.normal_logpdf(p[f"mu_logscale_t{t}"],
                                       P.mu_logscale_sd)
                lp += jc.halfnormal_logsigma_logpdf(
                    p[f"log_sigma_logscale_t{t}"], P.sigma_logscale_sd)
                lp += jc.std_normal_logpdf(p[f"z_logscale_t{t}"])
        return lp + jnp.sum(loglik(u))

    return logpost, loglik


def _build_nma_ohsroc(spec, data, covs):
    P = spec.priors
    layout = nma_layout(spec, data, covs)
    unpack = jc._unpacker(layout)
    tables = _static_tables(spec, data, covs)
    S, T = data.n_studies, data.n_tests
    random_cuts = spec.family == "OHsrocRC"
    link = jc._scale_link(spec.scale_link)

    def test_logS(p, t):
        tab = tables[t]
        sigma_b = jnp.exp(p["log_sigma_eta_beta"])
        sigma_g = jnp.exp(p["log_sigma_eta_gamma"])
        tau_b = jnp.broadcast_to(jnp.exp(p["log_tau_beta"]), (T,))
        tau_g = jnp.broadcast_to(jnp.exp(p["log_tau_gamma"]), (T,))
        idx = tab["idx"]
        beta = (tab["X"][0] @ p[f"coef_beta_t{t}"]
                + sigma_b * p["z_eta_beta"][idx]
                + tau_b[t] * p[f"z_delta_beta_t{t}"])
        gamma = (tab["X"][0] @ p[f"coef_gamma_t{t}"]
                 + sigma_g * p["z_eta_gamma"][idx]
                 + tau_g[t] * p[f"z_delta_gamma_t{t}"])
        loc = jnp.stack([-beta, beta], axis=-1)
        scale = jnp.stack([link(-gamma), link(gamma)], axis=-1)
        c, _ = jc.cutpoints_from_unconstrained(p[f"cut_raw_t{t}"])
        c = c[:, None, :] if random_cuts else c[None, None, :]
        return jspecial.log_ndtr((loc[:, :, None] - c) / scale[:, :, None])

    def loglik(u):
        p = unpack(u)
        out = jnp.zeros(S)
        for t in range(T):
            tab = tables[t]
            by_study = jc._loglik_by_study(test_logS(p, t), tab["obs"],
                                           tab["S_t"])
            out = out.at[tab["idx"]].add(by_study)
        return out

    def logpost(u):
        p = unpack(u)
        lp = jc.halfnormal_logsigma_logpdf(p["log_sigma_eta_beta"],
                                           P.sigma_beta_sd)
        lp += jc.std_normal_logpdf(p["z_eta_beta"])
        lp += jc.halfnormal_logsigma_logpdf(p["log_sigma_eta_gamma"],
                                            P.sigma_gamma_sd)
        lp += jc.std_normal_logpdf(p["z_eta_gamma"])
        lp += jc.halfnormal_logsigma_logpdf(p["log_tau_beta"], P.sigma_beta_sd)
        lp += jc.halfnormal_logsigma_logpdf(p["log_tau_gamma"],
                                            P.sigma_gamma_sd)
        for t in range(T):
            K_t = spec.K_per_test[t]
            lp += jc.normal_logpdf(p[f"coef_beta_t{t}"], P.mu_beta_sd)
            lp += jc.normal_logpdf(p[f"coef_gamma_t{t}"], P.mu_gamma_sd)
            lp += jc.std_normal_logpdf(p[f"z_delta_beta_t{t}"])
            lp += jc.std_normal_logpdf(p[f"z_delta_gamma_t{t}"])
            if random_cuts:
                lp_t, _ = _jax_rc_block(
                    p[f"cut_raw_t{t}"], p[f"phi_raw_t{t}"],
                    p[f"log_kappa_t{t}"], K_t, P)
                lp += lp_t
            else:
                c, jac = jc.cutpoints_from_unconstrained(p[f"cut_raw_t{t}"])
                lp += jac + jc.induced_dirichlet_logpdf(
                    c, jnp.full(K_t, P.dirichlet_alpha))
        return lp + jnp.sum(loglik(u))

    return logpost, loglik

_NMA_BUILDERS = {
    "OBivFC": _build_nma_obiv_like, "OBivRC": _build_nma_obiv_like,
    "JonesFC": _build_nma_obiv_like,
    "OHsrocFC": _build_nma_ohsroc, "OHsrocRC": _build_nma_ohsroc,
}


@dataclass
class CompiledNMAModel:
    """A network model bound to its dataset and design matrices."""

    spec: NMASpec
    data: NMADataset
    covs: CovariateSet
    layout: ParamLayout
    _logpost: object
    _value_and_grad: object
    _loglik: object

    def log_posterior(self, u) -> float:
        return float(self._logpost(np.asarray(u, dtype=float)))

    def value_and_grad(self, u):
        v, g = self._value_and_grad(np.asarray(u, dtype=float))
        return float(v), np.asarray(g)

    def log_likelihood(self, u) -> np.ndarray:
        """Per-study log-likelihood vector (priors excluded)."""
        return np.asarray(self._loglik(np.asarray(u, dtype=float)))

    def reference_log_posterior(self, u) -> float:
        return nma_reference_log_posterior(self.spec, self.data, self.covs, u)

    def constrain(self, u) -> dict:
        return nma_constrain(self.spec, self.data, self.covs, u)

    def constrain_draws(self, draws: np.ndarray) -> dict:
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        per = [self.constrain(row) for row in draws]
        return {key: np.stack([p[key] for p in per]) for key in per[0]}

    def initialize(self, seed: int, jitter: float = 0.1) -> np.ndarray:
        return nma_initialize(self.spec, self.data, self.covs, seed,
                              jitter=jitter)


def build_nma_model(spec: NMASpec, data: NMADataset,
                    covs: Optional[CovariateSet] = None) -> CompiledNMAModel:
    """Compile a network family against a dataset and design matrices."""
    _check_spec_against_data(spec, data)
    covs = _resolve_covs(data, covs)
    logpost_fn, loglik_fn = _NMA_BUILDERS[spec.family](spec, data, covs)
    return CompiledNMAModel(
        spec=spec, data=data, covs=covs,
        layout=nma_layout(spec, data, covs),
        _logpost=jax.jit(logpost_fn),
        _value_and_grad=jax.jit(jax.value_and_grad(logpost_fn)),
        _loglik=jax.jit(loglik_fn),
    )


def nma_constrain(spec: NMASpec, data: NMADataset, covs, u) -> dict:
    """Natural parameters at one unconstrained vector (numpy).

    Per-test slices carry a ``_t{t}`` suffix; ``tau``-style blocks are
    expanded to per-test shape even under compound symmetry.
    """
    covs = _resolve_covs(data, covs)
    layout = nma_layout(spec, data, covs)
    p = layout.unpack(np.asarray(u, dtype=float))
    T = data.n_tests
    f = spec.family
    out = {}

    if f in ("OHsrocFC", "OHsrocRC"):
        link = scale_link_fn(spec.scale_link)
        out["sigma_eta_beta"] = float(np.exp(p["log_sigma_eta_beta"]))
        out["sigma_eta_gamma"] = float(np.exp(p["log_sigma_eta_gamma"]))
        out["tau_beta"] = _tau_vector(p, "log_tau_beta", spec)
        out["tau_gamma"] = _tau_vector(p, "log_tau_gamma", spec)
        out["eta_beta"] = out["sigma_eta_beta"] * p["z_eta_beta"]
        out["eta_gamma"] = out["sigma_eta_gamma"] * p["z_eta_gamma"]
        for t in range(T):
            idx = data.included_studies(t)
            X = np.asarray(covs.X[0][t], dtype=float)[idx]
            out[f"coef_beta_t{t}"] = p[f"coef_beta_t{t}"]
            out[f"coef_gamma_t{t}"] = p[f"coef_gamma_t{t}"]
            beta = (X @ p[f"coef_beta_t{t}"] + out["eta_beta"][idx]
                    + out["tau_beta"][t] * p[f"z_delta_beta_t{t}"])
            gamma = (X @ p[f"coef_gamma_t{t}"] + out["eta_gamma"][idx]
                     + out["tau_gamma"][t] * p[f"z_delta_gamma_t{t}"])
            out[f"beta_t{t}"] = beta
            out[f"gamma_t{t}"] = gamma
            out[f"scale_t{t}"] = np.stack([link(-gamma), link(gamma)], axis=1)
            if f == "OHsrocFC":
                out[f"cutpoints_t{t}"] = kn.cutpoints_from_unconstrained(
                    p[f"cut_raw_t{t}"])[0]
            else:
                cuts = np.empty(p[f"cut_raw_t{t}"].shape)
                for s in range(cuts.shape[0]):
                    cuts[s] = kn.cutpoints_from_unconstrained(
                        p[f"cut_raw_t{t}"][s])[0]
                out[f"study_cutpoints_t{t}"] = cuts
                out[f"phi_t{t}"] = kn.simplex_from_unconstrained(
                    p[f"phi_raw_t{t}"])[0]
                out[f"kappa_t{t}"] = float(np.exp(p[f"log_kappa_t{t}"]))
        return out

    rho = _rho_from_raw(p["rho_raw"])
    sigma_eta = np.exp(p["log_sigma_eta"])
    out["sigma_eta"] = sigma_eta
    out["rho"] = float(rho)
    out["tau"] = _tau_matrix(p, spec)
    out["eta"] = sigma_eta * _mix_rows(p["z_eta"], rho)
    for t in range(T):
        idx = data.included_studies(t)
        coef = p[f"coef_t{t}"]
        out[f"coef_t{t}"] = coef
        loc = np.stack(
            [np.asarray(covs.X[d][t], dtype=float)[idx] @ coef[d]
             for d in (0, 1)], axis=1)
        delta = out["tau"][t] * p[f"z_delta_t{t}"]
        out[f"delta_t{t}"] = delta
        loc = loc + out["eta"][idx] + delta
        if f == "OBivFC":
            out[f"beta_t{t}"] = loc
            out[f"cutpoints_t{t}"] = np.stack(
                [kn.cutpoints_from_unconstrained(p[f"cut_raw_t{t}"][d])[0]
                 for d in (0, 1)])
        elif f == "OBivRC":
            out[f"beta_t{t}"] = loc
            cuts = np.empty(p[f"cut_raw_t{t}"].shape)
            for s in range(cuts.shape[0]):
                for d in (0, 1):
                    cuts[s, d] = kn.cutpoints_from_unconstrained(
                        p[f"cut_raw_t{t}"][s, d])[0]
            out[f"study_cutpoints_t{t}"] = cuts
            out[f"phi_t{t}"] = np.stack(
                [kn.simplex_from_unconstrained(p[f"phi_raw_t{t}"][d])[0]
                 for d in (0, 1)])
            out[f"kappa_t{t}"] = np.exp(p[f"log_kappa_t{t}"])
        else:
            out[f"loc_t{t}"] = loc
            out[f"mu_logscale_t{t}"] = p[f"mu_logscale_t{t}"]
            out[f"sigma_logscale_t{t}"] = np.exp(p[f"log_sigma_logscale_t{t}"])
            out[f"scale_t{t}"] = np.exp(
                p[f"mu_logscale_t{t}"]
                + out[f"sigma_logscale_t{t}"] * p[f"z_logscale_t{t}"])
            out[f"thresholds_t{t}"] = _test_thresholds(spec, t)
    return out


def nma_initialize(spec: NMASpec, data: NMADataset, covs, seed: int,
                   jitter: float = 0.1) -> np.ndarray:
    """Data-informed start: per-test pooled frequencies set the cutpoint
    (or scale) blocks, hierarchical SDs start at 0.2, plus seeded jitter."""
    from .models.common import _pooled_survival, _survival_to_cut_raw

    covs = _resolve_covs(data, covs)
    layout = nma_layout(spec, data, covs)
    vals = {name: np.zeros(layout.shapes[name]) for name in layout.names}
    log_sd0 = math.log(0.2)
    f = spec.family

    for t in range(data.n_tests):
        sub = data.tests[t]
        if f in ("OBivFC", "OBivRC"):
            for d in (0, 1):
                raw = _survival_to_cut_raw(_pooled_survival(sub, groups=(d,)))
                if f == "OBivFC":
                    vals[f"cut_raw_t{t}"][d] = raw
                else:
                    vals[f"cut_raw_t{t}"][:, d, :] = raw
                    probs = kn.cutpoints_to_probs(
                        kn.cutpoints_from_unconstrained(raw)[0])
                    vals[f"phi_raw_t{t}"][d] = kn.unconstrained_from_simplex(
                        probs)
            if f == "OBivRC":
                vals[f"log_kappa_t{t}"][:] = 3.0
        elif f in ("OHsrocFC", "OHsrocRC"):
            s0 = kn._phi_inv(_pooled_survival(sub, groups=(0,)))
            s1 = kn._phi_inv(_pooled_survival(sub, groups=(1,)))
            cut = -(s0 + s1) / 2.0
            for k in range(1, spec.K_per_test[t] - 1):
                cut[k] = max(cut[k], cut[k - 1] + 1e-3)
            raw = kn.unconstrained_from_cutpoints(cut)
            if f == "OHsrocFC":
                vals[f"cut_raw_t{t}"][:] = raw
            else:
                vals[f"cut_raw_t{t}"][:, :] = raw
                vals[f"phi_raw_t{t}"][:] = kn.unconstrained_from_simplex(
                    kn.cutpoints_to_probs(cut))
                vals[f"log_kappa_t{t}"] = np.asarray(3.0)
            vals[f"coef_beta_t{t}"][0] = float(np.median((s1 - s0) / 2.0))
        else:  # JonesFC
            thr = _test_thresholds(spec, t)
            A = np.column_stack([np.ones_like(thr), thr])
            for d in (0, 1):
                z = kn._phi_inv(_pooled_survival(sub, groups=(d,)))
                coef, *_ = np.linalg.lstsq(A, z, rcond=None)
                sigma = -1.0 / min(coef[1], -0.05)
                vals[f"coef_t{t}"][d, 0] = coef[0] * sigma
                vals[f"mu_logscale_t{t}"][d] = math.log(sigma)
            vals[f"log_sigma_logscale_t{t}"][:] = log_sd0

    if f in ("OHsrocFC", "OHsrocRC"):
        for name in ("log_sigma_eta_beta", "log_sigma_eta_gamma",
                     "log_tau_beta", "log_tau_gamma"):
            vals[name] = np.full(layout.shapes[name], log_sd0)
    else:
        vals["log_sigma_eta"][:] = log_sd0
        vals["log_tau"] = np.full(layout.shapes["log_tau"], log_sd0)

    u = layout.pack(vals)
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    return u + jitter * rng.standard_normal(u.size)

# ---------------------------------------------------------------------------
# Posterior operations on stacked draws
# ---------------------------------------------------------------------------

def _default_case(spec: NMASpec, params) -> BaselineCase:
    """Intercept-only evaluation point: x = (1, 0, ..., 0) per test."""
    x = [[], []]
    for t in range(spec.n_tests):
        key = ("coef_beta_t" if spec.family.startswith("OHsroc")
               else "coef_t") + str(t)
        p = params[key].shape[-1]
        vec = np.zeros(p)
        vec[0] = 1.0
        for d in (0, 1):
            x[d].append(vec.copy())
    return BaselineCase(name="baseline", x=(tuple(x[0]), tuple(x[1])))


def _case_vectors(spec, params, case, t):
    if case is None:
        case = _default_case(spec, params)
    x0 = np.asarray(case.x[0][t], dtype=float)
    x1 = np.asarray(case.x[1][t], dtype=float)
    key = ("coef_beta_t" if spec.family.startswith("OHsroc")
           else "coef_t") + str(t)
    p = params[key].shape[-1]
    for label, vec in (("group 0", x0), ("group 1", x1)):
        if vec.shape != (p,):
            raise ValueError(
                f"scenario '{case.name}': {label} vector for test {t} has "
                f"length {vec.size}, expected {p}")
    return x0, x1


def _summary_cuts(params, key_fixed, key_study):
    """Summary cutpoints per draw: the fixed set, or the across-study
    median for random-cutpoint fits."""
    if key_fixed in params:
        return params[key_fixed]
    return np.median(params[key_study], axis=1)


def nma_accuracy_draws(spec: NMASpec, params, t: int, case=None):
    """Per-draw summary (Se, Sp) curves for test ``t`` at a covariate
    setting (default: intercept only); each (n_draws, K_t - 1)."""
    x0, x1 = _case_vectors(spec, params, case, t)
    f = spec.family
    if f in ("OBivFC", "OBivRC"):
        cuts = _summary_cuts(params, f"cutpoints_t{t}",
                             f"study_cutpoints_t{t}")  # (n, 2, K-1)
        loc0 = params[f"coef_t{t}"][:, 0, :] @ x0
        loc1 = params[f"coef_t{t}"][:, 1, :] @ x1
        sp = ndtr(cuts[:, 0, :] - loc0[:, None])
        se = 1.0 - ndtr(cuts[:, 1, :] - loc1[:, None])
        return se, sp
    if f in ("OHsrocFC", "OHsrocRC"):
        link = scale_link_fn(spec.scale_link)
        cuts = _summary_cuts(params, f"cutpoints_t{t}",
                             f"study_cutpoints_t{t}")  # (n, K-1)
        loc_b = params[f"coef_beta_t{t}"] @ x0
        loc_g = params[f"coef_gamma_t{t}"] @ x0
        sp = ndtr((cuts + loc_b[:, None]) / link(-loc_g)[:, None])
        se = 1.0 - ndtr((cuts - loc_b[:, None]) / link(loc_g)[:, None])
        return se, sp
    thr = params[f"thresholds_t{t}"][0]
    loc0 = params[f"coef_t{t}"][:, 0, :] @ x0
    loc1 = params[f"coef_t{t}"][:, 1, :] @ x1
    scale = np.exp(params[f"mu_logscale_t{t}"])
    sp = ndtr((thr[None, :] - loc0[:, None]) / scale[:, 0][:, None])
    se = 1.0 - ndtr((thr[None, :] - loc1[:, None]) / scale[:, 1][:, None])
    return se, sp


def _interval(draws, level):
    x = np.asarray(draws, dtype=float)
    lo, hi = _central_interval(x, level)
    return {"median": float(np.median(x)), "lo": float(lo), "hi": float(hi)}


def _accuracy_summary(spec, params, t, case, level):
    se, sp = nma_accuracy_draws(spec, params, t, case=case)
    se_lo, se_hi = _central_interval(se, level)
    sp_lo, sp_hi = _central_interval(sp, level)
    summary = AccuracySummary(
        thresholds=tuple(range(1, spec.K_per_test[t])),
        se_median=np.median(se, axis=0), se_lo=se_lo, se_hi=se_hi,
        sp_median=np.median(sp, axis=0), sp_lo=sp_lo, sp_hi=sp_hi)
    return summary, se, sp


def summarize_nma_accuracy(spec: NMASpec, params, case=None,
                           level: float = 0.95):
    """Per-test accuracy summaries (median and central interval)."""
    return [_accuracy_summary(spec, params, t, case, level)[0]
            for t in range(spec.n_tests)]


def _auc_draws(se, sp):
    return np.array([auc_from_curve(se[i], sp[i]) for i in range(len(se))])


def nma_auc_summary(spec: NMASpec, params, case=None, level: float = 0.95):
    """Per-test area under the summary ROC curve."""
    return [_interval(_auc_draws(*nma_accuracy_draws(spec, params, t,
                                                     case=case)), level)
            for t in range(spec.n_tests)]


def variance_decomposition(spec: NMASpec, params, level: float = 0.95,
                           test_names=None):
    """Split each test's between-study variance into the shared-study and
    test-specific parts: total = sigma^2 + tau_t^2, prop = tau_t^2/total.

    One record per test and disease group (location/scale component for
    the HSROC variant, whose study effects are scalar per component).
    """
    names = list(test_names) if test_names is not None \
        else [f"test{t}" for t in range(spec.n_tests)]
    records = []
    if spec.family in ("OHsrocFC", "OHsrocRC"):
        for t in range(spec.n_tests):
            for comp, sig_key, tau_key in (
                    ("location", "sigma_eta_beta", "tau_beta"),
                    ("scale", "sigma_eta_gamma", "tau_gamma")):
                sig2 = params[sig_key] ** 2
                tau2 = params[tau_key][:, t] ** 2
                total = sig2 + tau2
                records.append({
                    "test_index": t, "test": names[t], "group": None,
                    "component": comp,
                    "total_var": _interval(total, level),
                    "prop_test_specific": _interval(tau2 / total, level),
                })
        return records
    for t in range(spec.n_tests):
        for d in (0, 1):
            sig2 = params["sigma_eta"][:, d] ** 2
            tau2 = params["tau"][:, t, d] ** 2
            total = sig2 + tau2
            records.append({
                "test_index": t, "test": names[t], "group": d,
                "component": "location",
                "total_var": _interval(total, level),
                "prop_test_specific": _interval(tau2 / total, level),
            })
    return records


def _check_threshold(spec, t, k):
    if not 1 <= k <= spec.K_per_test[t] - 1:
        raise ValueError(f"threshold {k} out of range for test {t} "
                         f"(1..{spec.K_per_test[t] - 1})")


def pairwise_difference_draws(spec: NMASpec, params, test_a: int,
                              test_b: int, k_a: int, k_b: int, case=None):
    """Per-draw (dSe, dSp) between two tests, sign test_a - test_b."""
    _check_threshold(spec, test_a, k_a)
    _check_threshold(spec, test_b, k_b)
    se_a, sp_a = nma_accuracy_draws(spec, params, test_a, case=case)
    se_b, sp_b = nma_accuracy_draws(spec, params, test_b, case=case)
    return (se_a[:, k_a - 1] - se_b[:, k_b - 1],
            sp_a[:, k_a - 1] - sp_b[:, k_b - 1])


def pairwise_comparisons(spec: NMASpec, params, pairs=None, thresholds=None,
                         case=None, level: float = 0.95, test_names=None):
    """Accuracy differences per test pair and threshold, quantiled within
    draws.  ``thresholds`` entries are either one label applied to both
    tests or a (k_a, k_b) pair; the default is every label both tests
    share."""
    names = list(test_names) if test_names is not None \
        else [f"test{t}" for t in range(spec.n_tests)]
    if pairs is None:
        pairs = [(a, b) for a in range(spec.n_tests)
                 for b in range(a + 1, spec.n_tests)]
    records = []
    for a, b in pairs:
        if thresholds is None:
            ks = [(k, k) for k in
                  range(1, min(spec.K_per_test[a], spec.K_per_test[b]))]
        else:
            ks = [k if isinstance(k, tuple) else (int(k), int(k))
                  for k in thresholds]
        for k_a, k_b in ks:
            dse, dsp = pairwise_difference_draws(spec, params, a, b, k_a,
                                                 k_b, case=case)
            records.append({
                "test_a": names[a], "test_b": names[b],
                "threshold_a": k_a, "threshold_b": k_b,
                "delta_se": _interval(dse, level),
                "delta_sp": _interval(dsp, level),
            })
    return records


def recompute_baseline(spec: NMASpec, params, cases: Sequence[BaselineCase],
                       level: float = 0.95, test_names=None):
    """Re-derive per-test accuracy and AUC summaries at new covariate
    settings from stored coefficient draws -- no refitting, cost linear in
    the number of draws."""
    names = list(test_names) if test_names is not None \
        else [f"test{t}" for t in range(spec.n_tests)]
    out = []
    for case in cases:
        per_test = []
        for t in range(spec.n_tests):
            summary, se, sp = _accuracy_summary(spec, params, t, case, level)
            per_test.append({
                "test": names[t],
                "accuracy": summary,
                "auc": _interval(_auc_draws(se, sp), level),
            })
        out.append({"name": case.name, "tests": per_test})
    return out


def load_scenarios(path, test_names: Sequence[str]) -> list:
    """Read named baseline-covariate scenarios from a JSON file.

    Layout: ``{"schema_version": 1, "scenarios": [{"name": ..., "x":
    {test name: vector or [group-0 vector, group-1 vector]}}]}``.  Every
    test must be covered; a bare vector applies to both groups.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or doc.get("schema_version") != 1:
        raise ValueError(f"{path}: expected a scenario file with "
                         f"schema_version 1")
    unknown = set(doc) - {"schema_version", "scenarios"}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    cases = []
    for i, scn in enumerate(doc.get("scenarios", [])):
        name = scn.get("name", f"scenario{i}")
        table = scn.get("x", {})
        bad = set(table) - set(test_names)
        if bad:
            raise ValueError(f"{path}: scenario '{name}' names unknown "
                             f"tests {sorted(bad)}")
        missing = set(test_names) - set(table)
        if missing:
            raise ValueError(f"{path}: scenario '{name}' is missing tests "
                             f"{sorted(missing)}")
        x = [[], []]
        for tname in test_names:
            entry = table[tname]
            arr = np.asarray(entry, dtype=float)
            if arr.ndim == 1:
                pair = (arr, arr.copy())
            elif arr.ndim == 2 and arr.shape[0] == 2:
                pair = (arr[0], arr[1])
            else:
                raise ValueError(
                    f"{path}: scenario '{name}', test '{tname}': expected "
                    f"a vector or a [group-0, group-1] pair")
            for d in (0, 1):
                x[d].append(pair[d])
        cases.append(BaselineCase.from_vectors(name, x))
    return cases
