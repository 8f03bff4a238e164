"""Model specifications, parameter layouts, and shared structure.

Six families share this machinery:

* ``OBivFC`` / ``OBivRC`` — per-group locations with an explicit
  between-study bivariate normal; cutpoints per group, either one fixed
  set (FC) or per-study sets under an induced-Dirichlet hierarchy (RC).
* ``OHsrocFC`` / ``OHsrocRC`` — one shared cutpoint set; group d=0 uses
  location -beta_s and scale f(-gamma_s), group d=1 uses +beta_s and
  f(+gamma_s), f the configured positive link.
* ``JonesFC`` — fixed transformed thresholds g(k+1) with a bivariate
  normal on locations and log-normal scales.
* ``StratBiv`` — dichotomize at one threshold, bivariate normal on the
  probit survival pair; studies missing that threshold are excluded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .. import kernel as kn
from .layout import ParamLayout
from .priors import DEFAULT_PRIORS, PriorSet

__all__ = ["ModelSpec", "FAMILIES", "BOXCOX_GRID", "layout_for",
           "jones_thresholds", "transformed_thresholds", "scale_link_fn",
           "stratum_indices", "build_obs_table", "constrain", "initialize"]

FAMILIES = ("OBivFC", "OBivRC", "OHsrocFC", "OHsrocRC", "JonesFC", "StratBiv")

#: Allowed fixed Box-Cox exponents for the transformed-threshold family.
BOXCOX_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to assemble a model's log-posterior."""

    family: str
    K: int
    n_studies: int
    priors: PriorSet = field(default_factory=PriorSet)
    scale_link: str = "exp"
    jones_transform: str = "log"
    jones_lambda: float = 0.5
    stratbiv_threshold: int = 1
    nma: Optional[object] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family '{self.family}'; "
                             f"expected one of {FAMILIES}")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.n_studies < 1:
            raise ValueError("need at least one study")
        if self.scale_link not in ("exp", "softplus"):
            raise ValueError("scale_link must be 'exp' or 'softplus'")
        if self.jones_transform not in ("log", "boxcox"):
            raise ValueError("jones_transform must be 'log' or 'boxcox'")
        if self.jones_transform == "boxcox" and \
                self.jones_lambda not in BOXCOX_GRID:
            raise ValueError(f"jones_lambda must come from {BOXCOX_GRID}")
        if not 1 <= self.stratbiv_threshold <= self.K - 1:
            raise ValueError("stratbiv_threshold out of range")


def layout_for(spec: ModelSpec) -> ParamLayout:
    """Named, disjoint unconstrained-parameter blocks for a family.

    For StratBiv, ``spec.n_studies`` must already be the stratum size.
    """
    S, K = spec.n_studies, spec.K
    f = spec.family
    if f == "OBivFC":
        return ParamLayout([
            ("cut_raw", (2, K - 1)),
            ("mu_beta", (2,)), ("log_sigma_beta", (2,)), ("rho_raw", ()),
            ("z_beta", (S, 2)),
        ])
    if f == "OBivRC":
        return ParamLayout([
            ("cut_raw", (S, 2, K - 1)),
            ("phi_raw", (2, K - 1)), ("log_kappa", (2,)),
            ("mu_beta", (2,)), ("log_sigma_beta", (2,)), ("rho_raw", ()),
            ("z_beta", (S, 2)),
        ])
    if f == "OHsrocFC":
        return ParamLayout([
            ("cut_raw", (K - 1,)),
            ("mu_beta", ()), ("log_sigma_beta", ()), ("z_beta", (S,)),
            ("mu_gamma", ()), ("log_sigma_gamma", ()), ("z_gamma", (S,)),
        ])
    if f == "OHsrocRC":
        return ParamLayout([
            ("cut_raw", (S, K - 1)),
            ("phi_raw", (K - 1,)), ("log_kappa", ()),
            ("mu_beta", ()), ("log_sigma_beta", ()), ("z_beta", (S,)),
            ("mu_gamma", ()), ("log_sigma_gamma", ()), ("z_gamma", (S,)),
        ])
    if f == "JonesFC":
        return ParamLayout([
            ("mu_loc", (2,)), ("log_sigma_loc", (2,)), ("rho_raw", ()),
            ("z_loc", (S, 2)),
            ("mu_logscale", (2,)), ("log_sigma_logscale", (2,)),
            ("z_logscale", (S, 2)),
        ])
    if f == "StratBiv":
        return ParamLayout([
            ("mu_theta", (2,)), ("log_sigma_theta", (2,)), ("rho_raw", ()),
            ("z_theta", (S, 2)),
        ])
    raise AssertionError(f)


def transformed_thresholds(K: int, transform: str = "log",
                           lam: float = 0.5) -> np.ndarray:
    """Transformed threshold locations g(k+1), k = 1..K-1.

    Ordinal threshold k sits at raw score k+1, mapped through log or a
    fixed-exponent Box-Cox transform (exponent 0 reduces to log).
    """
    raw = np.arange(2, K + 1, dtype=float)
    if transform == "log" or lam == 0.0:
        return np.log(raw)
    return (raw ** lam - 1.0) / lam


def jones_thresholds(spec: ModelSpec) -> np.ndarray:
    """Transformed threshold locations for a model spec."""
    return transformed_thresholds(spec.K, spec.jones_transform,
                                  spec.jones_lambda)


def scale_link_fn(name: str):
    """Positive link for HSROC scales: exp (default) or softplus."""
    if name == "exp":
        return np.exp
    if name == "softplus":
        return lambda x: np.logaddexp(0.0, x)
    raise ValueError(name)


def stratum_indices(data, threshold_k: int) -> np.ndarray:
    """Studies observing ``threshold_k`` (1-based) in both groups."""
    keep = []
    for s, pair in enumerate(data.studies):
        if all(pair[d].cum_counts[threshold_k - 1] != kn.MISSING
               for d in (0, 1)):
            keep.append(s)
    return np.asarray(keep, dtype=np.int64)


def build_obs_table(data) -> dict:
    """Static index arrays for the vectorized factorized likelihood.

    One row per observed (study, group, threshold) transition between
    consecutive observed thresholds; threshold 0 is the virtual anchor
    carrying ``n_total``.
    """
    rows = []
    for s, pair in enumerate(data.studies):
        for d in (0, 1):
            grp = pair[d]
            for prev_c, c, prev_k, k in kn._observed_pairs(
                    grp.n_total, grp.cum_counts):
                rows.append((s, d, k, prev_k, c, prev_c))
    if not rows:
        raise ValueError("dataset has no observed thresholds")
    arr = np.asarray(rows, dtype=np.int64)
    return {
        "s": arr[:, 0], "d": arr[:, 1], "k": arr[:, 2], "prev_k": arr[:, 3],
        "count": arr[:, 4], "prev_count": arr[:, 5],
    }


# ---------------------------------------------------------------------------
# Natural-parameter reconstruction
# ---------------------------------------------------------------------------

def _expit(x):
    return special.expit(x)


def _corr_chol_mix(z, rho):
    """Apply the 2x2 correlation Cholesky [[1,0],[rho,sqrt(1-rho^2)]] to
    rows of z (S, 2)."""
    out = np.empty_like(z)
    out[..., 0] = z[..., 0]
    out[..., 1] = rho * z[..., 0] + math.sqrt(max(1.0 - rho * rho, 0.0)) * z[..., 1]
    return out


def constrain(spec: ModelSpec, u: np.ndarray) -> dict:
    """Map an unconstrained vector to natural parameters (numpy)."""
    layout = layout_for(spec)
    p = layout.unpack(np.asarray(u, dtype=float))
    f = spec.family
    out = {}
    if f in ("OBivFC", "OBivRC"):
        sigma = np.exp(p["log_sigma_beta"])
        rho = 2.0 * _expit(p["rho_raw"]) - 1.0
        beta = p["mu_beta"] + sigma * _corr_chol_mix(p["z_beta"], rho)
        out.update(mu_beta=p["mu_beta"], sigma_beta=sigma, rho=float(rho),
                   beta=beta)
        if f == "OBivFC":
            cuts = np.stack([
                kn.cutpoints_from_unconstrained(p["cut_raw"][d])[0]
                for d in (0, 1)])
            out["cutpoints"] = cuts
        else:
            S = spec.n_studies
            study_cuts = np.empty((S, 2, spec.K - 1))
            for s in range(S):
                for d in (0, 1):
                    study_cuts[s, d] = kn.cutpoints_from_unconstrained(
                        p["cut_raw"][s, d])[0]
            phi = np.stack([kn.simplex_from_unconstrained(p["phi_raw"][d])[0]
                            for d in (0, 1)])
            out.update(study_cutpoints=study_cuts, phi=phi,
                       kappa=np.exp(p["log_kappa"]))
    elif f in ("OHsrocFC", "OHsrocRC"):
        link = scale_link_fn(spec.scale_link)
        beta = p["mu_beta"] + np.exp(p["log_sigma_beta"]) * p["z_beta"]
        gamma = p["mu_gamma"] + np.exp(p["log_sigma_gamma"]) * p["z_gamma"]
        out.update(mu_beta=float(p["mu_beta"]),
                   sigma_beta=float(np.exp(p["log_sigma_beta"])),
                   mu_gamma=float(p["mu_gamma"]),
                   sigma_gamma=float(np.exp(p["log_sigma_gamma"])),
                   beta=beta, gamma=gamma,
                   scale=np.stack([link(-gamma), link(gamma)], axis=1))
        if f == "OHsrocFC":
            out["cutpoints"] = kn.cutpoints_from_unconstrained(p["cut_raw"])[0]
        else:
            S = spec.n_studies
            study_cuts = np.empty((S, spec.K - 1))
            for s in range(S):
                study_cuts[s] = kn.cutpoints_from_unconstrained(
                    p["cut_raw"][s])[0]
            out.update(study_cutpoints=study_cuts,
                       phi=kn.simplex_from_unconstrained(p["phi_raw"])[0],
                       kappa=float(np.exp(p["log_kappa"])))
    elif f == "JonesFC":
        rho = 2.0 * _expit(p["rho_raw"]) - 1.0
        sigma_loc = np.exp(p["log_sigma_loc"])
        loc = p["mu_loc"] + sigma_loc * _corr_chol_mix(p["z_loc"], rho)
        logscale = (p["mu_logscale"]
                    + np.exp(p["log_sigma_logscale"]) * p["z_logscale"])
        out.update(mu_loc=p["mu_loc"], sigma_loc=sigma_loc, rho=float(rho),
                   loc=loc, scale=np.exp(logscale),
                   mu_logscale=p["mu_logscale"],
                   sigma_logscale=np.exp(p["log_sigma_logscale"]),
                   thresholds=jones_thresholds(spec))
    elif f == "StratBiv":
        rho = 2.0 * _expit(p["rho_raw"]) - 1.0
        sigma = np.exp(p["log_sigma_theta"])
        theta = p["mu_theta"] + sigma * _corr_chol_mix(p["z_theta"], rho)
        out.update(mu_theta=p["mu_theta"], sigma_theta=sigma,
                   rho=float(rho), theta=theta)
    return out


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _pooled_survival(data, groups=(0, 1)) -> np.ndarray:
    """Pooled per-threshold survival proportions over observed entries.

    Thresholds nobody observed are filled by linear interpolation on the
    probit scale; the result is strictly decreasing in (1e-4, 1-1e-4).
    """
    K = data.K
    num = np.zeros(K - 1)
    den = np.zeros(K - 1)
    for pair in data.studies:
        for d in groups:
            grp = pair[d]
            if grp.n_total <= 0:
                continue
            for k, c in enumerate(grp.cum_counts):
                if c != kn.MISSING:
                    num[k] += c
                    den[k] += grp.n_total
    if not np.any(den > 0):
        raise ValueError("all thresholds missing in every study")
    surv = np.full(K - 1, np.nan)
    surv[den > 0] = num[den > 0] / den[den > 0]
    surv = np.clip(surv, 1e-4, 1.0 - 1e-4)
    z = kn._phi_inv(surv)
    idx = np.arange(K - 1)
    known = ~np.isnan(z)
    z = np.interp(idx, idx[known], z[known])
    # enforce strict decrease with a minimum step
    for k in range(1, K - 1):
        z[k] = min(z[k], z[k - 1] - 1e-3)
    return kn._phi(z)


def _survival_to_cut_raw(surv: np.ndarray, loc: float = 0.0) -> np.ndarray:
    """Unconstrained cutpoints whose survival at location ``loc`` matches."""
    c = loc - kn._phi_inv(surv)
    return kn.unconstrained_from_cutpoints(c)


def initialize(spec: ModelSpec, data, seed: int, jitter: float = 0.1) -> np.ndarray:
    """Deterministic, data-informed starting point plus seeded jitter.

    Cutpoints come from pooled empirical frequencies, locations from
    pooled probit means, hierarchical SDs start at 0.2, concentration at
    exp(3); everything gets ``jitter``-scale noise from a counter-based
    RNG so distinct seeds differ only in the jitter term.
    """
    layout = layout_for(spec)
    vals = {name: np.zeros(layout.shapes[name]) for name in layout.names}
    log_sd0 = math.log(0.2)
    f = spec.family

    if f in ("OBivFC", "OBivRC"):
        for d in (0, 1):
            surv = _pooled_survival(data, groups=(d,))
            raw = _survival_to_cut_raw(surv)
            if f == "OBivFC":
                vals["cut_raw"][d] = raw
            else:
                vals["cut_raw"][:, d, :] = raw
                probs = kn.cutpoints_to_probs(
                    kn.cutpoints_from_unconstrained(raw)[0])
                vals["phi_raw"][d] = kn.unconstrained_from_simplex(probs)
        if f == "OBivRC":
            vals["log_kappa"][:] = 3.0
        vals["log_sigma_beta"][:] = log_sd0
    elif f in ("OHsrocFC", "OHsrocRC"):
        s0 = kn._phi_inv(_pooled_survival(data, groups=(0,)))
        s1 = kn._phi_inv(_pooled_survival(data, groups=(1,)))
        cut = -(s0 + s1) / 2.0
        for k in range(1, spec.K - 1):
            cut[k] = max(cut[k], cut[k - 1] + 1e-3)
        raw = kn.unconstrained_from_cutpoints(cut)
        mu_beta = float(np.median((s1 - s0) / 2.0))
        if f == "OHsrocFC":
            vals["cut_raw"][:] = raw
        else:
            vals["cut_raw"][:, :] = raw
            probs = kn.cutpoints_to_probs(cut)
            vals["phi_raw"][:] = kn.unconstrained_from_simplex(probs)
            vals["log_kappa"] = np.asarray(3.0)
        vals["mu_beta"] = np.asarray(mu_beta)
        vals["log_sigma_beta"] = np.asarray(log_sd0)
        vals["log_sigma_gamma"] = np.asarray(log_sd0)
    elif f == "JonesFC":
        t = jones_thresholds(spec)
        A = np.column_stack([np.ones_like(t), t])
        for d in (0, 1):
            z = kn._phi_inv(_pooled_survival(data, groups=(d,)))
            coef, *_ = np.linalg.lstsq(A, z, rcond=None)
            slope = min(coef[1], -0.05)
            sigma = -1.0 / slope
            vals["mu_loc"][d] = coef[0] * sigma
            vals["mu_logscale"][d] = math.log(sigma)
        vals["log_sigma_loc"][:] = log_sd0
        vals["log_sigma_logscale"][:] = log_sd0
    elif f == "StratBiv":
        k = spec.stratbiv_threshold
        keep = stratum_indices(data, k)
        if keep.size == 0:
            raise ValueError(f"empty stratum: no study observes threshold {k}")
        sub = data.subset(keep)
        if sub.n_studies != spec.n_studies:
            raise ValueError("spec.n_studies must equal the stratum size")
        for d in (0, 1):
            surv = _pooled_survival(sub, groups=(d,))
            vals["mu_theta"][d] = kn._phi_inv(surv[k - 1])
        vals["log_sigma_theta"][:] = log_sd0

    u = layout.pack(vals)
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    return u + jitter * rng.standard_normal(u.size)
