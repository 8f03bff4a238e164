"""Derived quantities from posterior draws.

Per-threshold summary sensitivity/specificity with credible and
prediction intervals, the heterogeneity mapping between the
location-scale family and the bivariate family, sROC curve points, and
AUC.  Everything here is a pure transform of natural-scale parameter
draws (as produced by ``CompiledModel.constrain_draws``); no sampling
state is touched apart from an explicitly seeded generator for
new-study (predictive) draws.

Conventions: group 0 is non-diseased, group 1 diseased.  At threshold
k, Se_k = P(score > k | diseased) and Sp_k = P(score <= k |
non-diseased), so per draw Se is non-increasing and Sp non-decreasing
in k.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .kernel import DirichletHyper, probs_to_cutpoints
from .models import ModelSpec, jones_thresholds, scale_link_fn

__all__ = ["AccuracySummary", "HeterogeneityMap", "accuracy_draws",
           "predictive_draws", "summarize_accuracy", "summary_cutpoints",
           "heterogeneity_report", "hsroc_to_bivariate", "sroc_points",
           "auc_from_curve", "auc_summary", "write_accuracy_csv"]


# ---------------------------------------------------------------------
# per-draw Se/Sp


def _require(params: dict, *keys):
    missing = [k for k in keys if k not in params]
    if missing:
        raise ValueError(f"draws are missing required slices: {missing}")


def _summary_cutpoint_draws(spec: ModelSpec, params: dict) -> np.ndarray:
    """Per-draw summary cutpoints.

    Fixed-effects families return the shared cutpoints; random-cutpoint
    families take the median across studies within each draw.  Shapes:
    (n, 2, K-1) for the bivariate family, (n, K-1) for the
    location-scale family.
    """
    if spec.family in ("OBivFC", "OHsrocFC"):
        _require(params, "cutpoints")
        return params["cutpoints"]
    if spec.family in ("OBivRC", "OHsrocRC"):
        _require(params, "study_cutpoints")
        # study axis is 1 in both (n, S, ...) layouts
        return np.median(params["study_cutpoints"], axis=1)
    raise ValueError(f"no summary cutpoints for family {spec.family}")


def accuracy_draws(spec: ModelSpec, params: dict):
    """Summary Se/Sp per draw at every threshold.

    Returns (se, sp), each (n_draws, n_thresholds).
    """
    if spec.family in ("OBivFC", "OBivRC"):
        _require(params, "mu_beta")
        cut = _summary_cutpoint_draws(spec, params)
        mu = params["mu_beta"]
        sp = ndtr(cut[:, 0, :] - mu[:, 0:1])
        se = 1.0 - ndtr(cut[:, 1, :] - mu[:, 1:2])
        return se, sp
    if spec.family in ("OHsrocFC", "OHsrocRC"):
        _require(params, "mu_beta", "mu_gamma")
        cut = _summary_cutpoint_draws(spec, params)
        link = scale_link_fn(spec.scale_link)
        mu_b = params["mu_beta"][:, None]
        mu_g = params["mu_gamma"][:, None]
        sp = ndtr((cut + mu_b) / link(-mu_g))
        se = 1.0 - ndtr((cut - mu_b) / link(mu_g))
        return se, sp
    if spec.family == "JonesFC":
        _require(params, "mu_loc", "mu_logscale")
        thr = np.asarray(jones_thresholds(spec))[None, :]
        loc = params["mu_loc"]
        scale = np.exp(params["mu_logscale"])
        sp = ndtr((thr - loc[:, 0:1]) / scale[:, 0:1])
        se = 1.0 - ndtr((thr - loc[:, 1:2]) / scale[:, 1:2])
        return se, sp
    if spec.family == "StratBiv":
        _require(params, "mu_theta")
        mu = params["mu_theta"]
        se = ndtr(mu[:, 1:2])
        sp = 1.0 - ndtr(mu[:, 0:1])
        return se, sp
    raise ValueError(f"unknown family {spec.family}")


def _bvn_draws(rng, mu, sigma0, sigma1, rho):
    """One correlated pair per row of the hyperparameter draws."""
    n = mu.shape[0]
    z = rng.standard_normal((n, 2))
    x0 = mu[:, 0] + sigma0 * z[:, 0]
    x1 = mu[:, 1] + sigma1 * (rho * z[:, 0]
                              + np.sqrt(1.0 - rho ** 2) * z[:, 1])
    return np.stack([x0, x1], axis=1)


def _new_cutpoints_from_dirichlet(rng, phi, kappa):
    """One new-study cutpoint vector per draw: category probabilities
    from the fitted Dirichlet law pushed through the probit link."""
    n = phi.shape[0]
    out = np.empty((n, phi.shape[1] - 1))
    for i in range(n):
        hyper = DirichletHyper.from_phi_kappa(phi[i], float(kappa[i]))
        p = rng.dirichlet(hyper.alpha)
        out[i] = probs_to_cutpoints(p).cutpoints
    return out


def predictive_draws(spec: ModelSpec, params: dict, seed: int):
    """Se/Sp of one hypothetical new study per posterior draw, sampled
    from the fitted between-study law.

    Returns (se, sp) with the same shapes as :func:`accuracy_draws`.
    """
    rng = np.random.default_rng(seed)
    if spec.family in ("OBivFC", "OBivRC"):
        _require(params, "mu_beta", "sigma_beta", "rho")
        sig = params["sigma_beta"]
        beta_new = _bvn_draws(rng, params["mu_beta"], sig[:, 0], sig[:, 1],
                              params["rho"])
        if spec.family == "OBivFC":
            cut = params["cutpoints"]
        else:
            _require(params, "phi", "kappa")
            phi, kappa = params["phi"], params["kappa"]
            cut = np.stack(
                [_new_cutpoints_from_dirichlet(rng, phi[:, d, :],
                                               kappa[:, d])
                 for d in range(2)], axis=1)
        sp = ndtr(cut[:, 0, :] - beta_new[:, 0:1])
        se = 1.0 - ndtr(cut[:, 1, :] - beta_new[:, 1:2])
        return se, sp
    if spec.family in ("OHsrocFC", "OHsrocRC"):
        _require(params, "mu_beta", "sigma_beta", "mu_gamma", "sigma_gamma")
        n = params["mu_beta"].shape[0]
        beta_new = params["mu_beta"] + params["sigma_beta"] \
            * rng.standard_normal(n)
        gamma_new = params["mu_gamma"] + params["sigma_gamma"] \
            * rng.standard_normal(n)
        if spec.family == "OHsrocFC":
            cut = params["cutpoints"]
        else:
            _require(params, "phi", "kappa")
            cut = _new_cutpoints_from_dirichlet(rng, params["phi"],
                                                params["kappa"])
        link = scale_link_fn(spec.scale_link)
        b = beta_new[:, None]
        g = gamma_new[:, None]
        sp = ndtr((cut + b) / link(-g))
        se = 1.0 - ndtr((cut - b) / link(g))
        return se, sp
    if spec.family == "JonesFC":
        _require(params, "mu_loc", "sigma_loc", "rho", "mu_logscale",
                 "sigma_logscale")
        sig = params["sigma_loc"]
        loc_new = _bvn_draws(rng, params["mu_loc"], sig[:, 0], sig[:, 1],
                             params["rho"])
        n = loc_new.shape[0]
        logscale_new = params["mu_logscale"] + params["sigma_logscale"] \
            * rng.standard_normal((n, 2))
        scale_new = np.exp(logscale_new)
        thr = np.asarray(jones_thresholds(spec))[None, :]
        sp = ndtr((thr - loc_new[:, 0:1]) / scale_new[:, 0:1])
        se = 1.0 - ndtr((thr - loc_new[:, 1:2]) / scale_new[:, 1:2])
        return se, sp
    if spec.family == "StratBiv":
        _require(params, "mu_theta", "sigma_theta", "rho")
        sig = params["sigma_theta"]
        theta_new = _bvn_draws(rng, params["mu_theta"], sig[:, 0],
                               sig[:, 1], params["rho"])
        se = ndtr(theta_new[:, 1:2])
        sp = 1.0 - ndtr(theta_new[:, 0:1])
        return se, sp
    raise ValueError(f"unknown family {spec.family}")


# ---------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class AccuracySummary:
    """Per-threshold summary accuracy with 95% credible intervals and
    (when computed) 95% prediction intervals."""

    thresholds: tuple
    se_median: np.ndarray
    se_lo: np.ndarray
    se_hi: np.ndarray
    sp_median: np.ndarray
    sp_lo: np.ndarray
    sp_hi: np.ndarray
    se_pred_lo: np.ndarray = None
    se_pred_hi: np.ndarray = None
    sp_pred_lo: np.ndarray = None
    sp_pred_hi: np.ndarray = None

    @property
    def has_prediction(self) -> bool:
        return self.se_pred_lo is not None

    def rows(self):
        """Flat (threshold, quantity, estimate, lo, hi, pred_lo,
        pred_hi) rows for CSV export."""
        out = []
        for i, k in enumerate(self.thresholds):
            pred_se = ((self.se_pred_lo[i], self.se_pred_hi[i])
                       if self.has_prediction else ("", ""))
            pred_sp = ((self.sp_pred_lo[i], self.sp_pred_hi[i])
                       if self.has_prediction else ("", ""))
            out.append((k, "Se", self.se_median[i], self.se_lo[i],
                        self.se_hi[i], *pred_se))
            out.append((k, "Sp", self.sp_median[i], self.sp_lo[i],
                        self.sp_hi[i], *pred_sp))
        return out


def _central_interval(x: np.ndarray, level: float = 0.95):
    lo = np.quantile(x, (1.0 - level) / 2.0, axis=0)
    hi = np.quantile(x, 1.0 - (1.0 - level) / 2.0, axis=0)
    return lo, hi


def _threshold_labels(spec: ModelSpec):
    if spec.family == "StratBiv":
        return (spec.stratbiv_threshold,)
    return tuple(range(1, spec.K))


def summarize_accuracy(spec: ModelSpec, params: dict, seed: int = 0,
                       include_prediction: bool = True,
                       level: float = 0.95) -> AccuracySummary:
    se, sp = accuracy_draws(spec, params)
    se_lo, se_hi = _central_interval(se, level)
    sp_lo, sp_hi = _central_interval(sp, level)
    fields = dict(
        thresholds=_threshold_labels(spec),
        se_median=np.median(se, axis=0), se_lo=se_lo, se_hi=se_hi,
        sp_median=np.median(sp, axis=0), sp_lo=sp_lo, sp_hi=sp_hi)
    if include_prediction:
        se_p, sp_p = predictive_draws(spec, params, seed)
        fields["se_pred_lo"], fields["se_pred_hi"] = \
            _central_interval(se_p, level)
        fields["sp_pred_lo"], fields["sp_pred_hi"] = \
            _central_interval(sp_p, level)
    return AccuracySummary(**fields)


def summary_cutpoints(spec: ModelSpec, params: dict) -> dict:
    """Median and 95% interval of the summary cutpoints, per group for
    the bivariate family, shared for the location-scale family."""
    cut = _summary_cutpoint_draws(spec, params)
    lo, hi = _central_interval(cut)
    return {"median": np.median(cut, axis=0), "lo": lo, "hi": hi}


def write_accuracy_csv(summary: AccuracySummary, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "quantity", "estimate", "lo", "hi",
                         "pred_lo", "pred_hi"])
        for row in summary.rows():
            writer.writerow([row[0], row[1]]
                            + [repr(float(v)) if v != "" else ""
                               for v in row[2:]])


# ---------------------------------------------------------------------
# heterogeneity mapping


@dataclass(frozen=True)
class HeterogeneityMap:
    """Bivariate-equivalent between-study heterogeneity of a
    location-scale fit (exp link), via the first-order delta method.

    ``rho`` is clamped to [-1, 1]; ``rho_clamped`` flags when the raw
    value left the interval.  ``rho`` is NaN (undefined) when both
    input SDs are zero.  ``cut_scale`` holds the multipliers taking the
    shared cutpoints to each group's bivariate-equivalent cutpoints.
    """

    sigma_dpos: float
    sigma_dneg: float
    rho: float
    rho_clamped: bool
    mu_dpos: float
    mu_dneg: float
    cut_scale: tuple


def hsroc_to_bivariate(mu_beta: float, sigma_beta: float, mu_gamma: float,
                       sigma_gamma: float) -> HeterogeneityMap:
    if sigma_beta < 0 or sigma_gamma < 0:
        raise ValueError("between-study SDs must be non-negative")
    common = sigma_beta ** 2 + mu_beta ** 2 * sigma_gamma ** 2
    var_dpos = math.exp(-2.0 * mu_gamma) * common
    var_dneg = math.exp(2.0 * mu_gamma) * common
    num = sigma_gamma ** 2 * mu_beta ** 2 - sigma_beta ** 2
    denom = math.sqrt(var_dpos) * math.sqrt(var_dneg)
    if denom == 0.0:
        rho, clamped = float("nan"), False
    else:
        raw = num / denom
        rho = min(1.0, max(-1.0, raw))
        # flag genuine approximation escapes, not rounding at the bounds
        clamped = abs(raw) > 1.0 + 1e-12
    return HeterogeneityMap(
        sigma_dpos=math.sqrt(var_dpos), sigma_dneg=math.sqrt(var_dneg),
        rho=rho, rho_clamped=clamped,
        mu_dpos=mu_beta * math.exp(-mu_gamma),
        mu_dneg=-mu_beta * math.exp(mu_gamma),
        cut_scale=(math.exp(mu_gamma), math.exp(-mu_gamma)))


def heterogeneity_report(spec: ModelSpec, params: dict) -> dict:
    """Posterior summaries (median, 95% interval) of the between-study
    heterogeneity parameters; location-scale fits also report their
    bivariate-equivalent images mapped draw by draw."""

    def summarize(x):
        lo, hi = _central_interval(x)
        return {"median": float(np.median(x)), "lo": float(lo),
                "hi": float(hi)}

    out = {}
    if spec.family in ("OBivFC", "OBivRC"):
        _require(params, "sigma_beta", "rho")
        out["sigma_beta_dneg"] = summarize(params["sigma_beta"][:, 0])
        out["sigma_beta_dpos"] = summarize(params["sigma_beta"][:, 1])
        out["rho_beta"] = summarize(params["rho"])
    elif spec.family in ("OHsrocFC", "OHsrocRC"):
        _require(params, "mu_beta", "sigma_beta", "mu_gamma", "sigma_gamma")
        for name in ("mu_beta", "sigma_beta", "mu_gamma", "sigma_gamma"):
            out[name] = summarize(params[name])
        if spec.scale_link == "exp":
            n = params["mu_beta"].shape[0]
            mapped = np.empty((n, 3))
            clamp_count = 0
            for i in range(n):
                m = hsroc_to_bivariate(float(params["mu_beta"][i]),
                                       float(params["sigma_beta"][i]),
                                       float(params["mu_gamma"][i]),
                                       float(params["sigma_gamma"][i]))
                mapped[i] = (m.sigma_dneg, m.sigma_dpos, m.rho)
                clamp_count += m.rho_clamped
            out["sigma_beta_dneg"] = summarize(mapped[:, 0])
            out["sigma_beta_dpos"] = summarize(mapped[:, 1])
            out["rho_beta"] = summarize(mapped[:, 2])
            out["rho_clamped_fraction"] = clamp_count / n
    elif spec.family == "JonesFC":
        _require(params, "sigma_loc", "rho", "sigma_logscale")
        out["sigma_loc_dneg"] = summarize(params["sigma_loc"][:, 0])
        out["sigma_loc_dpos"] = summarize(params["sigma_loc"][:, 1])
        out["sigma_logscale_dneg"] = summarize(params["sigma_logscale"][:, 0])
        out["sigma_logscale_dpos"] = summarize(params["sigma_logscale"][:, 1])
        out["rho_loc"] = summarize(params["rho"])
    elif spec.family == "StratBiv":
        _require(params, "sigma_theta", "rho")
        out["sigma_theta_dneg"] = summarize(params["sigma_theta"][:, 0])
        out["sigma_theta_dpos"] = summarize(params["sigma_theta"][:, 1])
        out["rho_theta"] = summarize(params["rho"])
    else:
        raise ValueError(f"unknown family {spec.family}")
    return out


# ---------------------------------------------------------------------
# sROC and AUC


def sroc_points(se, sp) -> np.ndarray:
    """Curve points (1-Sp, Se) sorted by x with (0,0) and (1,1)
    appended; duplicate x values collapse to the largest Se."""
    se = np.asarray(se, dtype=float)
    sp = np.asarray(sp, dtype=float)
    if se.shape != sp.shape or se.ndim != 1:
        raise ValueError("se and sp must be equal-length vectors")
    x = 1.0 - sp
    order = np.argsort(x, kind="stable")
    pts = [(0.0, 0.0)]
    for i in order:
        xi, yi = float(x[i]), float(se[i])
        if pts and pts[-1][0] == xi:
            pts[-1] = (xi, max(pts[-1][1], yi))
        else:
            pts.append((xi, yi))
    if pts[-1][0] == 1.0:
        pts[-1] = (1.0, max(pts[-1][1], 1.0))
    else:
        pts.append((1.0, 1.0))
    return np.asarray(pts)


def auc_from_curve(se, sp) -> float:
    """Trapezoidal area under the sROC polyline of one draw."""
    pts = sroc_points(se, sp)
    return float(np.trapezoid(pts[:, 1], pts[:, 0]))


def auc_summary(spec: ModelSpec, params: dict, seed: int = 0,
                include_prediction: bool = True, level: float = 0.95
                ) -> dict:
    """Posterior AUC: median and central credible interval of the
    per-draw trapezoid, plus a prediction interval over new-study
    draws."""
    se, sp = accuracy_draws(spec, params)
    areas = np.array([auc_from_curve(se[i], sp[i])
                      for i in range(se.shape[0])])
    lo, hi = _central_interval(areas, level)
    out = {"median": float(np.median(areas)), "lo": float(lo),
           "hi": float(hi)}
    if include_prediction:
        se_p, sp_p = predictive_draws(spec, params, seed)
        pred = np.array([auc_from_curve(se_p[i], sp_p[i])
                         for i in range(se_p.shape[0])])
        p_lo, p_hi = _central_interval(pred, level)
        out["pred_lo"], out["pred_hi"] = float(p_lo), float(p_hi)
    return out
