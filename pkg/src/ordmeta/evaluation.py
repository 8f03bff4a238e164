"""Study-level K-fold cross-validation and model ranking by ELPD.

Held-out studies are scored by their posterior predictive density with the
study-level effects integrated out by Monte Carlo: for every retained
posterior draw the hierarchical law is sampled ``m_effects`` times afresh
and the study likelihood averaged.  Folds whose fits show a minimum bulk
ESS below a threshold are flagged and dropped from totals and comparisons.

Also here: the 4-group performance classification (statistical x
practical significance against the leading model) used to compress
simulation result tables.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from numpy.random import default_rng
from scipy.special import expit, logsumexp, ndtr, ndtri

from . import kernel as kn
from .data import MADataset
from .mcmc import SamplerConfig, sample
from .models import (ModelSpec, build_model, jones_thresholds, layout_for,
                     scale_link_fn)

__all__ = [
    "FoldAssignment", "ElpdResult", "make_folds", "run_kfold",
    "predictive_pointwise", "compare_elpd", "classify_groups",
    "save_kfold_result", "load_kfold_result", "comparison_to_csv",
    "format_comparison_table",
]

DEFAULT_MIN_ESS = 100.0


# ---------------------------------------------------------------------------
# Fold assignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    """Deterministic balanced partition of studies into folds (1-based)."""

    fold_of_study: np.ndarray
    n_folds: int
    seed: int

    @property
    def n_studies(self) -> int:
        return int(self.fold_of_study.size)

    def heldout_in(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_study == fold)

    def training_for(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of_study != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of_study, minlength=self.n_folds + 1)[1:]


def make_folds(n_studies: int, k_folds: int, seed: int) -> FoldAssignment:
    """Assign studies to ``k_folds`` folds with sizes differing by <= 1."""
    if k_folds < 2:
        raise ValueError("need at least 2 folds")
    if k_folds > n_studies:
        raise ValueError(f"cannot split {n_studies} studies into "
                         f"{k_folds} folds")
    perm = default_rng(seed).permutation(n_studies)
    fold = np.empty(n_studies, dtype=np.int64)
    fold[perm] = np.arange(n_studies) % k_folds + 1
    return FoldAssignment(fold_of_study=fold, n_folds=k_folds, seed=seed)


# ---------------------------------------------------------------------------
# Held-out predictive density
# ---------------------------------------------------------------------------

def _hyper_draws(spec: ModelSpec, flat_draws: np.ndarray) -> dict:
    """Population-level natural parameters for every draw.

    Only the blocks the fresh-effect predictive needs are transformed;
    per-study effects and per-study cutpoints of the training fit are
    irrelevant for a new study.
    """
    U = np.atleast_2d(np.asarray(flat_draws, dtype=float))
    p = layout_for(spec).unpack(U)
    n = U.shape[0]
    f = spec.family
    out = {}

    def _cuts(raw_rows):
        return np.stack([kn.cutpoints_from_unconstrained(row)[0]
                         for row in raw_rows])

    def _simplexes(raw_rows):
        return np.stack([kn.simplex_from_unconstrained(row)[0]
                         for row in raw_rows])

    if f in ("OBivFC", "OBivRC"):
        out["mu"] = p["mu_beta"]
        out["sigma"] = np.exp(p["log_sigma_beta"])
        out["rho"] = 2.0 * expit(p["rho_raw"]) - 1.0
        if f == "OBivFC":
            out["cutpoints"] = np.stack(
                [_cuts(p["cut_raw"][:, d]) for d in (0, 1)], axis=1)
        else:
            out["phi"] = np.stack(
                [_simplexes(p["phi_raw"][:, d]) for d in (0, 1)], axis=1)
            out["kappa"] = np.exp(p["log_kappa"])
    elif f in ("OHsrocFC", "OHsrocRC"):
        out["mu_beta"] = p["mu_beta"]
        out["sigma_beta"] = np.exp(p["log_sigma_beta"])
        out["mu_gamma"] = p["mu_gamma"]
        out["sigma_gamma"] = np.exp(p["log_sigma_gamma"])
        if f == "OHsrocFC":
            out["cutpoints"] = _cuts(p["cut_raw"])
        else:
            out["phi"] = _simplexes(p["phi_raw"])
            out["kappa"] = np.exp(p["log_kappa"])
    elif f == "JonesFC":
        out["mu"] = p["mu_loc"]
        out["sigma"] = np.exp(p["log_sigma_loc"])
        out["rho"] = 2.0 * expit(p["rho_raw"]) - 1.0
        out["mu_logscale"] = p["mu_logscale"]
        out["sigma_logscale"] = np.exp(p["log_sigma_logscale"])
        out["thresholds"] = jones_thresholds(spec)
    elif f == "StratBiv":
        out["mu"] = p["mu_theta"]
        out["sigma"] = np.exp(p["log_sigma_theta"])
        out["rho"] = 2.0 * expit(p["rho_raw"]) - 1.0
    else:
        raise AssertionError(f)
    out["_n"] = n
    return out


def _bvn_pair(mu, sigma, rho, rng, m):
    """Fresh correlated pair per (draw, effect draw): two (n, m) arrays."""
    n = mu.shape[0]
    z = rng.standard_normal((n, m, 2))
    e1 = z[..., 0]
    e2 = rho[:, None] * z[..., 0] \
        + np.sqrt(np.clip(1.0 - rho * rho, 0.0, None))[:, None] * z[..., 1]
    x0 = mu[:, 0, None] + sigma[:, 0, None] * e1
    x1 = mu[:, 1, None] + sigma[:, 1, None] * e2
    return x0, x1


def _dirichlet_cutpoints(phi, kappa, rng, m):
    """Fresh cutpoints from the induced-Dirichlet study law, (n, m, K-1)."""
    alpha = 0.01 + phi * kappa[..., None]  # (n, K)
    n, K = alpha.shape
    g = rng.gamma(np.broadcast_to(alpha[:, None, :], (n, m, K)))
    simplex = g / np.clip(g.sum(axis=-1, keepdims=True), 1e-300, None)
    cum = np.cumsum(simplex, axis=-1)[..., :-1]
    return ndtri(np.clip(cum, kn.CLAMP_EPS, 1.0 - kn.CLAMP_EPS))


def _group_loglik(grp, loc, scale, cuts):
    """Vectorized factorized likelihood of one study group.

    ``loc``/``scale`` are (n, m); ``cuts`` broadcasts against (n, m, K-1).
    Mirrors the scalar kernel: consecutive observed cumulative counts are
    binomial with the ratio of clamped conditional survival probabilities,
    so missing thresholds are marginalized exactly.
    """
    if grp.n_total == 0:
        return 0.0
    surv = ndtr((loc[..., None] - cuts) / scale[..., None])
    prev = np.concatenate(
        [np.ones(surv.shape[:-1] + (1,)), surv[..., :-1]], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(prev > 0, surv / prev, 0.0)
    cond = np.clip(cond, kn.CLAMP_EPS, 1.0 - kn.CLAMP_EPS)
    total = 0.0
    for prev_c, c, prev_k, k in kn._observed_pairs(grp.n_total,
                                                   grp.cum_counts):
        ratio = np.clip(np.prod(cond[..., prev_k:k], axis=-1),
                        kn.CLAMP_EPS, 1.0 - kn.CLAMP_EPS)
        total = total + c * np.log(ratio) + (prev_c - c) * np.log1p(-ratio)
    return total


def _study_lpd(spec: ModelSpec, hyper: dict, pair, m: int, rng) -> float:
    """log mean_{draws, effects} p(study | fresh study-level effects)."""
    n = hyper["_n"]
    f = spec.family

    if f == "StratBiv":
        k = spec.stratbiv_threshold
        ll = np.zeros((n, m))
        th0, th1 = _bvn_pair(hyper["mu"], hyper["sigma"], hyper["rho"],
                             rng, m)
        seen_any = False
        for d, theta in ((0, th0), (1, th1)):
            grp = pair[d]
            c = grp.cum_counts[k - 1]
            if c == kn.MISSING or grp.n_total == 0:
                continue
            seen_any = True
            psurv = np.clip(ndtr(theta), kn.CLAMP_EPS, 1.0 - kn.CLAMP_EPS)
            ll += c * np.log(psurv) + (grp.n_total - c) * np.log1p(-psurv)
        if not seen_any:
            return 0.0
        return float(logsumexp(ll) - math.log(n * m))

    if f in ("OBivFC", "OBivRC"):
        loc0, loc1 = _bvn_pair(hyper["mu"], hyper["sigma"], hyper["rho"],
                               rng, m)
        if f == "OBivFC":
            cuts = [hyper["cutpoints"][:, d][:, None, :] for d in (0, 1)]
        else:
            cuts = [_dirichlet_cutpoints(hyper["phi"][:, d],
                                         hyper["kappa"][:, d], rng, m)
                    for d in (0, 1)]
        one = np.ones((n, m))
        ll = _group_loglik(pair[0], loc0, one, cuts[0]) \
            + _group_loglik(pair[1], loc1, one, cuts[1])
    elif f in ("OHsrocFC", "OHsrocRC"):
        link = scale_link_fn(spec.scale_link)
        b = hyper["mu_beta"][:, None] \
            + hyper["sigma_beta"][:, None] * rng.standard_normal((n, m))
        g = hyper["mu_gamma"][:, None] \
            + hyper["sigma_gamma"][:, None] * rng.standard_normal((n, m))
        if f == "OHsrocFC":
            cuts = hyper["cutpoints"][:, None, :]
        else:
            cuts = _dirichlet_cutpoints(hyper["phi"], hyper["kappa"], rng, m)
        ll = _group_loglik(pair[0], -b, link(-g), cuts) \
            + _group_loglik(pair[1], b, link(g), cuts)
    elif f == "JonesFC":
        loc0, loc1 = _bvn_pair(hyper["mu"], hyper["sigma"], hyper["rho"],
                               rng, m)
        ls = hyper["mu_logscale"][:, None, :] \
            + hyper["sigma_logscale"][:, None, :] \
            * rng.standard_normal((n, m, 2))
        thr = hyper["thresholds"][None, None, :]
        ll = _group_loglik(pair[0], loc0, np.exp(ls[..., 0]), thr) \
            + _group_loglik(pair[1], loc1, np.exp(ls[..., 1]), thr)
    else:
        raise AssertionError(f)
    return float(logsumexp(ll) - math.log(n * m))


def predictive_pointwise(spec: ModelSpec, flat_draws: np.ndarray, studies,
                         m_effects: int = 50, seed: int = 0,
                         study_keys: Optional[Sequence[int]] = None
                         ) -> np.ndarray:
    """Fresh-study log predictive density of each study in ``studies``.

    ``spec`` must be the spec of the fitted model the draws came from
    (its layout decodes ``flat_draws``).  Each study gets its own RNG
    substream keyed by ``study_keys`` (default: its position), so values
    do not depend on which other studies are scored alongside it.
    """
    if study_keys is None:
        study_keys = range(len(studies))
    hyper = _hyper_draws(spec, flat_draws)
    out = np.empty(len(studies))
    for i, (key, pair) in enumerate(zip(study_keys, studies)):
        rng = default_rng([seed, int(key)])
        out[i] = _study_lpd(spec, hyper, pair, m_effects, rng)
    return out


# ---------------------------------------------------------------------------
# K-fold driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ElpdResult:
    """Pointwise held-out log predictive densities plus fold health.

    ``pointwise[s]`` is computed for every study; totals and comparisons
    only see studies whose fold passed the ESS gate.
    """

    pointwise: np.ndarray
    fold_of_study: np.ndarray
    ess_min: dict
    min_ess_threshold: float

    @property
    def n_studies(self) -> int:
        return int(self.pointwise.size)

    def discarded_folds(self, threshold: Optional[float] = None) -> tuple:
        thr = self.min_ess_threshold if threshold is None else threshold
        return tuple(f for f in sorted(self.ess_min)
                     if not self.ess_min[f] >= thr)

    def retained_mask(self, threshold: Optional[float] = None) -> np.ndarray:
        bad = self.discarded_folds(threshold)
        return ~np.isin(self.fold_of_study, bad)

    @property
    def elpd_total(self) -> float:
        return float(self.pointwise[self.retained_mask()].sum())

    @property
    def se_total(self) -> float:
        pw = self.pointwise[self.retained_mask()]
        if pw.size < 2:
            return 0.0
        return float(math.sqrt(pw.size * np.var(pw, ddof=1)))


def _check_training_sets(data: MADataset, folds: FoldAssignment):
    if folds.n_studies != data.n_studies:
        raise ValueError(f"fold assignment covers {folds.n_studies} studies "
                         f"but the dataset has {data.n_studies}")
    for f in range(1, folds.n_folds + 1):
        if folds.training_for(f).size == 0:
            raise ValueError(f"fold {f} leaves an empty training set")


def run_kfold(spec: ModelSpec, data: MADataset, folds: FoldAssignment,
              cfg: SamplerConfig, m_effects: int = 50,
              min_ess_threshold: float = DEFAULT_MIN_ESS,
              n_workers: int = 1) -> ElpdResult:
    """Fit each fold's training studies and score its held-out studies.

    Every fold re-fits the model from scratch with a fold-specific RNG
    stream derived from ``cfg.seed``, so results are deterministic given
    (data, folds, cfg).  ``n_workers`` > 1 runs folds in a thread pool.
    """
    _check_training_sets(data, folds)

    def _one_fold(f: int):
        train = folds.training_for(f)
        model = build_model(spec, data.subset(train))
        inits = np.stack([
            model.initialize(seed=cfg.seed * 100000 + f * 100 + c)
            for c in range(cfg.n_chains)])
        draws = sample(model, replace(cfg, seed=cfg.seed + f), inits)
        ess = float(np.nanmin(draws.diagnostics()["ess_bulk"]))
        held = folds.heldout_in(f)
        lpd = predictive_pointwise(
            model.spec, draws.flat(),
            [data.studies[s] for s in held],
            m_effects=m_effects, seed=folds.seed, study_keys=held)
        return f, held, lpd, ess

    fold_ids = range(1, folds.n_folds + 1)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_one_fold, fold_ids))
    else:
        results = [_one_fold(f) for f in fold_ids]

    pointwise = np.empty(data.n_studies)
    ess_min = {}
    for f, held, lpd, ess in results:
        pointwise[held] = lpd
        ess_min[f] = ess
    return ElpdResult(pointwise=pointwise,
                      fold_of_study=folds.fold_of_study.copy(),
                      ess_min=ess_min,
                      min_ess_threshold=min_ess_threshold)


# ---------------------------------------------------------------------------
# Comparison and ranking
# ---------------------------------------------------------------------------

def compare_elpd(results: Sequence[ElpdResult], names=None,
                 min_ess_threshold: float = DEFAULT_MIN_ESS) -> list:
    """Rank models by ELPD over the studies every model retains.

    All results must share one fold assignment.  A fold below the ESS
    threshold in *any* model is dropped for *all* of them; when that
    shrinks some model's retained set the ranking is marked
    ``restricted``.  Differences are against the top-ranked model:
    SE(delta) = sqrt(n x var of pointwise differences).
    """
    results = list(results)
    if len(results) < 2:
        raise ValueError("need at least two results to compare")
    if names is None:
        names = [f"model{i + 1}" for i in range(len(results))]
    names = list(names)
    if len(names) != len(results):
        raise ValueError("one name per result required")
    base = results[0].fold_of_study
    for r in results[1:]:
        if not np.array_equal(r.fold_of_study, base):
            raise ValueError("results use different fold assignments; "
                             "re-run with one shared FoldAssignment")

    masks = [r.retained_mask(min_ess_threshold) for r in results]
    shared = np.logical_and.reduce(masks)
    if not shared.any():
        raise ValueError("no studies retained by every model at "
                         f"min ESS {min_ess_threshold}")
    restricted = any(m.sum() != shared.sum() for m in masks)

    n_sh = int(shared.sum())
    pw = [r.pointwise[shared] for r in results]
    totals = [float(x.sum()) for x in pw]
    order = sorted(range(len(results)), key=lambda i: -totals[i])
    lead = order[0]

    ranking = []
    for rank, i in enumerate(order, start=1):
        diff = pw[i] - pw[lead]
        se = math.sqrt(n_sh * np.var(pw[i], ddof=1)) if n_sh > 1 else 0.0
        se_d = math.sqrt(n_sh * np.var(diff, ddof=1)) if n_sh > 1 else 0.0
        ranking.append({
            "rank": rank,
            "model": names[i],
            "elpd": totals[i],
            "se": se,
            "delta_elpd": totals[i] - totals[lead],
            "se_delta": se_d,
            "n_studies": n_sh,
            "restricted": restricted,
            "discarded_folds": list(
                results[i].discarded_folds(min_ess_threshold)),
        })
    return ranking


def comparison_to_csv(ranking: Sequence[dict], path):
    fields = ["rank", "model", "elpd", "se", "delta_elpd", "se_delta",
              "n_studies", "restricted", "discarded_folds"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in ranking:
            out = dict(row)
            out["discarded_folds"] = " ".join(
                str(f) for f in row["discarded_folds"])
            w.writerow(out)


def format_comparison_table(ranking: Sequence[dict]) -> str:
    """Plain-text ranking table (leader marked, differences vs leader)."""
    rows = [("Rank", "Model", "ELPD (SE)", "dELPD (SE)")]
    for rec in ranking:
        if rec["rank"] == 1:
            delta = "---  [Best]"
        else:
            delta = f"{rec['delta_elpd']:.1f} ({rec['se_delta']:.1f})"
        rows.append((str(rec["rank"]), rec["model"],
                     f"{rec['elpd']:.1f} ({rec['se']:.1f})", delta))
    widths = [max(len(r[j]) for r in rows) for j in range(4)]
    lines = ["  ".join(r[j].ljust(widths[j]) for j in range(4)).rstrip()
             for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    if ranking and ranking[0]["restricted"]:
        lines.append(f"note: comparison restricted to the "
                     f"{ranking[0]['n_studies']} studies retained by every "
                     f"model")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Result files
# ---------------------------------------------------------------------------

def save_kfold_result(path, result: ElpdResult, model_name: str):
    """Write one model's K-fold run as JSON (per-fold pointwise + ESS)."""
    folds = sorted(result.ess_min)
    records = []
    for f in folds:
        idx = np.flatnonzero(result.fold_of_study == f)
        records.append({
            "model": model_name,
            "fold": int(f),
            "studies": [int(s) for s in idx],
            "pointwise": [float(x) for x in result.pointwise[idx]],
            "ess_min": float(result.ess_min[f]),
        })
    doc = {"schema_version": 1, "model": model_name,
           "n_studies": result.n_studies,
           "min_ess_threshold": result.min_ess_threshold,
           "folds": records}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_kfold_result(path):
    """Read a file written by :func:`save_kfold_result` -> (name, result)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or doc.get("schema_version") != 1:
        raise ValueError(f"{path}: expected a K-fold result file with "
                         f"schema_version 1")
    unknown = set(doc) - {"schema_version", "model", "n_studies",
                          "min_ess_threshold", "folds"}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    n = int(doc["n_studies"])
    pointwise = np.full(n, np.nan)
    fold_of_study = np.zeros(n, dtype=np.int64)
    ess_min = {}
    for rec in doc["folds"]:
        f = int(rec["fold"])
        idx = np.asarray(rec["studies"], dtype=np.int64)
        pointwise[idx] = np.asarray(rec["pointwise"], dtype=float)
        fold_of_study[idx] = f
        ess_min[f] = float(rec["ess_min"])
    if np.any(fold_of_study == 0):
        raise ValueError(f"{path}: folds do not cover every study")
    result = ElpdResult(pointwise=pointwise, fold_of_study=fold_of_study,
                        ess_min=ess_min,
                        min_ess_threshold=float(doc["min_ess_threshold"]))
    return doc["model"], result


# ---------------------------------------------------------------------------
# Performance grouping
# ---------------------------------------------------------------------------

GROUP_LABELS = ("Best", "StatOnly", "PracticalOnly", "Worse")


def classify_groups(metrics: dict, leader_rule: str = "min_rmse",
                    z: float = 2.0, practical_threshold: float = 0.10
                    ) -> dict:
    """4-group classification of models against the leader.

    ``metrics`` maps model name -> {"rmse": float, "mcse": float}.  The
    leader (smallest RMSE) is always Best.  Everyone else is judged on a
    2x2: statistically worse when |RMSE difference| exceeds ``z`` combined
    MCSEs, practically worse when the relative difference exceeds
    ``practical_threshold``.  The grouping is invariant to rescaling all
    RMSE and MCSE by a common positive factor.
    """
    if leader_rule != "min_rmse":
        raise ValueError(f"unknown leader rule '{leader_rule}'")
    if len(metrics) < 2:
        raise ValueError("need at least two models to classify")
    if z <= 0 or practical_threshold <= 0:
        raise ValueError("z and practical_threshold must be positive")
    names = list(metrics)
    rmse = {m: float(metrics[m]["rmse"]) for m in names}
    mcse = {m: float(metrics[m]["mcse"]) for m in names}
    leader = min(names, key=lambda m: rmse[m])

    groups = {leader: "Best"}
    for m in names:
        if m == leader:
            continue
        diff = abs(rmse[m] - rmse[leader])
        stat = diff > z * math.hypot(mcse[m], mcse[leader])
        if rmse[leader] > 0:
            practical = diff / rmse[leader] > practical_threshold
        else:
            practical = diff > 0
        if stat and practical:
            groups[m] = "Worse"
        elif stat:
            groups[m] = "StatOnly"
        elif practical:
            groups[m] = "PracticalOnly"
        else:
            groups[m] = "Best"
    return groups
