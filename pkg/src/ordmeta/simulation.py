"""Simulation laboratory for ordinal accuracy meta-analysis.

Scenario profiles mirror three anxiety screening instruments (7, 22 and
64 categories) with increasingly sparse threshold reporting.  Every
profile ships one data-generating block per family; the random-cutpoint
blocks carry Dirichlet concentrations calibrated so the mean
between-study SD of the cumulative category probabilities hits a stated
target on the probability scale.

The adaptive loop refits the requested families replication by
replication and stops once the mean Monte Carlo SE of the RMSE
estimates drops below a target, so cheap scenarios finish early and
noisy ones keep sampling up to the cap.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.random import default_rng
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri
from scipy.stats import beta as beta_dist

from .analysis import summarize_accuracy
from .data import DataError, MADataset, StudyCounts
from .kernel import MISSING, DirichletHyper, probs_to_cutpoints
from .mcmc import SamplerConfig, sample
from .models import ModelSpec, build_model, scale_link_fn
from .models.common import FAMILIES, transformed_thresholds

__all__ = [
    "DGM_FAMILIES", "FC_DGMS", "MetricAccumulator", "ModelSimResult",
    "SimLoopConfig", "SimProfile", "SimRunResult", "SimScenario",
    "TruthValues", "adaptive_loop", "apply_missingness", "calibrate_kappa",
    "cutpoint_sd_probability_scale", "format_results_table",
    "generate_dataset", "load_profile", "results_to_csv", "truth_values",
    "update_metrics",
]

#: Families that can act as data-generating mechanisms.
DGM_FAMILIES = ("JonesFC", "OBivFC", "OBivRC", "OHsrocRC")

#: Generators whose cutpoints are fixed across studies.  Random-cutpoint
#: models are excluded on these by default: with no cutpoint variation in
#: the data the concentration parameter runs away and the fits are
#: unstable without telling us anything about accuracy.
FC_DGMS = ("JonesFC", "OBivFC")

_PROFILE_KEYS = {"schema_version", "profile", "K", "miss_rate", "n_range",
                 "phi", "dgm"}


# ---------------------------------------------------------------------
# cutpoint-heterogeneity calibration


def cutpoint_sd_probability_scale(phi, kappa: float) -> float:
    """Mean over thresholds of the between-study SD of ``P(Y <= k)``.

    Study category probabilities are Dirichlet(0.01 + phi * kappa), so
    each cumulative probability is a Beta variable with a closed-form
    SD; this returns the mean of those SDs over the K-1 thresholds.
    """
    alpha = np.asarray(DirichletHyper.from_phi_kappa(phi, kappa).alpha)
    total = alpha.sum()
    a = np.cumsum(alpha)[:-1]
    b = total - a
    sd = np.sqrt(a * b / (total ** 2 * (total + 1.0)))
    return float(sd.mean())


def calibrate_kappa(phi, target_sd: float,
                    lo: float = 1e-3, hi: float = 1e9) -> float:
    """Concentration whose mean cumulative-probability SD equals the
    target.  The SD is monotone decreasing in kappa, so this is a
    bracketed root find."""
    if not target_sd > 0:
        raise ValueError("target_sd must be positive")
    f = lambda k: cutpoint_sd_probability_scale(phi, k) - target_sd
    if f(lo) < 0 or f(hi) > 0:
        raise ValueError(f"target SD {target_sd} is outside the "
                         f"achievable range for this simplex")
    return float(brentq(f, lo, hi, xtol=1e-12, rtol=1e-14))


# ---------------------------------------------------------------------
# profiles and scenarios


@dataclass(frozen=True)
class SimProfile:
    """One instrument profile: scale length, reporting sparsity, study
    size range and the per-family truth blocks."""

    name: str
    K: int
    miss_rate: float
    n_range: tuple
    phi: tuple
    dgm: dict

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("profile needs K >= 2")
        if not 0.0 <= self.miss_rate < 1.0:
            raise ValueError("miss_rate must be in [0, 1)")
        lo, hi = self.n_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad n_range {self.n_range}")
        phi = np.asarray(self.phi, dtype=float)
        if phi.shape != (self.K,) or np.any(phi <= 0) \
                or abs(phi.sum() - 1.0) > 1e-8:
            raise ValueError("phi must be a strictly positive simplex "
                             "of length K")
        for fam in self.dgm:
            if fam not in DGM_FAMILIES:
                raise ValueError(f"unknown generator family {fam}")


def load_profile(path) -> SimProfile:
    """Read a profile config (JSON).  Unknown keys are an error so a
    typo cannot silently drop a setting."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != 1:
        raise DataError(f"{path}: schema_version must be 1")
    unknown = set(doc) - _PROFILE_KEYS
    if unknown:
        raise DataError(f"{path}: unknown keys {sorted(unknown)}")
    missing = _PROFILE_KEYS - set(doc)
    if missing:
        raise DataError(f"{path}: missing keys {sorted(missing)}")
    K = int(doc["K"])
    phi = doc["phi"]
    if phi == "uniform":
        phi = tuple([1.0 / K] * K)
    else:
        phi = tuple(float(p) for p in phi)
    dgm = {}
    for fam, block in doc["dgm"].items():
        dgm[fam] = {k: tuple(v) if isinstance(v, list) else float(v)
                    for k, v in block.items()}
    return SimProfile(name=str(doc["profile"]), K=K,
                      miss_rate=float(doc["miss_rate"]),
                      n_range=tuple(int(n) for n in doc["n_range"]),
                      phi=phi, dgm=dgm)


@dataclass(frozen=True)
class SimScenario:
    """A profile crossed with one generator family and a study count."""

    profile: SimProfile
    dgm_family: str
    n_studies: int
    seed: int = 0

    def __post_init__(self):
        if self.dgm_family not in DGM_FAMILIES:
            raise ValueError(f"unknown generator family {self.dgm_family}")
        if self.dgm_family not in self.profile.dgm:
            raise ValueError(f"profile {self.profile.name} has no "
                             f"{self.dgm_family} block")
        if self.n_studies < 2:
            raise ValueError("need at least 2 studies")

    @property
    def params(self) -> dict:
        return self.profile.dgm[self.dgm_family]


# ---------------------------------------------------------------------
# truth


@dataclass(frozen=True)
class TruthValues:
    """Population summary Se/Sp at every threshold, (K-1,) each."""

    se: np.ndarray
    sp: np.ndarray


def _fixed_cutpoints(phi) -> np.ndarray:
    return probs_to_cutpoints(np.asarray(phi, dtype=float)).cutpoints


def _median_cutpoints(phi, kappa: float) -> np.ndarray:
    """Summary cutpoints of a random-cutpoint generator: each cumulative
    probability is Beta, and the probit of its median is the median
    cutpoint (the probit is monotone, so medians push through)."""
    alpha = np.asarray(DirichletHyper.from_phi_kappa(phi, kappa).alpha)
    total = alpha.sum()
    a = np.cumsum(alpha)[:-1]
    med = beta_dist.median(a, total - a)
    return ndtri(med)


def truth_values(scenario: SimScenario) -> TruthValues:
    """Summary accuracy implied by the generator's hyperparameters."""
    prof, par = scenario.profile, scenario.params
    fam = scenario.dgm_family
    if fam == "OBivFC":
        c = _fixed_cutpoints(prof.phi)
        sp = ndtr(c - par["mu"][0])
        se = 1.0 - ndtr(c - par["mu"][1])
    elif fam == "OBivRC":
        c0 = _median_cutpoints(prof.phi, par["kappa"][0])
        c1 = _median_cutpoints(prof.phi, par["kappa"][1])
        sp = ndtr(c0 - par["mu"][0])
        se = 1.0 - ndtr(c1 - par["mu"][1])
    elif fam == "OHsrocRC":
        c = _median_cutpoints(prof.phi, par["kappa"])
        link = scale_link_fn("exp")
        sp = ndtr((c + par["mu_beta"]) / link(-par["mu_gamma"]))
        se = 1.0 - ndtr((c - par["mu_beta"]) / link(par["mu_gamma"]))
    elif fam == "JonesFC":
        t = transformed_thresholds(prof.K, "log")
        sp = ndtr((t - par["mu"][0]) / math.exp(par["mu_logscale"][0]))
        se = 1.0 - ndtr((t - par["mu"][1]) / math.exp(par["mu_logscale"][1]))
    else:  # pragma: no cover - guarded by SimScenario
        raise ValueError(fam)
    return TruthValues(se=np.asarray(se), sp=np.asarray(sp))


# ---------------------------------------------------------------------
# data generation


def _bvn(rng, mu, sigma, rho):
    z = rng.standard_normal(2)
    x0 = mu[0] + sigma[0] * z[0]
    x1 = mu[1] + sigma[1] * (rho * z[0] + math.sqrt(1.0 - rho ** 2) * z[1])
    return x0, x1


def _group_counts(rng, n: int, loc: float, scale: float,
                  cuts: np.ndarray, group: int) -> StudyCounts:
    """Multinomial category counts from a probit ordinal law, stored as
    cumulative at-or-above counts."""
    cum_p = ndtr((cuts - loc) / scale)
    probs = np.diff(np.concatenate([[0.0], cum_p, [1.0]]))
    probs = np.clip(probs, 0.0, None)
    counts = rng.multinomial(n, probs / probs.sum())
    cum = n - np.cumsum(counts)[:-1]
    return StudyCounts(n_total=n, cum_counts=tuple(cum), group=group)


def _study_cutpoints(rng, scenario: SimScenario):
    """Per-study cutpoints for one draw: fixed for FC generators, pushed
    through a Dirichlet draw for RC ones.  Returns (cuts_d0, cuts_d1)."""
    prof, par = scenario.profile, scenario.params
    fam = scenario.dgm_family
    if fam == "OBivFC":
        c = _fixed_cutpoints(prof.phi)
        return c, c
    if fam == "JonesFC":
        t = transformed_thresholds(prof.K, "log")
        return t, t
    if fam == "OBivRC":
        out = []
        for d in (0, 1):
            alpha = DirichletHyper.from_phi_kappa(prof.phi,
                                                  par["kappa"][d]).alpha
            out.append(probs_to_cutpoints(rng.dirichlet(alpha)).cutpoints)
        return out[0], out[1]
    # OHsrocRC: one cutpoint vector shared by both groups
    alpha = DirichletHyper.from_phi_kappa(prof.phi, par["kappa"]).alpha
    c = probs_to_cutpoints(rng.dirichlet(alpha)).cutpoints
    return c, c


_FAMILY_CODE = {fam: i for i, fam in enumerate(DGM_FAMILIES)}


def generate_dataset(scenario: SimScenario, rep_seed: int) -> MADataset:
    """One complete-data replication.  Deterministic in
    (scenario, rep_seed): the RNG stream is keyed on the scenario seed,
    the generator family, the study count and the replication index."""
    prof, par = scenario.profile, scenario.params
    fam = scenario.dgm_family
    rng = default_rng([scenario.seed, _FAMILY_CODE[fam],
                       scenario.n_studies, int(rep_seed)])
    lo, hi = prof.n_range
    link = scale_link_fn("exp")

    studies = []
    for _ in range(scenario.n_studies):
        n0 = int(rng.integers(lo, hi + 1))
        n1 = int(rng.integers(lo, hi + 1))
        cuts0, cuts1 = _study_cutpoints(rng, scenario)
        if fam in ("OBivFC", "OBivRC"):
            loc0, loc1 = _bvn(rng, par["mu"], par["sigma"], par["rho"])
            sc0 = sc1 = 1.0
        elif fam == "OHsrocRC":
            b = rng.normal(par["mu_beta"], par["sigma_beta"])
            g = rng.normal(par["mu_gamma"], par["sigma_gamma"])
            loc0, sc0 = -b, link(-g)
            loc1, sc1 = b, link(g)
        else:  # JonesFC
            loc0, loc1 = _bvn(rng, par["mu"], par["sigma"], par["rho"])
            sc0 = math.exp(rng.normal(par["mu_logscale"][0],
                                      par["sigma_logscale"][0]))
            sc1 = math.exp(rng.normal(par["mu_logscale"][1],
                                      par["sigma_logscale"][1]))
        studies.append((
            _group_counts(rng, n0, loc0, sc0, cuts0, group=0),
            _group_counts(rng, n1, loc1, sc1, cuts1, group=1),
        ))
    return MADataset(K=prof.K, studies=studies)


def apply_missingness(data: MADataset, miss_rate: float, rep_seed,
                      min_studies_per_threshold: int = 1) -> MADataset:
    """Mask thresholds completely at random, identically in both disease
    groups.

    Every study keeps at least one observed threshold (a fully masked
    study would carry no information at all), and every threshold keeps
    at least ``min_studies_per_threshold`` reporting studies; both
    repairs un-mask uniformly chosen entries.  ``miss_rate`` 0 returns
    the dataset unchanged.
    """
    if not 0.0 <= miss_rate < 1.0:
        raise ValueError("miss_rate must be in [0, 1)")
    S, T = data.n_studies, data.K - 1
    if min_studies_per_threshold > S:
        raise ValueError(f"cannot keep {min_studies_per_threshold} studies "
                         f"per threshold with only {S} studies")
    if miss_rate == 0.0:
        return data

    rng = default_rng(rep_seed)
    mask = rng.random((S, T)) < miss_rate
    for s in range(S):
        if mask[s].all():
            mask[s, int(rng.integers(T))] = False
    for k in range(T):
        short = min_studies_per_threshold - int((~mask[:, k]).sum())
        if short > 0:
            hidden = np.flatnonzero(mask[:, k])
            for s in rng.choice(hidden, size=short, replace=False):
                mask[s, k] = False

    studies = []
    for s, pair in enumerate(data.studies):
        new_pair = []
        for d in (0, 1):
            cum = tuple(MISSING if mask[s, k] else c
                        for k, c in enumerate(pair[d].cum_counts))
            new_pair.append(StudyCounts(n_total=pair[d].n_total,
                                        cum_counts=cum, group=d))
        studies.append(tuple(new_pair))
    return MADataset(K=data.K, studies=studies,
                     study_labels=list(data.study_labels))


# ---------------------------------------------------------------------
# error metrics


@dataclass(frozen=True)
class MetricAccumulator:
    """Running sums for one estimand across replications.

    ``variance`` is the population variance of the estimates (ddof 0),
    so ``rmse**2 == bias**2 + variance`` holds exactly.  The RMSE Monte
    Carlo SE uses the standard large-sample approximation
    ``rmse / sqrt(2 n)``.
    """

    n_sim: int = 0
    err_sum: float = 0.0
    err2_sum: float = 0.0
    cover_hits: int = 0
    width_sum: float = 0.0
    width2_sum: float = 0.0

    @property
    def bias(self) -> float:
        return self.err_sum / self.n_sim if self.n_sim else math.nan

    @property
    def rmse(self) -> float:
        return math.sqrt(self.err2_sum / self.n_sim) if self.n_sim \
            else math.nan

    @property
    def variance(self) -> float:
        if not self.n_sim:
            return math.nan
        return max(self.err2_sum / self.n_sim - self.bias ** 2, 0.0)

    @property
    def coverage(self) -> float:
        return self.cover_hits / self.n_sim if self.n_sim else math.nan

    @property
    def width(self) -> float:
        return self.width_sum / self.n_sim if self.n_sim else math.nan

    @property
    def mcse_rmse(self) -> float:
        return self.rmse / math.sqrt(2 * self.n_sim) if self.n_sim \
            else math.nan

    @property
    def mcse_bias(self) -> float:
        return math.sqrt(self.variance / self.n_sim) if self.n_sim \
            else math.nan

    @property
    def mcse_coverage(self) -> float:
        if not self.n_sim:
            return math.nan
        p = self.coverage
        return math.sqrt(p * (1.0 - p) / self.n_sim)

    @property
    def mcse_width(self) -> float:
        if not self.n_sim:
            return math.nan
        var = max(self.width2_sum / self.n_sim - self.width ** 2, 0.0)
        return math.sqrt(var / self.n_sim)

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        return MetricAccumulator(
            n_sim=self.n_sim + other.n_sim,
            err_sum=self.err_sum + other.err_sum,
            err2_sum=self.err2_sum + other.err2_sum,
            cover_hits=self.cover_hits + other.cover_hits,
            width_sum=self.width_sum + other.width_sum,
            width2_sum=self.width2_sum + other.width2_sum,
        )


def update_metrics(acc: MetricAccumulator, estimate: float, interval,
                   truth: float) -> MetricAccumulator:
    """Fold one replication's estimate and interval into the sums.
    Returns a new accumulator; the input is left untouched."""
    lo, hi = float(interval[0]), float(interval[1])
    err = float(estimate) - float(truth)
    w = hi - lo
    return MetricAccumulator(
        n_sim=acc.n_sim + 1,
        err_sum=acc.err_sum + err,
        err2_sum=acc.err2_sum + err * err,
        cover_hits=acc.cover_hits + (1 if lo <= truth <= hi else 0),
        width_sum=acc.width_sum + w,
        width2_sum=acc.width2_sum + w * w,
    )


# ---------------------------------------------------------------------
# fitting one replication


@dataclass(frozen=True)
class SimLoopConfig:
    """Knobs of the adaptive replication loop.

    ``mcse_target_pp`` is in percentage points: the loop stops once the
    mean over models, thresholds and both quantities of the per-cell
    RMSE Monte Carlo SE falls below it.  ``eligibility_min_studies`` is
    the minimum number of reporting studies a threshold needs in a
    replication before it enters the metrics.
    """

    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(
        n_chains=2, n_warmup=400, n_iter=400))
    max_reps: int = 100
    mcse_target_pp: float = 0.125
    eligibility_min_studies: int = 3
    min_studies_per_threshold: int = 1
    level: float = 0.95
    allow_rc_on_fc: bool = False

    def __post_init__(self):
        if self.max_reps < 1:
            raise ValueError("max_reps must be >= 1")
        if self.eligibility_min_studies < 1:
            raise ValueError("eligibility_min_studies must be >= 1")


def _fit_draws(spec: ModelSpec, data: MADataset, sampler: SamplerConfig,
               seed: int):
    model = build_model(spec, data)
    inits = np.stack([model.initialize(seed=seed + c)
                      for c in range(sampler.n_chains)])
    draws = sample(model, replace(sampler, seed=seed), inits)
    return model, model.constrain_draws(draws.flat())


def _estimate_curve(family: str, data: MADataset, sampler: SamplerConfig,
                    seed: int, level: float, eligible):
    """Median and central interval of summary Se/Sp at each threshold.

    Returns (est, lo, hi), each (2, K-1) with rows (sp, se); thresholds
    the model cannot address are NaN.  The stratified comparator is fit
    once per eligible threshold, the ordinal families once overall.
    """
    T = data.K - 1
    est = np.full((2, T), np.nan)
    lo = np.full((2, T), np.nan)
    hi = np.full((2, T), np.nan)
    if family == "StratBiv":
        for j, k in enumerate(eligible):
            spec = ModelSpec(family="StratBiv", K=data.K,
                             n_studies=data.n_studies, stratbiv_threshold=k)
            model, params = _fit_draws(spec, data, sampler, seed + 37 * j)
            summ = summarize_accuracy(model.spec, params,
                                      include_prediction=False, level=level)
            est[:, k - 1] = [summ.sp_median[0], summ.se_median[0]]
            lo[:, k - 1] = [summ.sp_lo[0], summ.se_lo[0]]
            hi[:, k - 1] = [summ.sp_hi[0], summ.se_hi[0]]
        return est, lo, hi
    spec = ModelSpec(family=family, K=data.K, n_studies=data.n_studies)
    model, params = _fit_draws(spec, data, sampler, seed)
    summ = summarize_accuracy(model.spec, params,
                              include_prediction=False, level=level)
    est[0], est[1] = summ.sp_median, summ.se_median
    lo[0], lo[1] = summ.sp_lo, summ.se_lo
    hi[0], hi[1] = summ.sp_hi, summ.se_hi
    return est, lo, hi


# ---------------------------------------------------------------------
# the adaptive loop


@dataclass
class ModelSimResult:
    """Accumulated metrics for one fitted family, keyed by threshold."""

    family: str
    sp: dict = field(default_factory=dict)
    se: dict = field(default_factory=dict)
    n_reps: int = 0
    n_failed: int = 0

    def _cells(self):
        yield from self.sp.values()
        yield from self.se.values()

    def mean_metric(self, metric: str) -> tuple:
        """(sp, se) means of one metric across thresholds, unweighted."""
        out = []
        for accs in (self.sp, self.se):
            vals = [getattr(a, metric) for a in accs.values() if a.n_sim]
            out.append(float(np.mean(vals)) if vals else math.nan)
        return tuple(out)


@dataclass
class SimRunResult:
    scenario: SimScenario
    truth: TruthValues
    models: dict
    n_reps: int = 0
    stopped_early: bool = False
    mcse_trajectory: list = field(default_factory=list)


def _stopping_stat(models: dict) -> float:
    """Mean per-cell RMSE Monte Carlo SE, in percentage points."""
    vals = [a.mcse_rmse for r in models.values() for a in r._cells()
            if a.n_sim]
    return 100.0 * float(np.mean(vals)) if vals else math.inf


def adaptive_loop(scenario: SimScenario, models: Sequence[str],
                  cfg: Optional[SimLoopConfig] = None,
                  progress=None) -> SimRunResult:
    """Run replications until the RMSE Monte Carlo SEs are small enough.

    ``models`` lists the families to fit each replication.  On
    fixed-cutpoint generators the random-cutpoint families are rejected
    unless ``cfg.allow_rc_on_fc`` is set.  A model whose fit raises is
    recorded as failed for that replication and skipped; everything else
    proceeds.  Results are bit-identical given (scenario, models, cfg).
    """
    cfg = cfg or SimLoopConfig()
    models = list(models)
    for fam in models:
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {fam}")
        if (scenario.dgm_family in FC_DGMS and fam in ("OBivRC", "OHsrocRC")
                and not cfg.allow_rc_on_fc):
            raise ValueError(
                f"{fam} is excluded on the fixed-cutpoint generator "
                f"{scenario.dgm_family}; set allow_rc_on_fc to override")
    if len(set(models)) != len(models):
        raise ValueError("duplicate model families")

    truth = truth_values(scenario)
    result = SimRunResult(scenario=scenario, truth=truth,
                          models={f: ModelSimResult(family=f)
                                  for f in models})
    prof = scenario.profile

    for rep in range(cfg.max_reps):
        data = generate_dataset(scenario, rep)
        masked = apply_missingness(
            data, prof.miss_rate,
            rep_seed=[scenario.seed, _FAMILY_CODE[scenario.dgm_family],
                      scenario.n_studies, rep, 1],
            min_studies_per_threshold=cfg.min_studies_per_threshold)
        _, cum = masked.to_arrays()
        reporting = (cum[:, 0, :] != MISSING).sum(axis=0)
        eligible = [k + 1 for k in range(prof.K - 1)
                    if reporting[k] >= cfg.eligibility_min_studies]

        for im, fam in enumerate(models):
            mres = result.models[fam]
            mres.n_reps += 1
            seed = scenario.seed * 1000000 + rep * 1000 + im * 101
            try:
                est, lo, hi = _estimate_curve(fam, masked, cfg.sampler,
                                              seed, cfg.level, eligible)
            except Exception:
                mres.n_failed += 1
                continue
            for k in eligible:
                for row, accs, tr in ((0, mres.sp, truth.sp),
                                      (1, mres.se, truth.se)):
                    e = est[row, k - 1]
                    if not np.isfinite(e):
                        continue
                    acc = accs.get(k, MetricAccumulator())
                    accs[k] = update_metrics(
                        acc, e, (lo[row, k - 1], hi[row, k - 1]), tr[k - 1])

        result.n_reps = rep + 1
        stat = _stopping_stat(result.models)
        result.mcse_trajectory.append(stat)
        if progress is not None:
            progress(rep, stat)
        if stat < cfg.mcse_target_pp:
            result.stopped_early = True
            break
    return result


# ---------------------------------------------------------------------
# reporting


_METRICS = ("rmse", "bias", "coverage", "width")
_MCSE_OF = {"rmse": "mcse_rmse", "bias": "mcse_bias",
            "coverage": "mcse_coverage", "width": "mcse_width"}


def results_to_csv(results, path) -> None:
    """Long-format metric table, one row per (model, metric, quantity).

    Per-threshold rows are labelled ``sp@k`` / ``se@k``; the unweighted
    threshold averages are ``sp_mean`` / ``se_mean`` (their mcse column
    is the mean of the per-threshold MCSEs).  Values stay on the
    probability scale.
    """
    if isinstance(results, SimRunResult):
        results = [results]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dgm", "model", "n_studies", "metric", "quantity",
                         "value", "mcse", "n_sim"])
        for res in results:
            dgm = res.scenario.dgm_family
            S = res.scenario.n_studies
            for fam, mres in res.models.items():
                for metric in _METRICS:
                    for label, accs in (("sp", mres.sp), ("se", mres.se)):
                        for k in sorted(accs):
                            a = accs[k]
                            writer.writerow([
                                dgm, fam, S, metric, f"{label}@{k}",
                                repr(getattr(a, metric)),
                                repr(getattr(a, _MCSE_OF[metric])),
                                a.n_sim])
                        cells = [accs[k] for k in sorted(accs) if accs[k].n_sim]
                        if not cells:
                            continue
                        val = float(np.mean([getattr(a, metric)
                                             for a in cells]))
                        mc = float(np.mean([getattr(a, _MCSE_OF[metric])
                                            for a in cells]))
                        writer.writerow([
                            dgm, fam, S, metric, f"{label}_mean",
                            repr(val), repr(mc),
                            min(a.n_sim for a in cells)])


def _fmt_cell(value: float, mcse: Optional[float] = None) -> str:
    if not np.isfinite(value):
        return "--"
    if mcse is None:
        return f"{100 * value:.1f}"
    return f"{100 * value:.2f} ({100 * mcse:.2f})"


def format_results_table(results) -> str:
    """Plain-text results grid, one row per (generator, model, n).

    Columns: threshold-averaged RMSE and absolute bias in percentage
    points with their Monte Carlo SEs in parentheses, then coverage and
    mean interval width in percent.  Rows for the same generator share
    one label, mirroring the usual simulation-report layout.
    """
    if isinstance(results, SimRunResult):
        results = [results]
    header = (f"{'DGM':<10} {'Model':<10} {'n':>4}   "
              f"{'RMSE Sp':>13} {'RMSE Se':>13}   "
              f"{'|Bias| Sp':>13} {'|Bias| Se':>13}   "
              f"{'Cvg Sp':>6} {'Cvg Se':>6}   {'Wid Sp':>6} {'Wid Se':>6}")
    lines = [header, "-" * len(header)]
    last_dgm = None
    for res in results:
        dgm = f"{res.scenario.dgm_family}/{res.scenario.profile.name}"
        for fam, mres in res.models.items():
            rm = mres.mean_metric("rmse")
            rmc = mres.mean_metric("mcse_rmse")
            bi = mres.mean_metric("bias")
            bmc = mres.mean_metric("mcse_bias")
            cv = mres.mean_metric("coverage")
            wd = mres.mean_metric("width")
            label = dgm if dgm != last_dgm else ""
            last_dgm = dgm
            lines.append(
                f"{label:<10} {fam:<10} {res.scenario.n_studies:>4}   "
                f"{_fmt_cell(rm[0], rmc[0]):>13} {_fmt_cell(rm[1], rmc[1]):>13}   "
                f"{_fmt_cell(abs(bi[0]), bmc[0]):>13} "
                f"{_fmt_cell(abs(bi[1]), bmc[1]):>13}   "
                f"{_fmt_cell(cv[0]):>6} {_fmt_cell(cv[1]):>6}   "
                f"{_fmt_cell(wd[0]):>6} {_fmt_cell(wd[1]):>6}")
            if mres.n_failed:
                lines.append(f"{'':<10}   ({mres.n_failed} of "
                             f"{mres.n_reps} replications failed)")
    return "\n".join(lines) + "\n"
