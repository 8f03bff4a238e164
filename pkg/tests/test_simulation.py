"""Generators, missingness masks, metric accumulators, adaptive loop."""

import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.special import ndtr, ndtri

import ordmeta.simulation as sim
from ordmeta.data import DataError, validate_counts
from ordmeta.kernel import MISSING, DirichletHyper
from ordmeta.mcmc import SamplerConfig

CONFIG_DIR = Path(sim.__file__).resolve().parent / "configs"
CONFIGS = ["gad2.json", "hads.json", "bai.json"]


def tiny_profile(miss=0.0, K=3, **extra_dgm):
    dgm = {"OBivFC": dict(mu=(-0.4, 0.7), sigma=(0.2, 0.2), rho=0.3)}
    dgm.update(extra_dgm)
    return sim.SimProfile(name="T", K=K, miss_rate=miss, n_range=(60, 120),
                          phi=tuple([1.0 / K] * K), dgm=dgm)


def counts_equal(a, b):
    return all(a.studies[s][d].cum_counts == b.studies[s][d].cum_counts
               and a.studies[s][d].n_total == b.studies[s][d].n_total
               for s in range(a.n_studies) for d in (0, 1))


class TestCalibration:
    def test_closed_form_matches_monte_carlo(self):
        phi = [1 / 7] * 7
        kappa = 143.0529
        rng = np.random.default_rng(0)
        alpha = np.asarray(DirichletHyper.from_phi_kappa(phi, kappa).alpha)
        p = rng.dirichlet(alpha, size=200000)
        mc = np.cumsum(p, axis=1)[:, :-1].std(axis=0, ddof=1).mean()
        assert abs(sim.cutpoint_sd_probability_scale(phi, kappa) - mc) < 5e-4

    def test_calibrate_hits_target(self):
        for K, target in [(7, 0.036), (22, 0.011), (64, 0.003)]:
            phi = [1.0 / K] * K
            kappa = sim.calibrate_kappa(phi, target)
            assert abs(sim.cutpoint_sd_probability_scale(phi, kappa)
                       - target) < 1e-10

    def test_sd_monotone_decreasing_in_kappa(self):
        phi = [0.1, 0.3, 0.4, 0.2]
        sds = [sim.cutpoint_sd_probability_scale(phi, k)
               for k in (1.0, 10.0, 100.0, 1000.0)]
        assert all(a > b for a, b in zip(sds, sds[1:]))

    def test_errors(self):
        with pytest.raises(ValueError, match="positive"):
            sim.calibrate_kappa([0.5, 0.5], -0.1)
        with pytest.raises(ValueError, match="achievable"):
            sim.calibrate_kappa([0.5, 0.5], 0.9)


class TestProfiles:
    @pytest.mark.parametrize("name", CONFIGS)
    def test_shipped_configs_load(self, name):
        prof = sim.load_profile(CONFIG_DIR / name)
        assert set(prof.dgm) == set(sim.DGM_FAMILIES)
        assert len(prof.phi) == prof.K
        assert abs(sum(prof.phi) - 1.0) < 1e-12
        assert 0.0 < prof.miss_rate < 1.0
        assert prof.n_range == (50, 500)

    @pytest.mark.parametrize("name", CONFIGS)
    def test_shipped_kappas_match_their_targets(self, name):
        prof = sim.load_profile(CONFIG_DIR / name)
        rc = prof.dgm["OBivRC"]
        for d in (0, 1):
            got = sim.cutpoint_sd_probability_scale(prof.phi, rc["kappa"][d])
            assert abs(got - rc["cutpoint_sd_target"][d]) < 1e-6
        hs = prof.dgm["OHsrocRC"]
        got = sim.cutpoint_sd_probability_scale(prof.phi, hs["kappa"])
        assert abs(got - hs["cutpoint_sd_target"]) < 1e-6

    def test_loader_errors(self, tmp_path):
        good = json.loads((CONFIG_DIR / "gad2.json").read_text())

        def write(doc):
            p = tmp_path / "p.json"
            p.write_text(json.dumps(doc))
            return p

        with pytest.raises(DataError, match="schema_version"):
            sim.load_profile(write({**good, "schema_version": 2}))
        with pytest.raises(DataError, match="unknown keys"):
            sim.load_profile(write({**good, "extra": 1}))
        bad = dict(good)
        del bad["phi"]
        with pytest.raises(DataError, match="missing keys"):
            sim.load_profile(write(bad))

    def test_profile_validation(self):
        ok = dict(name="X", K=3, miss_rate=0.1, n_range=(10, 20),
                  phi=(1 / 3, 1 / 3, 1 / 3),
                  dgm={"OBivFC": dict(mu=(0, 1), sigma=(1, 1), rho=0.0)})
        sim.SimProfile(**ok)
        with pytest.raises(ValueError, match="K >= 2"):
            sim.SimProfile(**{**ok, "K": 1, "phi": (1.0,)})
        with pytest.raises(ValueError, match="miss_rate"):
            sim.SimProfile(**{**ok, "miss_rate": 1.0})
        with pytest.raises(ValueError, match="n_range"):
            sim.SimProfile(**{**ok, "n_range": (20, 10)})
        with pytest.raises(ValueError, match="simplex"):
            sim.SimProfile(**{**ok, "phi": (0.5, 0.2, 0.2)})
        with pytest.raises(ValueError, match="unknown generator"):
            sim.SimProfile(**{**ok, "dgm": {"Nope": {}}})

    def test_scenario_validation(self):
        prof = tiny_profile()
        with pytest.raises(ValueError, match="unknown generator"):
            sim.SimScenario(profile=prof, dgm_family="Nope", n_studies=5)
        with pytest.raises(ValueError, match="no OHsrocRC block"):
            sim.SimScenario(profile=prof, dgm_family="OHsrocRC", n_studies=5)
        with pytest.raises(ValueError, match="2 studies"):
            sim.SimScenario(profile=prof, dgm_family="OBivFC", n_studies=1)


class TestTruth:
    @pytest.mark.parametrize("name", CONFIGS)
    @pytest.mark.parametrize("family", sim.DGM_FAMILIES)
    def test_shapes_and_monotonicity(self, name, family):
        prof = sim.load_profile(CONFIG_DIR / name)
        scn = sim.SimScenario(profile=prof, dgm_family=family, n_studies=10)
        tr = sim.truth_values(scn)
        assert tr.se.shape == tr.sp.shape == (prof.K - 1,)
        assert np.all((tr.se > 0) & (tr.se < 1))
        assert np.all((tr.sp > 0) & (tr.sp < 1))
        # raising the threshold can only lose sensitivity and gain
        # specificity
        assert np.all(np.diff(tr.se) <= 0)
        assert np.all(np.diff(tr.sp) >= 0)

    def test_fixed_cutpoint_truth_by_hand(self):
        prof = sim.load_profile(CONFIG_DIR / "gad2.json")
        scn = sim.SimScenario(profile=prof, dgm_family="OBivFC", n_studies=5)
        tr = sim.truth_values(scn)
        c = ndtri(np.arange(1, 7) / 7.0)
        mu = prof.dgm["OBivFC"]["mu"]
        assert np.allclose(tr.sp, ndtr(c - mu[0]), atol=1e-12)
        assert np.allclose(tr.se, 1 - ndtr(c - mu[1]), atol=1e-12)

    def test_location_scale_truth_by_hand(self):
        prof = sim.load_profile(CONFIG_DIR / "gad2.json")
        scn = sim.SimScenario(profile=prof, dgm_family="JonesFC", n_studies=5)
        tr = sim.truth_values(scn)
        par = prof.dgm["JonesFC"]
        t = np.log(np.arange(2, 8))
        assert np.allclose(
            tr.sp, ndtr((t - par["mu"][0]) / math.exp(par["mu_logscale"][0])),
            atol=1e-12)
        assert np.allclose(
            tr.se,
            1 - ndtr((t - par["mu"][1]) / math.exp(par["mu_logscale"][1])),
            atol=1e-12)

    def test_hsroc_truth_by_hand(self):
        prof = sim.load_profile(CONFIG_DIR / "gad2.json")
        scn = sim.SimScenario(profile=prof, dgm_family="OHsrocRC",
                              n_studies=5)
        tr = sim.truth_values(scn)
        par = prof.dgm["OHsrocRC"]
        alpha = np.asarray(DirichletHyper.from_phi_kappa(
            prof.phi, par["kappa"]).alpha)
        from scipy.stats import beta as beta_dist
        a = np.cumsum(alpha)[:-1]
        c = ndtri(beta_dist.median(a, alpha.sum() - a))
        sp = ndtr((c + par["mu_beta"]) * math.exp(par["mu_gamma"]))
        se = 1 - ndtr((c - par["mu_beta"]) / math.exp(par["mu_gamma"]))
        assert np.allclose(tr.sp, sp, atol=1e-12)
        assert np.allclose(tr.se, se, atol=1e-12)

    def test_tight_cutpoint_law_approaches_fixed(self):
        prof = tiny_profile(
            K=5,
            OBivRC=dict(mu=(-0.4, 0.7), sigma=(0.2, 0.2), rho=0.3,
                        kappa=(1e9, 1e9)))
        fixed = sim.SimScenario(profile=prof, dgm_family="OBivFC",
                                n_studies=5)
        prof_fc = tiny_profile(K=5)
        fc = sim.truth_values(sim.SimScenario(
            profile=prof_fc, dgm_family="OBivFC", n_studies=5))
        rc = sim.truth_values(sim.SimScenario(
            profile=prof, dgm_family="OBivRC", n_studies=5))
        assert np.allclose(rc.se, fc.se, atol=1e-3)
        assert np.allclose(rc.sp, fc.sp, atol=1e-3)


DEGENERATE = {
    "OBivFC": dict(mu=(-0.9, 0.6), sigma=(0.0, 0.0), rho=0.0),
    "OBivRC": dict(mu=(-0.9, 0.6), sigma=(0.0, 0.0), rho=0.0,
                   kappa=(1e9, 1e9)),
    "OHsrocRC": dict(mu_beta=0.75, sigma_beta=0.0, mu_gamma=0.25,
                     sigma_gamma=0.0, kappa=1e9),
    "JonesFC": dict(mu=(0.8, 1.7), sigma=(0.0, 0.0), rho=0.0,
                    mu_logscale=(-0.4, -0.1), sigma_logscale=(0.0, 0.0)),
}


class TestGenerator:
    @pytest.mark.parametrize("family", sim.DGM_FAMILIES)
    def test_deterministic_and_valid(self, family):
        prof = sim.load_profile(CONFIG_DIR / "gad2.json")
        scn = sim.SimScenario(profile=prof, dgm_family=family,
                              n_studies=12, seed=3)
        d1 = sim.generate_dataset(scn, 7)
        d2 = sim.generate_dataset(scn, 7)
        d3 = sim.generate_dataset(scn, 8)
        assert counts_equal(d1, d2)
        assert not counts_equal(d1, d3)
        assert validate_counts(d1) == []
        assert d1.K == prof.K and d1.n_studies == 12

    def test_study_sizes_within_range(self):
        prof = sim.load_profile(CONFIG_DIR / "gad2.json")
        scn = sim.SimScenario(profile=prof, dgm_family="OBivFC",
                              n_studies=40, seed=0)
        d = sim.generate_dataset(scn, 0)
        sizes = [g.n_total for pair in d.studies for g in pair]
        assert min(sizes) >= 50 and max(sizes) <= 500

    @pytest.mark.parametrize("family", sim.DGM_FAMILIES)
    def test_zero_heterogeneity_recovers_truth(self, family):
        """With every between-study SD forced to zero (and the cutpoint
        law concentrated) the observed survival fractions converge on
        the summary truth at the binomial rate."""
        n = 50000
        prof = sim.SimProfile(name="Z", K=7, miss_rate=0.0,
                              n_range=(n, n), phi=tuple([1 / 7] * 7),
                              dgm={family: DEGENERATE[family]})
        scn = sim.SimScenario(profile=prof, dgm_family=family,
                              n_studies=4, seed=1)
        tr = sim.truth_values(scn)
        counts, cum = sim.generate_dataset(scn, 0).to_arrays()
        surv = cum / counts[:, :, None]
        sp_emp = 1 - surv[:, 0, :].mean(axis=0)
        se_emp = surv[:, 1, :].mean(axis=0)
        tol = 2 * 3 / math.sqrt(n)
        assert np.abs(sp_emp - tr.sp).max() < tol
        assert np.abs(se_emp - tr.se).max() < tol

    def test_random_cutpoint_truth_is_study_median(self):
        """With degenerate locations the per-study accuracy varies only
        through the cutpoint draw, so its median across many studies is
        the probit of the median cutpoint -- which is what the summary
        truth uses."""
        prof = sim.load_profile(CONFIG_DIR / "gad2.json")
        rc = dict(prof.dgm["OBivRC"])
        rc["sigma"] = (0.0, 0.0)
        rc["rho"] = 0.0
        n = 100000
        pm = sim.SimProfile(name="M", K=7, miss_rate=0.0, n_range=(n, n),
                            phi=prof.phi, dgm={"OBivRC": rc})
        scn = sim.SimScenario(profile=pm, dgm_family="OBivRC",
                              n_studies=1501, seed=9)
        tr = sim.truth_values(scn)
        counts, cum = sim.generate_dataset(scn, 0).to_arrays()
        surv = cum / counts[:, :, None]
        sp_med = np.median(1 - surv[:, 0, :], axis=0)
        se_med = np.median(surv[:, 1, :], axis=0)
        assert np.abs(sp_med - tr.sp).max() < 8e-3
        assert np.abs(se_med - tr.se).max() < 8e-3


class TestMissingness:
    def make(self, S=400, seed=2):
        prof = sim.load_profile(CONFIG_DIR / "gad2.json")
        scn = sim.SimScenario(profile=prof, dgm_family="OBivFC",
                              n_studies=S, seed=seed)
        return sim.generate_dataset(scn, 0)

    def test_rate_and_shared_mask(self):
        data = self.make()
        masked = sim.apply_missingness(data, 0.40, rep_seed=11)
        _, cum = masked.to_arrays()
        m0 = cum[:, 0, :] == MISSING
        m1 = cum[:, 1, :] == MISSING
        assert np.array_equal(m0, m1)
        rate = m0.mean()
        assert abs(rate - 0.40) < 2 * math.sqrt(0.4 * 0.6 / m0.size)
        assert validate_counts(masked) == []

    def test_deterministic(self):
        data = self.make(S=60)
        a = sim.apply_missingness(data, 0.4, rep_seed=11)
        b = sim.apply_missingness(data, 0.4, rep_seed=11)
        c = sim.apply_missingness(data, 0.4, rep_seed=12)
        assert counts_equal(a, b)
        assert not counts_equal(a, c)

    def test_every_study_keeps_a_threshold(self):
        prof = tiny_profile()
        scn = sim.SimScenario(profile=prof, dgm_family="OBivFC",
                              n_studies=30, seed=0)
        data = sim.generate_dataset(scn, 0)
        for seed in range(10):
            masked = sim.apply_missingness(data, 0.95, rep_seed=seed)
            _, cum = masked.to_arrays()
            assert (cum[:, 0, :] != MISSING).sum(axis=1).min() >= 1

    def test_threshold_floor(self):
        data = self.make(S=6)
        masked = sim.apply_missingness(data, 0.9, rep_seed=3,
                                       min_studies_per_threshold=2)
        _, cum = masked.to_arrays()
        assert (cum[:, 0, :] != MISSING).sum(axis=0).min() >= 2

    def test_zero_rate_is_identity(self):
        data = self.make(S=5)
        assert sim.apply_missingness(data, 0.0, rep_seed=0) is data

    def test_errors(self):
        data = self.make(S=5)
        with pytest.raises(ValueError, match=r"\[0, 1\)"):
            sim.apply_missingness(data, 1.0, rep_seed=0)
        with pytest.raises(ValueError, match="cannot keep"):
            sim.apply_missingness(data, 0.5, rep_seed=0,
                                  min_studies_per_threshold=9)


class TestMetrics:
    def test_hand_fixture(self):
        acc = sim.MetricAccumulator()
        for est in (0.4, 0.6):
            acc = sim.update_metrics(acc, est, (est - 0.1, est + 0.1), 0.5)
        assert abs(acc.rmse - 0.1) < 1e-15
        assert acc.bias == 0.0
        assert acc.coverage == 1.0
        assert abs(acc.width - 0.2) < 1e-15
        assert acc.n_sim == 2

    def test_rmse_mcse_fixture(self):
        acc = sim.MetricAccumulator(n_sim=8, err_sum=0.0, err2_sum=0.08,
                                    cover_hits=8, width_sum=0.0,
                                    width2_sum=0.0)
        assert abs(acc.rmse - 0.1) < 1e-15
        assert abs(acc.mcse_rmse - 0.025) < 1e-15

    def test_error_decomposition_identity(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            acc = sim.MetricAccumulator()
            for _ in range(rng.integers(2, 40)):
                e = rng.normal(0.6, 0.2)
                acc = sim.update_metrics(acc, e, (e - 0.1, e + 0.2), 0.55)
            assert abs(acc.rmse ** 2
                       - (acc.bias ** 2 + acc.variance)) < 1e-12

    def test_coverage_counting(self):
        acc = sim.MetricAccumulator()
        acc = sim.update_metrics(acc, 0.5, (0.4, 0.6), 0.55)   # inside
        acc = sim.update_metrics(acc, 0.5, (0.4, 0.6), 0.61)   # outside
        acc = sim.update_metrics(acc, 0.5, (0.4, 0.6), 0.40)   # boundary
        assert acc.coverage == pytest.approx(2 / 3)
        p = acc.coverage
        assert acc.mcse_coverage == pytest.approx(
            math.sqrt(p * (1 - p) / 3))

    def test_update_is_functional(self):
        acc = sim.MetricAccumulator()
        sim.update_metrics(acc, 0.7, (0.6, 0.8), 0.65)
        assert acc.n_sim == 0

    def test_empty_is_nan(self):
        acc = sim.MetricAccumulator()
        assert math.isnan(acc.rmse) and math.isnan(acc.bias)
        assert math.isnan(acc.coverage) and math.isnan(acc.mcse_rmse)

    def test_merge_matches_pooled_updates(self):
        rng = np.random.default_rng(1)
        parts = [sim.MetricAccumulator()] * 3
        pooled = sim.MetricAccumulator()
        for i in range(30):
            e = rng.normal(0.5, 0.1)
            parts[i % 3] = sim.update_metrics(
                parts[i % 3], e, (e - 0.05, e + 0.05), 0.48)
            pooled = sim.update_metrics(pooled, e, (e - 0.05, e + 0.05),
                                        0.48)
        merged = parts[0].merge(parts[1]).merge(parts[2])
        reassoc = parts[0].merge(parts[1].merge(parts[2]))
        for other in (merged, reassoc):
            assert other.n_sim == pooled.n_sim
            assert other.cover_hits == pooled.cover_hits
            for f in ("err_sum", "err2_sum", "width_sum", "width2_sum"):
                assert math.isclose(getattr(other, f), getattr(pooled, f),
                                    rel_tol=1e-12)


@pytest.fixture(scope="module")
def scenario():
    prof = tiny_profile(miss=0.2)
    return sim.SimScenario(profile=prof, dgm_family="OBivFC",
                           n_studies=5, seed=4)


@pytest.fixture(scope="module")
def sampler():
    return SamplerConfig(n_chains=1, n_warmup=150, n_iter=150)


@pytest.fixture(scope="module")
def capped_run(scenario, sampler):
    cfg = sim.SimLoopConfig(sampler=sampler, max_reps=3,
                            mcse_target_pp=0.0,
                            eligibility_min_studies=2)
    return sim.adaptive_loop(scenario, ["OBivFC", "StratBiv"], cfg)


class TestAdaptiveLoop:
    """Small real fits: one tiny scenario reused across semantics checks."""

    def test_infinite_target_stops_after_one_rep(self, scenario, sampler):
        cfg = sim.SimLoopConfig(sampler=sampler, max_reps=3,
                                mcse_target_pp=math.inf,
                                eligibility_min_studies=2)
        res = sim.adaptive_loop(scenario, ["OBivFC"], cfg)
        assert res.n_reps == 1 and res.stopped_early
        assert len(res.mcse_trajectory) == 1

    def test_zero_target_runs_to_cap(self, capped_run):
        assert capped_run.n_reps == 3 and not capped_run.stopped_early
        assert len(capped_run.mcse_trajectory) == 3
        assert all(np.isfinite(capped_run.mcse_trajectory))

    def test_first_crossing_replays(self, scenario, sampler, capped_run):
        """Rerunning with a threshold inside the recorded trajectory
        stops at the first crossing and reproduces the prefix."""
        traj = capped_run.mcse_trajectory
        thr = (min(traj) + max(traj)) / 2.0
        expect = next(i for i, v in enumerate(traj) if v < thr)
        cfg = sim.SimLoopConfig(sampler=sampler, max_reps=3,
                                mcse_target_pp=thr,
                                eligibility_min_studies=2)
        res = sim.adaptive_loop(scenario, ["OBivFC", "StratBiv"], cfg)
        assert res.n_reps == expect + 1
        assert res.mcse_trajectory == traj[:expect + 1]
        assert res.stopped_early

    def test_estimates_track_truth(self, capped_run, scenario):
        tr = sim.truth_values(scenario)
        for mres in capped_run.models.values():
            assert mres.n_failed == 0
            rm = mres.mean_metric("rmse")
            assert 0 < rm[0] < 0.15 and 0 < rm[1] < 0.15
            cv = mres.mean_metric("coverage")
            assert cv[0] > 0.5 and cv[1] > 0.5
        assert np.all((tr.se > 0) & (tr.se < 1))

    def test_stratified_comparator_only_fits_eligible(self, capped_run,
                                                      scenario):
        sb = capped_run.models["StratBiv"]
        assert set(sb.se) <= {1, 2}
        assert all(acc.n_sim <= capped_run.n_reps
                   for acc in sb.se.values())

    def test_failed_fits_are_counted_and_skipped(self, scenario, sampler,
                                                 monkeypatch):
        orig = sim._estimate_curve

        def flaky(family, *args, **kwargs):
            if family == "StratBiv":
                raise RuntimeError("boom")
            return orig(family, *args, **kwargs)

        monkeypatch.setattr(sim, "_estimate_curve", flaky)
        cfg = sim.SimLoopConfig(sampler=sampler, max_reps=2,
                                mcse_target_pp=0.0,
                                eligibility_min_studies=2)
        res = sim.adaptive_loop(scenario, ["OBivFC", "StratBiv"], cfg)
        broken = res.models["StratBiv"]
        assert broken.n_failed == broken.n_reps == 2
        assert not broken.se and not broken.sp
        healthy = res.models["OBivFC"]
        assert healthy.n_failed == 0
        assert healthy.se[1].n_sim == 2

    def test_random_cutpoint_models_rejected_on_fixed_generators(
            self, scenario, sampler):
        cfg = sim.SimLoopConfig(sampler=sampler, max_reps=1)
        with pytest.raises(ValueError, match="allow_rc_on_fc"):
            sim.adaptive_loop(scenario, ["OBivRC"], cfg)

    def test_model_list_validation(self, scenario, sampler):
        cfg = sim.SimLoopConfig(sampler=sampler, max_reps=1)
        with pytest.raises(ValueError, match="unknown family"):
            sim.adaptive_loop(scenario, ["Zork"], cfg)
        with pytest.raises(ValueError, match="duplicate"):
            sim.adaptive_loop(scenario, ["OBivFC", "OBivFC"], cfg)

    def test_config_validation(self, sampler):
        with pytest.raises(ValueError, match="max_reps"):
            sim.SimLoopConfig(sampler=sampler, max_reps=0)
        with pytest.raises(ValueError, match="eligibility"):
            sim.SimLoopConfig(sampler=sampler, eligibility_min_studies=0)


def synthetic_result():
    prof = tiny_profile(miss=0.1)
    scn = sim.SimScenario(profile=prof, dgm_family="OBivFC", n_studies=5,
                          seed=0)
    mres = sim.ModelSimResult(family="OBivFC")
    a = sim.MetricAccumulator(n_sim=4, err_sum=0.04, err2_sum=0.01,
                              cover_hits=3, width_sum=0.4, width2_sum=0.05)
    mres.sp = {1: a, 2: a}
    mres.se = {1: a}
    mres.n_reps = 4
    return sim.SimRunResult(
        scenario=scn,
        truth=sim.TruthValues(se=np.array([0.8, 0.6]),
                              sp=np.array([0.7, 0.9])),
        models={"OBivFC": mres}, n_reps=4)


class TestReporting:
    def test_csv_layout(self, tmp_path):
        import csv as _csv
        res = synthetic_result()
        path = tmp_path / "sim.csv"
        sim.results_to_csv(res, path)
        rows = list(_csv.reader(path.open()))
        assert rows[0] == ["dgm", "model", "n_studies", "metric",
                           "quantity", "value", "mcse", "n_sim"]
        # 4 metrics x (2 sp cells + sp_mean + 1 se cell + se_mean)
        assert len(rows) - 1 == 20
        body = rows[1:]
        assert all(r[0] == "OBivFC" and r[2] == "5" for r in body)
        rmse_sp1 = next(r for r in body
                        if r[3] == "rmse" and r[4] == "sp@1")
        assert float(rmse_sp1[5]) == pytest.approx(0.05)
        assert float(rmse_sp1[6]) == pytest.approx(0.05 / math.sqrt(8))
        assert rmse_sp1[7] == "4"
        mean_row = next(r for r in body
                        if r[3] == "rmse" and r[4] == "sp_mean")
        assert float(mean_row[5]) == pytest.approx(0.05)

    def test_table_format(self):
        res = synthetic_result()
        text = sim.format_results_table(res)
        assert "RMSE Sp" in text and "|Bias| Se" in text
        assert "OBivFC/T" in text
        assert "5.00 (1.77)" in text    # rmse 0.05, mcse 0.05/sqrt(8)
        assert "75.0" in text           # coverage 3/4
        assert "10.0" in text           # mean width 0.1
        assert "failed" not in text

    def test_table_reports_failures_and_shared_labels(self):
        res = synthetic_result()
        other = sim.ModelSimResult(family="JonesFC", n_reps=4, n_failed=2)
        other.sp = dict(res.models["OBivFC"].sp)
        other.se = dict(res.models["OBivFC"].se)
        res.models["JonesFC"] = other
        text = sim.format_results_table(res)
        assert "(2 of 4 replications failed)" in text
        lines = [l for l in text.splitlines() if "OBivFC/T" in l]
        assert len(lines) == 1          # generator label printed once

    def test_accepts_result_lists(self, tmp_path):
        res = synthetic_result()
        sim.results_to_csv([res, res], tmp_path / "two.csv")
        assert sum(1 for _ in (tmp_path / "two.csv").open()) == 41
        text = sim.format_results_table([res, res])
        # same generator twice in a row: label suppressed on the repeat
        assert text.count("OBivFC/T") == 1
        assert len([l for l in text.splitlines() if "OBivFC " in l]) == 2
