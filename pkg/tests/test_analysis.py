"""Tests for derived quantities: summary accuracy, prediction
intervals, the heterogeneity mapping, sROC points, and AUC."""

import math

import numpy as np
import pytest
from scipy.special import ndtr

from ordmeta.analysis import (accuracy_draws, auc_from_curve, auc_summary,
                              heterogeneity_report, hsroc_to_bivariate,
                              predictive_draws, sroc_points,
                              summarize_accuracy, summary_cutpoints,
                              write_accuracy_csv)
from ordmeta.data import MADataset, StudyCounts
from ordmeta.models import ModelSpec, build_model


def make_data(n_studies, K, seed):
    rng = np.random.default_rng(seed)
    studies = []
    for _ in range(n_studies):
        pair = []
        for d in range(2):
            n = int(rng.integers(30, 90))
            probs = rng.dirichlet(np.full(K, 2.0 + d))
            counts = rng.multinomial(n, probs)
            cum = n - np.cumsum(counts)[:-1]
            pair.append(StudyCounts(n_total=n, cum_counts=tuple(int(c) for c in cum),
                                    group=d))
        studies.append((pair[0], pair[1]))
    return MADataset(K=K, studies=studies)


def fitted_like_params(family, K=4, n_studies=5, n_draws=40, seed=0, **kw):
    """Natural-scale draws produced by the real constrain pipeline at
    random unconstrained points."""
    spec = ModelSpec(family=family, K=K, n_studies=n_studies, **kw)
    model = build_model(spec, make_data(n_studies, K, seed))
    rng = np.random.default_rng(seed + 1)
    u = 0.4 * rng.standard_normal((n_draws, model.layout.size))
    return model.spec, model.constrain_draws(u)


ORDINAL_FAMILIES = ["OBivFC", "OBivRC", "OHsrocFC", "OHsrocRC", "JonesFC"]


class TestAccuracyDraws:
    def test_degenerate_point_is_half(self):
        spec = ModelSpec(family="OBivFC", K=2, n_studies=3)
        params = {"mu_beta": np.zeros((1, 2)),
                  "cutpoints": np.zeros((1, 2, 1))}
        se, sp = accuracy_draws(spec, params)
        assert se[0, 0] == 0.5
        assert sp[0, 0] == 0.5

    def test_fc_summary_is_plug_in(self):
        spec = ModelSpec(family="OBivFC", K=3, n_studies=4)
        rng = np.random.default_rng(3)
        cuts = np.sort(rng.standard_normal((6, 2, 2)), axis=-1)
        mu = rng.standard_normal((6, 2))
        se, sp = accuracy_draws(spec, {"mu_beta": mu, "cutpoints": cuts})
        assert np.allclose(se, 1 - ndtr(cuts[:, 1, :] - mu[:, 1:2]))
        assert np.allclose(sp, ndtr(cuts[:, 0, :] - mu[:, 0:1]))

    def test_rc_median_across_studies(self):
        spec = ModelSpec(family="OBivRC", K=2, n_studies=3)
        sc = np.zeros((1, 3, 2, 1))
        sc[0, :, 0, 0] = [-1.0, 0.0, 5.0]
        sc[0, :, 1, 0] = [-1.0, 0.0, 5.0]
        params = {"mu_beta": np.array([[0.3, 0.7]]),
                  "study_cutpoints": sc}
        se, sp = accuracy_draws(spec, params)
        assert se[0, 0] == pytest.approx(1 - ndtr(0.0 - 0.7), abs=1e-12)
        assert sp[0, 0] == pytest.approx(ndtr(0.0 - 0.3), abs=1e-12)

    @pytest.mark.parametrize("family", ORDINAL_FAMILIES)
    def test_per_draw_monotone_in_threshold(self, family):
        K = 5
        spec, params = fitted_like_params(family, K=K, seed=7)
        se, sp = accuracy_draws(spec, params)
        assert se.shape == (40, K - 1)
        assert np.all(np.diff(se, axis=1) <= 1e-12)
        assert np.all(np.diff(sp, axis=1) >= -1e-12)

    def test_stratified_single_threshold(self):
        spec, params = fitted_like_params("StratBiv", K=4, seed=5,
                                          stratbiv_threshold=2)
        se, sp = accuracy_draws(spec, params)
        assert se.shape == (40, 1)
        assert np.allclose(se[:, 0], ndtr(params["mu_theta"][:, 1]))
        assert np.allclose(sp[:, 0], 1 - ndtr(params["mu_theta"][:, 0]))

    def test_missing_slices_error(self):
        spec = ModelSpec(family="OBivFC", K=3, n_studies=4)
        with pytest.raises(ValueError, match="missing required slices"):
            accuracy_draws(spec, {"mu_beta": np.zeros((2, 2))})


class TestPredictionIntervals:
    def _fc_params(self, n, seed, sigma):
        rng = np.random.default_rng(seed)
        mu = rng.standard_normal((n, 2)) * 0.08 + np.array([-0.4, 0.6])
        cuts = np.sort(rng.standard_normal((n, 2, 3)) * 0.05
                       + np.array([-0.8, 0.0, 0.9]), axis=-1)
        return {"mu_beta": mu, "cutpoints": cuts,
                "sigma_beta": np.full((n, 2), sigma), "rho": np.zeros(n)}

    def test_zero_heterogeneity_collapses_to_credible(self):
        spec = ModelSpec(family="OBivFC", K=4, n_studies=5)
        params = self._fc_params(4000, seed=1, sigma=0.0)
        s = summarize_accuracy(spec, params, seed=11)
        assert np.max(np.abs(s.se_pred_lo - s.se_lo)) < 0.01
        assert np.max(np.abs(s.se_pred_hi - s.se_hi)) < 0.01
        assert np.max(np.abs(s.sp_pred_lo - s.sp_lo)) < 0.01
        assert np.max(np.abs(s.sp_pred_hi - s.sp_hi)) < 0.01

    def test_width_grows_with_heterogeneity(self):
        spec = ModelSpec(family="OBivFC", K=4, n_studies=5)
        widths = []
        for sigma in (0.05, 0.3, 0.8):
            s = summarize_accuracy(spec, self._fc_params(3000, 1, sigma),
                                   seed=3)
            widths.append(float(np.mean(s.se_pred_hi - s.se_pred_lo)))
        assert widths[0] < widths[1] < widths[2]

    def test_prediction_contains_credible(self):
        spec = ModelSpec(family="OBivFC", K=4, n_studies=5)
        contained = 0
        n_fixtures = 20
        for rep in range(n_fixtures):
            rng = np.random.default_rng(100 + rep)
            n = 2000
            params = {
                "mu_beta": rng.standard_normal((n, 2)) * 0.1
                + np.array([-0.5, 0.7]),
                "cutpoints": np.sort(rng.standard_normal((n, 2, 3)) * 0.07
                                     + np.array([-1.0, 0.0, 1.0]), axis=-1),
                "sigma_beta": 0.05 + 0.3 * rng.random((n, 2)),
                "rho": np.zeros(n)}
            s = summarize_accuracy(spec, params, seed=rep)
            ok = (np.all(s.se_pred_lo <= s.se_lo + 1e-9)
                  and np.all(s.se_pred_hi >= s.se_hi - 1e-9)
                  and np.all(s.sp_pred_lo <= s.sp_lo + 1e-9)
                  and np.all(s.sp_pred_hi >= s.sp_hi - 1e-9))
            contained += ok
        assert contained >= 0.95 * n_fixtures

    @pytest.mark.parametrize("family",
                             ORDINAL_FAMILIES + ["StratBiv"])
    def test_predictive_draws_valid_all_families(self, family):
        spec, params = fitted_like_params(family, K=4, seed=9)
        se, sp = predictive_draws(spec, params, seed=2)
        assert se.shape == sp.shape
        assert np.all((se >= 0) & (se <= 1))
        assert np.all((sp >= 0) & (sp <= 1))
        # same seed, same draws
        se2, _ = predictive_draws(spec, params, seed=2)
        assert np.array_equal(se, se2)

    def test_prediction_requires_sd_slices(self):
        spec = ModelSpec(family="OBivFC", K=3, n_studies=4)
        params = {"mu_beta": np.zeros((5, 2)),
                  "cutpoints": np.zeros((5, 2, 2))}
        with pytest.raises(ValueError, match="missing required slices"):
            predictive_draws(spec, params, seed=0)


class TestHeterogeneityMapping:
    def test_zero_mean_scale_gives_equal_sds(self):
        m = hsroc_to_bivariate(1.0, 0.5, 0.0, 0.2)
        assert m.sigma_dneg / m.sigma_dpos == pytest.approx(1.0)

    def test_ratio_identity(self):
        for mu_g in (-0.4, 0.1, 0.9):
            m = hsroc_to_bivariate(0.8, 0.3, mu_g, 0.15)
            assert m.sigma_dneg / m.sigma_dpos == pytest.approx(
                math.exp(2 * mu_g), rel=1e-12)

    def test_worked_variance_value_against_monte_carlo(self):
        m = hsroc_to_bivariate(1.0, 0.5, 0.0, 0.2)
        assert m.sigma_dpos ** 2 == pytest.approx(0.29, abs=1e-12)
        rng = np.random.default_rng(0)
        beta = 1.0 + 0.5 * rng.standard_normal(10 ** 6)
        gamma = 0.2 * rng.standard_normal(10 ** 6)
        mc_var = float(np.var(beta * np.exp(-gamma)))
        # first-order approximation: agreement to 0.03 at these values
        assert abs(m.sigma_dpos ** 2 - mc_var) < 0.03

    def test_zero_scale_sd_gives_perfect_negative_correlation(self):
        m = hsroc_to_bivariate(1.0, 0.5, 0.3, 0.0)
        assert m.rho == -1.0
        assert not m.rho_clamped

    def test_degenerate_sds_undefined_rho(self):
        m = hsroc_to_bivariate(1.0, 0.0, 0.3, 0.0)
        assert math.isnan(m.rho)

    def test_identity_mapping_at_zero_scale(self):
        m = hsroc_to_bivariate(1.3, 0.4, 0.0, 0.0)
        assert m.sigma_dpos == pytest.approx(0.4)
        assert m.sigma_dneg == pytest.approx(0.4)

    def test_location_and_cutpoint_maps(self):
        m = hsroc_to_bivariate(0.9, 0.2, 0.5, 0.1)
        assert m.mu_dpos == pytest.approx(0.9 * math.exp(-0.5))
        assert m.mu_dneg == pytest.approx(-0.9 * math.exp(0.5))
        # cutpoint multipliers: (non-diseased, diseased) group order
        assert m.cut_scale[0] == pytest.approx(math.exp(0.5))
        assert m.cut_scale[1] == pytest.approx(math.exp(-0.5))

    def test_rho_stays_in_interval_without_clamping(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            m = hsroc_to_bivariate(float(rng.normal(0, 1.5)),
                                   float(rng.uniform(0, 1.2)),
                                   float(rng.normal(0, 0.8)),
                                   float(rng.uniform(0, 0.6)))
            assert -1.0 <= m.rho <= 1.0
            assert not m.rho_clamped

    def test_report_for_bivariate_family(self):
        spec, params = fitted_like_params("OBivFC", seed=2)
        rep = heterogeneity_report(spec, params)
        assert set(rep) == {"sigma_beta_dneg", "sigma_beta_dpos",
                            "rho_beta"}
        for entry in rep.values():
            assert entry["lo"] <= entry["median"] <= entry["hi"]

    def test_report_maps_location_scale_draws(self):
        spec, params = fitted_like_params("OHsrocRC", seed=3)
        rep = heterogeneity_report(spec, params)
        assert "sigma_beta_dpos" in rep and "rho_beta" in rep
        assert rep["rho_clamped_fraction"] == 0.0
        assert -1.0 <= rep["rho_beta"]["median"] <= 1.0


class TestSrocAndAuc:
    def test_k2_three_point_polyline(self):
        pts = sroc_points([0.5], [0.5])
        assert pts.tolist() == [[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]]

    def test_chance_diagonal_auc_exact(self):
        assert auc_from_curve([0.5], [0.5]) == 0.5

    def test_perfect_test_auc_exact(self):
        assert auc_from_curve([1.0], [1.0]) == 1.0

    def test_hand_trapezoid(self):
        se = np.array([0.9, 0.6])
        sp = np.array([0.5, 0.8])
        manual = 0.2 * 0.3 + 0.3 * (0.6 + 0.9) / 2 + 0.5 * (0.9 + 1.0) / 2
        assert abs(auc_from_curve(se, sp) - manual) < 1e-12

    def test_duplicate_x_keeps_max_se(self):
        pts = sroc_points([0.6, 0.8], [0.7, 0.7])
        assert pts.shape == (3, 2)
        assert pts[1, 1] == 0.8

    def test_points_sorted_with_endpoints(self):
        rng = np.random.default_rng(5)
        se = rng.random(6)
        sp = rng.random(6)
        pts = sroc_points(se, sp)
        assert np.all(np.diff(pts[:, 0]) >= 0)
        assert pts[0].tolist() == [0.0, 0.0]
        assert pts[-1].tolist() == [1.0, 1.0]

    def test_auc_invariant_to_threshold_relabeling(self):
        rng = np.random.default_rng(8)
        se = np.sort(rng.random(5))[::-1]
        sp = np.sort(rng.random(5))
        a = auc_from_curve(se, sp)
        perm = rng.permutation(5)
        b = auc_from_curve(se[perm], sp[perm])
        assert a == pytest.approx(b, abs=1e-15)

    def test_auc_summary_structure(self):
        spec, params = fitted_like_params("OBivFC", seed=6)
        out = auc_summary(spec, params, seed=1)
        assert out["lo"] <= out["median"] <= out["hi"]
        assert 0.0 <= out["pred_lo"] <= out["pred_hi"] <= 1.0


class TestSummaryOutputs:
    def test_summary_bounds_ordered(self):
        spec, params = fitted_like_params("OHsrocFC", seed=10)
        s = summarize_accuracy(spec, params, seed=4)
        assert np.all(s.se_lo <= s.se_median)
        assert np.all(s.se_median <= s.se_hi)
        assert np.all(s.sp_lo <= s.sp_median)
        assert np.all(s.sp_median <= s.sp_hi)
        assert s.thresholds == (1, 2, 3)

    def test_summary_cutpoints_rc(self):
        spec, params = fitted_like_params("OBivRC", seed=11)
        cuts = summary_cutpoints(spec, params)
        assert cuts["median"].shape == (2, 3)
        assert np.all(cuts["lo"] <= cuts["median"])
        assert np.all(np.diff(cuts["median"], axis=-1) > 0)

    def test_csv_layout(self, tmp_path):
        spec, params = fitted_like_params("OBivFC", seed=12)
        s = summarize_accuracy(spec, params, seed=0)
        path = tmp_path / "accuracy.csv"
        write_accuracy_csv(s, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "threshold,quantity,estimate,lo,hi,pred_lo,pred_hi"
        assert len(lines) == 1 + 2 * len(s.thresholds)
        cells = lines[1].split(",")
        assert cells[1] == "Se"
        assert float(cells[2]) == s.se_median[0]

    def test_csv_without_prediction_leaves_blanks(self, tmp_path):
        spec, params = fitted_like_params("JonesFC", seed=13)
        s = summarize_accuracy(spec, params, include_prediction=False)
        assert not s.has_prediction
        path = tmp_path / "accuracy.csv"
        write_accuracy_csv(s, path)
        first = path.read_text().strip().splitlines()[1].split(",")
        assert first[5] == "" and first[6] == ""
