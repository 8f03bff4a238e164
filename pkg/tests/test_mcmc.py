"""Sampler tests: integrator properties, adaptation schedule,
sampling accuracy on known targets, diagnostics, serialization."""

import math

import numpy as np
import pytest

from ordmeta.mcmc import (DualAveraging, Metric, PosteriorDraws,
                          SamplerConfig, WindowEstimator, ess_bulk,
                          ess_mean, ess_tail, leapfrog, nuts_transition,
                          read_draws, sample, split_rhat, warmup_schedule,
                          write_csv, write_draws)
from ordmeta.mcmc.io import FORMAT_VERSION, MAGIC


def std_normal_target(u):
    return -0.5 * float(u @ u), -u


def make_gaussian_target(cov):
    prec = np.linalg.inv(cov)

    def target(u):
        return -0.5 * float(u @ prec @ u), -prec @ u

    return target


class TestLeapfrog:
    def test_reversible_diag_metric(self):
        rng = np.random.default_rng(3)
        metric = Metric(np.array([0.7, 1.3, 2.1]), dense=False)
        theta0 = rng.standard_normal(3)
        r0 = metric.sample_momentum(rng)
        _, grad0 = std_normal_target(theta0)
        theta, r, grad = theta0.copy(), r0.copy(), grad0.copy()
        for _ in range(25):
            theta, r, grad, _ = leapfrog(std_normal_target, theta, r,
                                         grad, 0.05, metric)
        r = -r
        for _ in range(25):
            theta, r, grad, _ = leapfrog(std_normal_target, theta, r,
                                         grad, 0.05, metric)
        assert np.max(np.abs(theta - theta0)) < 1e-10
        assert np.max(np.abs(-r - r0)) < 1e-10

    def test_reversible_dense_metric(self):
        rng = np.random.default_rng(11)
        cov = np.array([[1.5, 0.4], [0.4, 0.9]])
        metric = Metric(cov, dense=True)
        target = make_gaussian_target(np.array([[2.0, -0.3], [-0.3, 0.5]]))
        theta0 = rng.standard_normal(2)
        r0 = metric.sample_momentum(rng)
        _, grad0 = target(theta0)
        theta, r, grad = theta0.copy(), r0.copy(), grad0.copy()
        for _ in range(40):
            theta, r, grad, _ = leapfrog(target, theta, r, grad, 0.03,
                                         metric)
        r = -r
        for _ in range(40):
            theta, r, grad, _ = leapfrog(target, theta, r, grad, 0.03,
                                         metric)
        assert np.max(np.abs(theta - theta0)) < 1e-10
        assert np.max(np.abs(-r - r0)) < 1e-10

    def test_energy_conserved_at_small_step(self):
        rng = np.random.default_rng(5)
        metric = Metric(np.ones(4), dense=False)
        theta = rng.standard_normal(4)
        r = metric.sample_momentum(rng)
        logp, grad = std_normal_target(theta)
        h0 = -logp + metric.kinetic(r)
        worst = 0.0
        for _ in range(200):
            theta, r, grad, logp = leapfrog(std_normal_target, theta, r,
                                            grad, 1e-3, metric)
            worst = max(worst, abs(-logp + metric.kinetic(r) - h0))
        assert worst < 1e-4

    def test_single_step_matches_hand_update(self):
        # quadratic target: grad = -theta, so the update is explicit
        metric = Metric(np.ones(2), dense=False)
        theta = np.array([1.0, -2.0])
        r = np.array([0.3, 0.4])
        eps = 0.1
        _, grad = std_normal_target(theta)
        t1, r1, _, _ = leapfrog(std_normal_target, theta, r, grad, eps,
                                metric)
        r_half = r - 0.5 * eps * theta
        t_expected = theta + eps * r_half
        r_expected = r_half - 0.5 * eps * t_expected
        assert np.allclose(t1, t_expected, atol=1e-14)
        assert np.allclose(r1, r_expected, atol=1e-14)


class TestTransition:
    def test_keeps_state_valid(self):
        rng = np.random.default_rng(9)
        metric = Metric(np.ones(3), dense=False)
        theta = np.zeros(3)
        logp, grad = std_normal_target(theta)
        for _ in range(50):
            theta, logp, grad, st = nuts_transition(
                std_normal_target, theta, logp, grad, 0.5, metric, 10, rng)
            assert np.isfinite(logp)
            assert np.isfinite(st.energy)
            assert 0.0 <= st.accept_stat <= 1.0
            assert st.n_leapfrog >= 1

    def test_huge_step_size_diverges(self):
        rng = np.random.default_rng(2)
        cov = np.diag([1e-6, 1e-6])
        target = make_gaussian_target(cov)
        metric = Metric(np.ones(2), dense=False)
        theta = np.array([1e-3, -1e-3])
        logp, grad = target(theta)
        flagged = 0
        for _ in range(20):
            _, _, _, st = nuts_transition(target, theta, logp, grad, 5.0,
                                          metric, 10, rng)
            flagged += st.divergent
        assert flagged == 20

    def test_treedepth_cap_is_respected(self):
        rng = np.random.default_rng(4)
        metric = Metric(np.ones(2), dense=False)
        theta = np.zeros(2)
        logp, grad = std_normal_target(theta)
        saw_hit = False
        for _ in range(30):
            theta, logp, grad, st = nuts_transition(
                std_normal_target, theta, logp, grad, 0.01, metric, 2, rng)
            assert st.depth <= 2
            assert st.n_leapfrog <= 2 ** 2 + 2
            saw_hit = saw_hit or st.treedepth_hit
        assert saw_hit


class TestAdaptationPieces:
    def test_warmup_schedule_phases(self):
        sched = warmup_schedule(1000)
        assert sched.init_end == 150
        assert sched.term_start == 900
        widths = [end - start for start, end in sched.windows]
        assert widths == [25, 50, 100, 200, 375]
        assert sched.windows[0][0] == 150
        assert sched.windows[-1][1] == 900
        # windows tile the middle phase exactly
        for (a, b), (c, d) in zip(sched.windows, sched.windows[1:]):
            assert b == c

    def test_short_warmup_disables_metric_windows(self):
        sched = warmup_schedule(30)
        assert sched.windows == ()
        assert sched.init_end == 30

    def test_window_closing_lookup(self):
        sched = warmup_schedule(1000)
        assert sched.window_closing_at(174) == (150, 175)
        assert sched.window_closing_at(173) is None
        assert sched.window_closing_at(899) == (525, 900)

    def test_dual_averaging_pushes_step_size(self):
        up = DualAveraging.from_step_size(0.5, target=0.8)
        down = DualAveraging.from_step_size(0.5, target=0.8)
        for _ in range(100):
            up.update(1.0)     # always accepting: step size should grow
            down.update(0.0)   # always rejecting: it should shrink
        assert up.averaged_step_size > 0.5
        assert down.averaged_step_size < 0.5

    def test_window_estimator_regularization(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((40, 3)) * np.array([1.0, 2.0, 0.5])
        est = WindowEstimator(3, dense=False)
        for row in x:
            est.push(row)
        metric = est.estimate()
        n = 40
        expected = (n / (n + 5)) * np.var(x, axis=0, ddof=1) \
            + 1e-3 * (5 / (n + 5))
        assert np.allclose(metric.var, expected, rtol=1e-12)

    def test_window_estimator_dense(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((60, 2))
        x[:, 1] = 0.9 * x[:, 0] + 0.1 * x[:, 1]
        est = WindowEstimator(2, dense=True)
        for row in x:
            est.push(row)
        metric = est.estimate()
        n = 60
        expected = (n / (n + 5)) * np.cov(x, rowvar=False, ddof=1) \
            + 1e-3 * (5 / (n + 5)) * np.eye(2)
        assert np.allclose(metric.cov, expected, rtol=1e-12)

    def test_metric_momentum_and_kinetic(self):
        rng = np.random.default_rng(21)
        var = np.array([0.5, 2.0])
        metric = Metric(var, dense=False)
        draws = np.stack([metric.sample_momentum(rng) for _ in range(4000)])
        assert np.allclose(draws.var(axis=0), 1.0 / var, rtol=0.15)
        r = np.array([1.0, -2.0])
        assert metric.kinetic(r) == pytest.approx(
            0.5 * (var[0] * 1.0 + var[1] * 4.0))


class TestSampling:
    def test_standard_normal_five_dim(self):
        cfg = SamplerConfig(n_chains=4, n_warmup=1000, n_iter=1000,
                            seed=42)
        out = sample(std_normal_target, cfg, np.full(5, 0.5))
        flat = out.flat()
        assert flat.shape == (4000, 5)
        assert np.all(np.abs(flat.mean(axis=0)) < 0.05)
        assert np.all(np.abs(flat.var(axis=0) - 1.0) < 0.1)
        diag = out.diagnostics()
        assert np.all(diag["rhat"] < 1.01)
        assert np.all(diag["ess_bulk"] > 400)

    def test_seed_fixed_runs_are_bit_identical(self):
        cfg = SamplerConfig(n_chains=2, n_warmup=200, n_iter=200, seed=99)
        a = sample(std_normal_target, cfg, np.zeros(3))
        b = sample(std_normal_target, cfg, np.zeros(3))
        assert np.array_equal(a.draws, b.draws)
        assert np.array_equal(a.energy, b.energy)
        assert np.array_equal(a.step_size, b.step_size)

    def test_threaded_run_matches_sequential(self):
        cfg = SamplerConfig(n_chains=4, n_warmup=150, n_iter=150, seed=5)
        a = sample(std_normal_target, cfg, np.zeros(3), threads=1)
        b = sample(std_normal_target, cfg, np.zeros(3), threads=4)
        assert np.array_equal(a.draws, b.draws)
        assert np.array_equal(a.divergent, b.divergent)

    def test_different_seeds_differ(self):
        cfg1 = SamplerConfig(n_chains=1, n_warmup=100, n_iter=100, seed=1)
        cfg2 = SamplerConfig(n_chains=1, n_warmup=100, n_iter=100, seed=2)
        a = sample(std_normal_target, cfg1, np.zeros(2))
        b = sample(std_normal_target, cfg2, np.zeros(2))
        assert not np.array_equal(a.draws, b.draws)

    def test_dense_metric_handles_correlation(self):
        cov = np.array([[1.0, 0.95], [0.95, 1.0]])
        target = make_gaussian_target(cov)
        cfg = SamplerConfig(n_chains=4, n_warmup=1000, n_iter=1000,
                            metric="dense", seed=7)
        out = sample(target, cfg, np.zeros(2))
        diag = out.diagnostics()
        assert np.all(diag["rhat"] < 1.01)
        sample_cov = np.cov(out.flat().T)
        assert np.allclose(sample_cov, cov, atol=0.12)
        # learned metric should absorb most of the correlation
        learned = out.metric[0]
        corr = learned[0, 1] / math.sqrt(learned[0, 0] * learned[1, 1])
        assert corr > 0.8

    def test_acceptance_tracks_target(self):
        cfg = SamplerConfig(n_chains=2, n_warmup=800, n_iter=400,
                            adapt_delta=0.8, seed=31)
        out = sample(std_normal_target, cfg, np.zeros(4))
        assert 0.65 < out.accept_stat.mean() < 0.97

    def test_nonfinite_init_is_an_error(self):
        def broken(u):
            return np.nan, u

        cfg = SamplerConfig(n_chains=1, n_warmup=10, n_iter=10)
        with pytest.raises(ValueError, match="non-finite"):
            sample(broken, cfg, np.zeros(2))

    def test_mostly_divergent_run_warns(self):
        # gradient deliberately inconsistent with the density: the
        # integrator's energy error explodes on nearly every transition
        def lying(u):
            return -0.5e9 * float(u @ u), -u

        cfg = SamplerConfig(n_chains=1, n_warmup=0, n_iter=40, seed=3)
        with pytest.warns(RuntimeWarning, match="divergent"):
            out = sample(lying, cfg, np.full(2, 1e-4))
        assert out.divergent.mean() > 0.5
        assert out.warnings

    def test_per_chain_inits(self):
        cfg = SamplerConfig(n_chains=3, n_warmup=100, n_iter=50, seed=13)
        inits = np.array([[0.0, 0.0], [1.0, -1.0], [-2.0, 2.0]])
        out = sample(std_normal_target, cfg, inits)
        assert out.draws.shape == (3, 50, 2)
        with pytest.raises(ValueError, match="initial points"):
            sample(std_normal_target, cfg, inits[:2])

    def test_param_names_attach_to_columns(self):
        cfg = SamplerConfig(n_chains=1, n_warmup=50, n_iter=30, seed=17)
        out = sample(std_normal_target, cfg, np.zeros(2),
                     param_names=["a", "b"])
        assert out.param_names == ("a", "b")
        assert out.get("b").shape == (1, 30)
        with pytest.raises(KeyError):
            out.get("c")
        with pytest.raises(ValueError, match="names"):
            sample(std_normal_target, cfg, np.zeros(2), param_names=["a"])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(n_chains=0)
        with pytest.raises(ValueError):
            SamplerConfig(adapt_delta=1.0)
        with pytest.raises(ValueError):
            SamplerConfig(metric="full")
        with pytest.raises(ValueError, match="unknown sampler options"):
            SamplerConfig.from_dict({"n_chains": 2, "step": 0.1})
        rt = SamplerConfig.from_dict(SamplerConfig(seed=5).to_dict())
        assert rt == SamplerConfig(seed=5)


class TestDiagnostics:
    def test_iid_chains_look_converged(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 1000))
        r = split_rhat(x)
        assert 1.0 <= r < 1.01
        assert ess_bulk(x) > 2000
        assert ess_tail(x) > 1000

    def test_offset_chains_flagged(self):
        rng = np.random.default_rng(1)
        base = rng.standard_normal(500)
        x = np.stack([base - 3, base, base + 3, base + 6])
        assert split_rhat(x) > 1.1

    def test_constant_parameter_markers(self):
        x = np.full((4, 300), 2.5)
        assert math.isnan(split_rhat(x))
        assert math.isnan(ess_bulk(x))
        assert math.isnan(ess_tail(x))

    def test_single_chain_has_ess_but_no_rhat(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 1000))
        assert math.isnan(split_rhat(x))
        assert ess_bulk(x) > 400
        assert ess_tail(x) > 200

    def test_autocorrelated_chain_shrinks_ess(self):
        rng = np.random.default_rng(6)
        phi = 0.9
        n = 2000
        x = np.zeros((2, n))
        for c in range(2):
            innov = rng.standard_normal(n)
            for i in range(1, n):
                x[c, i] = phi * x[c, i - 1] + math.sqrt(1 - phi ** 2) \
                    * innov[i]
        total = x.size
        assert ess_bulk(x) < 0.15 * total
        assert ess_mean(x) < 0.15 * total

    def test_superefficient_ess_capped(self):
        # perfectly antithetic draws: ESS estimate exceeds the sample
        # size but must respect the log10 cap
        rng = np.random.default_rng(7)
        half = rng.standard_normal(500)
        seq = np.empty(1000)
        seq[0::2] = half
        seq[1::2] = -half
        x = np.stack([seq, -seq])
        total = x.size
        assert ess_bulk(x) <= total * np.log10(total) + 1e-6

    def test_diagnostics_table_from_sampler(self):
        cfg = SamplerConfig(n_chains=2, n_warmup=150, n_iter=100, seed=23)
        out = sample(std_normal_target, cfg, np.zeros(2),
                     param_names=["x", "y"])
        diag = out.diagnostics()
        assert diag["param"] == ["x", "y"]
        assert diag["rhat"].shape == (2,)
        assert np.all(np.isfinite(diag["ess_bulk"]))


class TestSerialization:
    def _small_run(self):
        cfg = SamplerConfig(n_chains=2, n_warmup=60, n_iter=40, seed=19)
        return sample(std_normal_target, cfg, np.zeros(3),
                      param_names=["alpha", "beta[0]", "beta[1]"])

    def test_binary_round_trip_bit_identical(self, tmp_path):
        out = self._small_run()
        path = tmp_path / "draws.bin"
        write_draws(out, path)
        back = read_draws(path)
        assert np.array_equal(back.draws, out.draws)
        assert np.array_equal(back.energy, out.energy)
        assert np.array_equal(back.accept_stat, out.accept_stat)
        assert np.array_equal(back.divergent, out.divergent)
        assert np.array_equal(back.treedepth_hit, out.treedepth_hit)
        assert np.array_equal(back.n_leapfrog, out.n_leapfrog)
        assert np.array_equal(back.step_size, out.step_size)
        assert np.array_equal(back.metric, out.metric)
        assert back.param_names == out.param_names
        assert back.config == out.config
        assert back.warnings == out.warnings

    def test_dense_metric_round_trip(self, tmp_path):
        cfg = SamplerConfig(n_chains=2, n_warmup=120, n_iter=30,
                            metric="dense", seed=29)
        out = sample(std_normal_target, cfg, np.zeros(2))
        path = tmp_path / "draws.bin"
        write_draws(out, path)
        back = read_draws(path)
        assert back.metric_kind == "dense"
        assert back.metric.shape == (2, 2, 2)
        assert np.array_equal(back.metric, out.metric)

    def test_magic_and_version_checked(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            read_draws(path)
        out = self._small_run()
        good = tmp_path / "draws.bin"
        write_draws(out, good)
        blob = bytearray(good.read_bytes())
        blob[4:8] = (FORMAT_VERSION + 1).to_bytes(4, "little")
        bad = tmp_path / "future.bin"
        bad.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="version"):
            read_draws(bad)
        assert good.read_bytes()[:4] == MAGIC

    def test_csv_export(self, tmp_path):
        out = self._small_run()
        path = tmp_path / "draws.csv"
        write_csv(out, path)
        lines = path.read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header[:2] == ["chain", "iteration"]
        assert header[-3:] == ["alpha", "beta[0]", "beta[1]"]
        assert len(lines) == 1 + out.n_chains * out.n_iter
        # repr round trip: the first draw is recoverable exactly
        first = lines[1].split(",")
        assert float(first[header.index("alpha")]) == out.draws[0, 0, 0]
