"""Command-line surface: exit codes, outputs, manifests, reruns.

MCMC-backed commands run with one short chain on a small dataset; the
expensive runs are shared through module-scoped fixtures.
"""

import dataclasses
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from ordmeta import cli
from ordmeta import simulation as sim
from ordmeta.data import MADataset, NMADataset, write_ma, write_nma

SAMPLER = ["--chains", "1", "--warmup", "150", "--iter", "150"]


def small_profile(K=4):
    base = sim.load_profile(Path(sim.__file__).parent / "configs"
                            / "gad2.json")
    return dataclasses.replace(base, K=K, miss_rate=0.0,
                               phi=tuple([1.0 / K] * K), n_range=(80, 200))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliwork")
    prof = small_profile()
    d1 = sim.generate_dataset(
        sim.SimScenario(profile=prof, dgm_family="OBivFC", n_studies=8,
                        seed=11), rep_seed=0)
    d1 = sim.apply_missingness(d1, 0.3, rep_seed=[11, 1])
    write_ma(d1, root / "ma.json")

    d2 = sim.generate_dataset(
        sim.SimScenario(profile=prof, dgm_family="OBivFC", n_studies=8,
                        seed=12), rep_seed=0)
    indicator = np.array([[s % 3 != 0, s % 3 != 1] for s in range(8)],
                         dtype=np.int64)

    def subset(ds, keep):
        idx = [i for i in range(8) if keep[i]]
        return MADataset(K=ds.K, studies=[ds.studies[i] for i in idx],
                         study_labels=[str(i) for i in idx])

    nd = NMADataset(tests=[subset(d1, indicator[:, 0]),
                           subset(d2, indicator[:, 1])],
                    indicator=indicator, test_names=["alpha", "beta"])
    write_nma(nd, root / "nma.json")

    with open(root / "scenario.json", "w") as fh:
        json.dump({"schema_version": 1, "profile": "gad2",
                   "dgm_family": "OBivFC", "n_studies": 5, "seed": 3,
                   "models": ["OBivFC"], "max_reps": 1,
                   "mcse_target_pp": "inf",
                   "sampler": {"chains": 1, "warmup": 150, "iter": 150}},
                  fh)
    with open(root / "nma_model.json", "w") as fh:
        json.dump({"schema_version": 1, "family": "OBivFC"}, fh)
    with open(root / "scenarios.json", "w") as fh:
        json.dump({"schema_version": 1, "scenarios": [
            {"name": "typical", "x": {"alpha": [1.0], "beta": [1.0]}},
            {"name": "split", "x": {"alpha": [[1.0], [1.0]],
                                    "beta": [1.0]}}]}, fh)
    return root


@pytest.fixture(scope="module")
def fit_run(work):
    out = work / "fit1"
    code = cli.main(["fit", "--data", str(work / "ma.json"),
                     "--model", "OBivFC", "--seed", "5",
                     *SAMPLER, "--out", str(out)])
    return code, out


@pytest.fixture(scope="module")
def simulate_run(work):
    out = work / "sim1"
    code = cli.main(["simulate", "--config", str(work / "scenario.json"),
                     "--out", str(out)])
    return code, out


@pytest.fixture(scope="module")
def two_kfold_results(work):
    paths = []
    for fam in ("OBivFC", "OHsrocFC"):
        out = work / f"kf_{fam}"
        code = cli.main(["kfold", "--data", str(work / "ma.json"),
                         "--model", fam, "--folds", "2",
                         "--m-effects", "20", "--min-ess", "1",
                         "--seed", "2", *SAMPLER, "--out", str(out)])
        assert code == 0
        paths.append(out / f"kfold_{fam}.json")
    return paths


@pytest.fixture(scope="module")
def pairwise_run(work):
    out = work / "pw"
    code = cli.main(["pairwise", "--data", str(work / "nma.json"),
                     "--model", str(work / "nma_model.json"),
                     "--pairs", "0:1", "0:0", "--seed", "7",
                     *SAMPLER, "--out", str(out)])
    return code, out


def read_manifest(out):
    with open(out / "manifest.json") as fh:
        return json.load(fh)


class TestParsing:
    def test_version_exits_zero(self, capsys):
        assert cli.main(["--version"]) == 0
        assert capsys.readouterr().out.strip()

    def test_unknown_command_exits_two(self, capsys):
        assert cli.main(["frobnicate"]) == 2

    def test_missing_required_flag_exits_two(self, capsys):
        assert cli.main(["fit", "--model", "OBivFC"]) == 2

    def test_unknown_family_exits_two(self, work, capsys):
        code = cli.main(["fit", "--data", str(work / "ma.json"),
                         "--model", "NotAFamily", "--out",
                         str(work / "x")])
        assert code == 2
        assert "neither a family" in capsys.readouterr().err

    def test_missing_data_file_exits_two(self, work, capsys):
        code = cli.main(["fit", "--data", str(work / "nope.json"),
                         "--model", "OBivFC", "--out", str(work / "x")])
        assert code == 2

    def test_bad_threads_env_exits_two(self, work, capsys, monkeypatch):
        monkeypatch.setenv("ORDMETA_THREADS", "wat")
        code = cli.main(["fit", "--data", str(work / "ma.json"),
                         "--model", "OBivFC", "--out", str(work / "x")])
        assert code == 2
        assert "ORDMETA_THREADS" in capsys.readouterr().err

    def test_model_config_with_unknown_keys_exits_two(self, work, capsys):
        bad = work / "badmodel.json"
        bad.write_text(json.dumps({"schema_version": 1,
                                   "family": "OBivFC", "wat": 1}))
        code = cli.main(["fit", "--data", str(work / "ma.json"),
                         "--model", str(bad), "--out", str(work / "x")])
        assert code == 2
        assert "unknown keys" in capsys.readouterr().err

    def test_bad_priors_file_exits_two(self, work, capsys):
        bad = work / "badpriors.json"
        bad.write_text(json.dumps({"schema_version": 1, "nope": 2.0}))
        code = cli.main(["fit", "--data", str(work / "ma.json"),
                         "--model", "OBivFC", "--priors", str(bad),
                         "--out", str(work / "x")])
        assert code == 2


class TestHelpers:
    def test_parse_target_accepts_inf_token(self):
        assert cli._parse_target("inf") == float("inf")
        assert cli._parse_target(0.25) == 0.25
        with pytest.raises(cli.CliConfigError):
            cli._parse_target("wat")

    def test_config_hash_stable_and_input_sensitive(self, tmp_path):
        f = tmp_path / "a.json"
        f.write_text("{}")
        h1 = cli._config_hash({"x": 1}, [f])
        h2 = cli._config_hash({"x": 1}, [f])
        assert h1 == h2 and len(h1) == 64
        assert cli._config_hash({"x": 2}, [f]) != h1
        f.write_text("{ }")
        assert cli._config_hash({"x": 1}, [f]) != h1

    def test_resolve_profile_packaged_and_relative(self, tmp_path):
        prof, path = cli._resolve_profile("gad2", tmp_path)
        assert prof.name == "GAD2"
        copied = tmp_path / "mine.json"
        copied.write_text(path.read_text())
        prof2, _ = cli._resolve_profile("mine.json", tmp_path)
        assert prof2 == prof
        with pytest.raises(cli.CliConfigError):
            cli._resolve_profile("missing_profile", tmp_path)

    def test_flat_names_cover_layout(self, work):
        from ordmeta.data import load_ma
        from ordmeta.models import ModelSpec, build_model
        data = load_ma(work / "ma.json")
        model = build_model(ModelSpec(K=data.K, n_studies=data.n_studies,
                                      family="OBivFC"), data)
        names = cli._flat_names(model.layout)
        assert len(names) == len(set(names)) == model.layout.size
        assert "mu_beta[0]" in names

    def test_parse_pairs(self):
        assert cli._parse_pairs(None, 3) is None
        assert cli._parse_pairs(["0:1", "2:2"], 3) == [(0, 1), (2, 2)]
        with pytest.raises(cli.CliConfigError, match="look like A:B"):
            cli._parse_pairs(["x"], 3)
        with pytest.raises(cli.CliConfigError, match="out of range"):
            cli._parse_pairs(["0:9"], 3)


class TestFit:
    OUTPUTS = ["draws.csv", "diagnostics.csv", "sampler.json",
               "accuracy.csv", "heterogeneity.json", "sroc.svg",
               "thresholds.svg", "manifest.json"]

    def test_exit_zero_and_outputs(self, fit_run):
        code, out = fit_run
        assert code == 0
        for name in self.OUTPUTS:
            assert (out / name).is_file(), name

    def test_manifest_lists_every_output(self, fit_run):
        _, out = fit_run
        doc = read_manifest(out)
        on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
        assert set(doc["outputs"]) == on_disk
        assert doc["command"] == "fit"
        assert doc["seed"] == 5
        assert len(doc["config_hash"]) == 64
        int(doc["config_hash"], 16)
        assert doc["versions"]["ordmeta"]

    def test_sampler_report_shape(self, fit_run):
        _, out = fit_run
        with open(out / "sampler.json") as fh:
            rep = json.load(fh)
        assert rep["schema_version"] == 1
        assert isinstance(rep["n_divergent"], int)
        assert rep["max_rhat"] is None or rep["max_rhat"] > 0.8
        assert rep["config"]["n_chains"] == 1

    def test_svgs_well_formed(self, fit_run):
        _, out = fit_run
        for name in ("sroc.svg", "thresholds.svg"):
            ET.fromstring((out / name).read_text())

    def test_rerun_same_seed_is_byte_identical(self, work, fit_run):
        _, first = fit_run
        out = work / "fit_again"
        code = cli.main(["fit", "--data", str(work / "ma.json"),
                         "--model", "OBivFC", "--seed", "5",
                         *SAMPLER, "--out", str(out)])
        assert code == 0
        for name in ("accuracy.csv", "draws.csv", "sroc.svg"):
            assert (out / name).read_bytes() == \
                (first / name).read_bytes(), name
        assert read_manifest(out)["config_hash"] == \
            read_manifest(first)["config_hash"]

    def test_json_format_writes_accuracy_json(self, work, fit_run):
        _, first = fit_run
        out = work / "fit_json"
        code = cli.main(["fit", "--data", str(work / "ma.json"),
                         "--model", "OBivFC", "--seed", "5", "--format",
                         "json", *SAMPLER, "--out", str(out)])
        assert code == 0
        with open(out / "accuracy.json") as fh:
            doc = json.load(fh)
        assert set(doc) == {"thresholds", "se", "sp", "se_pred", "sp_pred"}
        assert len(doc["se"]["median"]) == len(doc["thresholds"])
        assert not (out / "accuracy.csv").exists()
        assert read_manifest(out)["config_hash"] != \
            read_manifest(first)["config_hash"]


class TestSimulate:
    def test_exit_zero_and_outputs(self, simulate_run, capsys):
        code, out = simulate_run
        assert code == 0
        for name in ("results.csv", "table.txt", "manifest.json"):
            assert (out / name).is_file(), name

    def test_results_csv_layout(self, simulate_run):
        _, out = simulate_run
        lines = (out / "results.csv").read_text().splitlines()
        assert lines[0] == ("dgm,model,n_studies,metric,quantity,value,"
                            "mcse,n_sim")
        assert len(lines) > 10
        assert all(",OBivFC," in ln for ln in lines[1:])

    def test_table_is_the_formatted_report(self, simulate_run):
        _, out = simulate_run
        table = (out / "table.txt").read_text()
        assert "RMSE Sp" in table and "OBivFC/GAD2" in table

    def test_rerun_is_byte_identical(self, work, simulate_run):
        _, first = simulate_run
        out = work / "sim2"
        code = cli.main(["simulate", "--config",
                         str(work / "scenario.json"), "--out", str(out)])
        assert code == 0
        assert (out / "results.csv").read_bytes() == \
            (first / "results.csv").read_bytes()

    def test_unknown_scenario_key_exits_two(self, work, capsys):
        bad = work / "badscenario.json"
        bad.write_text(json.dumps({"schema_version": 1, "profile": "gad2",
                                   "dgm_family": "OBivFC", "n_studies": 5,
                                   "models": ["OBivFC"], "wat": 1}))
        assert cli.main(["simulate", "--config", str(bad), "--out",
                         str(work / "x")]) == 2
        assert "unknown keys" in capsys.readouterr().err

    def test_bad_target_token_exits_two(self, work, capsys):
        bad = work / "badtarget.json"
        bad.write_text(json.dumps({"schema_version": 1, "profile": "gad2",
                                   "dgm_family": "OBivFC", "n_studies": 5,
                                   "models": ["OBivFC"],
                                   "mcse_target_pp": "soon"}))
        assert cli.main(["simulate", "--config", str(bad), "--out",
                         str(work / "x")]) == 2


class TestKfoldCompare:
    def test_kfold_result_files(self, two_kfold_results):
        for path in two_kfold_results:
            assert path.is_file()
            with open(path) as fh:
                doc = json.load(fh)
            assert doc["model"] in ("OBivFC", "OHsrocFC")
            assert doc["schema_version"] == 1

    def test_compare_ranks_and_writes_table(self, work,
                                            two_kfold_results, capsys):
        out = work / "cmp"
        code = cli.main(["compare", *map(str, two_kfold_results), "--min-ess",
                         "1", "--out", str(out)])
        assert code == 0
        table = (out / "comparison.txt").read_text()
        assert "Rank" in table and "[Best]" in table
        lines = (out / "comparison.csv").read_text().splitlines()
        assert lines[0].startswith("rank,model,elpd,se,delta_elpd")
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "1" and float(first[4]) == 0.0
        assert "Rank" in capsys.readouterr().out

    def test_compare_needs_two_files(self, work, two_kfold_results,
                                     capsys):
        assert cli.main(["compare", str(two_kfold_results[0]), "--out",
                         str(work / "x")]) == 2

    def test_compare_missing_file_exits_two(self, work, capsys):
        assert cli.main(["compare", str(work / "a.json"),
                         str(work / "b.json"), "--out",
                         str(work / "x")]) == 2

    def test_kfold_bad_fold_count_exits_two(self, work, capsys):
        assert cli.main(["kfold", "--data", str(work / "ma.json"),
                         "--model", "OBivFC", "--folds", "99", "--out",
                         str(work / "x")]) == 2


class TestNetwork:
    def test_outputs_and_forest(self, pairwise_run):
        code, out = pairwise_run
        assert code == 0
        ET.fromstring((out / "forest.svg").read_text())
        assert set(read_manifest(out)["outputs"]) == {"pairwise.csv",
                                                      "forest.svg"}

    def test_self_pair_rows_are_exact_zero(self, pairwise_run):
        _, out = pairwise_run
        lines = (out / "pairwise.csv").read_text().splitlines()
        assert lines[0] == ("test_a,test_b,threshold_a,threshold_b,"
                            "quantity,median,lo,hi")
        self_rows = [ln for ln in lines[1:]
                     if ln.startswith("alpha,alpha")]
        cross_rows = [ln for ln in lines[1:]
                      if ln.startswith("alpha,beta")]
        assert self_rows and cross_rows
        for ln in self_rows:
            assert ln.split(",")[5:] == ["0.0", "0.0", "0.0"]

    def test_bad_pair_exits_two_before_sampling(self, work, capsys):
        assert cli.main(["pairwise", "--data", str(work / "nma.json"),
                         "--model", str(work / "nma_model.json"),
                         "--pairs", "9:9", "--out", str(work / "x")]) == 2
        assert "out of range" in capsys.readouterr().err

    def test_baseline_outputs(self, work, capsys):
        out = work / "bl"
        code = cli.main(["baseline", "--data", str(work / "nma.json"),
                         "--model", str(work / "nma_model.json"),
                         "--scenarios", str(work / "scenarios.json"),
                         "--seed", "7", *SAMPLER, "--out", str(out)])
        assert code == 0
        lines = (out / "baseline.csv").read_text().splitlines()
        assert lines[0] == "scenario,test,quantity,median,lo,hi"
        scenarios = {ln.split(",")[0] for ln in lines[1:]}
        assert scenarios == {"typical", "split"}
        quantities = {ln.split(",")[2] for ln in lines[1:]}
        assert "auc" in quantities and "se@1" in quantities

    def test_baseline_bad_scenarios_exits_two_before_sampling(
            self, work, capsys):
        bad = work / "badscens.json"
        bad.write_text(json.dumps({"schema_version": 1, "scenarios": [
            {"name": "x", "x": {"alpha": [1.0]}}]}))
        assert cli.main(["baseline", "--data", str(work / "nma.json"),
                         "--model", str(work / "nma_model.json"),
                         "--scenarios", str(bad), "--out",
                         str(work / "x")]) == 2
        assert "missing tests" in capsys.readouterr().err
