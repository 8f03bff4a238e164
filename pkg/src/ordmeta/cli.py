"""Batch command surface.

Subcommands: ``fit`` (single-test meta-analysis), ``simulate`` (the
replication laboratory), ``kfold`` (cross-validated ELPD for one model),
``compare`` (rank stored K-fold results), ``pairwise`` (network
between-test differences) and ``baseline`` (network summaries recomputed
at new covariate settings).  Every run writes its outputs plus a
``manifest.json`` naming them, with a content hash of the resolved
inputs so reruns are attributable.

Exit codes: 0 success, 1 model or numeric failure, 2 I/O or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (heterogeneity_report, summarize_accuracy,
                       write_accuracy_csv)
from .data import (DataError, load_ma, load_nma, prepare_covariates,
                   read_covariate_table)
from .evaluation import (DEFAULT_MIN_ESS, compare_elpd, comparison_to_csv,
                         format_comparison_table, load_kfold_result,
                         make_folds, run_kfold, save_kfold_result)
from .mcmc import SamplerConfig, sample
from .models import FAMILIES, ModelSpec, PriorSet, build_model
from .nma import (NMA_FAMILIES, NMASpec, build_nma_model, load_scenarios,
                  pairwise_comparisons, recompute_baseline)
from . import plots
from . import simulation as simlab

__all__ = ["CliConfigError", "RunManifest", "build_parser", "main"]


class CliConfigError(ValueError):
    """Bad flags, unreadable files, or malformed config documents."""


# ---------------------------------------------------------------------
# manifest plumbing


@dataclass
class RunManifest:
    """What a run was and what it left behind."""

    command: str
    config_hash: str
    seed: int
    versions: dict
    wall_time_s: float
    outputs: list


class _OutDir:
    """Creates the output directory and records every file written."""

    def __init__(self, path):
        self.dir = Path(path)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise CliConfigError(f"cannot create output directory: {e}")
        self.written = []

    def path(self, name: str) -> Path:
        self.written.append(name)
        return self.dir / name


def _versions() -> dict:
    import jax
    import scipy
    return {"ordmeta": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__, "jax": jax.__version__}


def _config_hash(settings: dict, files=()) -> str:
    """Stable digest of the resolved settings plus referenced file
    contents (so moving a file does not change the hash but editing it
    does)."""
    h = hashlib.sha256()
    h.update(json.dumps(settings, sort_keys=True, default=str).encode())
    for p in files:
        h.update(hashlib.sha256(Path(p).read_bytes()).digest())
    return h.hexdigest()


def _finish(out: _OutDir, command: str, config_hash: str, seed: int,
            t0: float) -> int:
    manifest = RunManifest(command=command, config_hash=config_hash,
                           seed=seed, versions=_versions(),
                           wall_time_s=round(time.monotonic() - t0, 3),
                           outputs=list(out.written))
    with open(out.dir / "manifest.json", "w") as fh:
        json.dump(asdict(manifest), fh, indent=2)
        fh.write("\n")
    return 0


# ---------------------------------------------------------------------
# config loading


def _read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise CliConfigError(str(e))
    except json.JSONDecodeError as e:
        raise CliConfigError(f"{path}: not valid JSON ({e})")
    if not isinstance(doc, dict):
        raise CliConfigError(f"{path}: expected a JSON object")
    return doc


def _checked_doc(path, doc: dict, allowed: set, required=()) -> dict:
    if doc.get("schema_version") != 1:
        raise CliConfigError(f"{path}: schema_version must be 1")
    unknown = set(doc) - allowed
    if unknown:
        raise CliConfigError(f"{path}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(doc)
    if missing:
        raise CliConfigError(f"{path}: missing keys {sorted(missing)}")
    return doc


_MODEL_KEYS = {"schema_version", "family", "scale_link", "jones_transform",
               "jones_lambda", "stratbiv_threshold"}


def _model_config(value: str) -> dict:
    """``--model`` takes a bare family name or a JSON config path."""
    if value in FAMILIES:
        return {"family": value}
    if not Path(value).is_file():
        raise CliConfigError(f"--model {value!r} is neither a family in "
                             f"{FAMILIES} nor a config file")
    doc = _checked_doc(value, _read_json(value), _MODEL_KEYS, ["family"])
    if doc["family"] not in FAMILIES:
        raise CliConfigError(f"{value}: unknown family '{doc['family']}'; "
                             f"expected one of {FAMILIES}")
    return {k: v for k, v in doc.items() if k != "schema_version"}


def _priors(path) -> PriorSet:
    if path is None:
        return PriorSet()
    doc = _checked_doc(path, _read_json(path),
                       {"schema_version"} | set(PriorSet().to_dict()))
    try:
        return PriorSet.from_dict(
            {k: v for k, v in doc.items() if k != "schema_version"})
    except ValueError as e:
        raise CliConfigError(f"{path}: {e}")


def _sampler_config(args) -> SamplerConfig:
    try:
        return SamplerConfig(
            n_chains=args.chains, n_warmup=args.warmup,
            n_iter=getattr(args, "iter"), adapt_delta=args.adapt_delta,
            max_treedepth=args.max_treedepth, seed=args.seed)
    except ValueError as e:
        raise CliConfigError(str(e))


def _threads(args) -> int:
    value = args.threads
    if value is None:
        env = os.environ.get("ORDMETA_THREADS")
        if env is not None:
            try:
                value = int(env)
            except ValueError:
                raise CliConfigError(
                    f"ORDMETA_THREADS must be an integer, got {env!r}")
    if value is None:
        return 1
    if value < 1:
        raise CliConfigError("--threads must be >= 1")
    return value


def _load_ma_data(path):
    try:
        return load_ma(path)
    except OSError as e:
        raise CliConfigError(str(e))


def _spec_from_config(mcfg: dict, data, priors: PriorSet) -> ModelSpec:
    try:
        return ModelSpec(K=data.K, n_studies=data.n_studies, priors=priors,
                         **mcfg)
    except (TypeError, ValueError) as e:
        raise CliConfigError(f"bad model config: {e}")


# ---------------------------------------------------------------------
# shared fit plumbing


def _flat_names(layout) -> list:
    names = []
    for block in layout.names:
        shape = layout.shapes[block]
        if shape == ():
            names.append(block)
        else:
            names.extend(f"{block}[{','.join(map(str, idx))}]"
                         for idx in np.ndindex(shape))
    return names


def _run_chains(model, cfg: SamplerConfig, threads: int = 1):
    inits = np.stack([model.initialize(seed=cfg.seed * 1000 + c)
                      for c in range(cfg.n_chains)])
    names = _flat_names(model.layout)
    draws = sample(model, cfg, inits, param_names=names, threads=threads)
    return draws, model.constrain_draws(draws.flat())


def _write_draws_csv(path, draws) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "iter"] + list(draws.param_names))
        for c in range(draws.n_chains):
            for i in range(draws.n_iter):
                writer.writerow([c, i] + [repr(float(v))
                                          for v in draws.draws[c, i]])


def _write_diagnostics_csv(path, draws) -> None:
    table = draws.diagnostics()
    keys = ["param", "mean", "sd", "rhat", "ess_bulk", "ess_tail"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for i in range(len(table["param"])):
            writer.writerow([table["param"][i]]
                            + [repr(float(table[k][i])) for k in keys[1:]])


def _summary_json(summary) -> dict:
    doc = {"thresholds": list(summary.thresholds),
           "se": {"median": summary.se_median.tolist(),
                  "lo": summary.se_lo.tolist(),
                  "hi": summary.se_hi.tolist()},
           "sp": {"median": summary.sp_median.tolist(),
                  "lo": summary.sp_lo.tolist(),
                  "hi": summary.sp_hi.tolist()}}
    if summary.has_prediction:
        doc["se_pred"] = {"lo": summary.se_pred_lo.tolist(),
                          "hi": summary.se_pred_hi.tolist()}
        doc["sp_pred"] = {"lo": summary.sp_pred_lo.tolist(),
                          "hi": summary.sp_pred_hi.tolist()}
    return doc


def _sampler_report(draws) -> dict:
    diag = draws.diagnostics()
    rhat = np.asarray(diag["rhat"], dtype=float)
    finite = rhat[np.isfinite(rhat)]
    return {"schema_version": 1,
            "config": draws.config.to_dict(),
            "n_divergent": draws.n_divergent(),
            "max_rhat": float(finite.max()) if finite.size else None,
            "warnings": list(draws.warnings)}


# ---------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    t0 = time.monotonic()
    out = _OutDir(args.out)
    data = _load_ma_data(args.data)
    mcfg = _model_config(args.model)
    priors = _priors(args.priors)
    cfg = _sampler_config(args)
    threads = _threads(args)
    spec = _spec_from_config(mcfg, data, priors)
    hash_files = [args.data] + [p for p in (args.priors,) if p]
    if args.model not in FAMILIES:
        hash_files.append(args.model)
    config_hash = _config_hash(
        {"command": "fit", "model": mcfg, "sampler": cfg.to_dict(),
         "format": args.format}, hash_files)

    model = build_model(spec, data)
    draws, params = _run_chains(model, cfg, threads)
    summary = summarize_accuracy(model.spec, params, seed=cfg.seed)

    _write_draws_csv(out.path("draws.csv"), draws)
    _write_diagnostics_csv(out.path("diagnostics.csv"), draws)
    report = _sampler_report(draws)
    with open(out.path("sampler.json"), "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if args.format == "json":
        with open(out.path("accuracy.json"), "w") as fh:
            json.dump(_summary_json(summary), fh, indent=2)
            fh.write("\n")
    else:
        write_accuracy_csv(summary, out.path("accuracy.csv"))
    with open(out.path("heterogeneity.json"), "w") as fh:
        json.dump(heterogeneity_report(model.spec, params), fh, indent=2)
        fh.write("\n")
    label = mcfg["family"]
    out.path("sroc.svg").write_text(plots.sroc_svg([(label, summary)]))
    out.path("thresholds.svg").write_text(
        plots.threshold_svg(summary, label=label))

    code = _finish(out, "fit", config_hash, cfg.seed, t0)
    print(f"fit {label}: {data.n_studies} studies, "
          f"max R-hat {report['max_rhat']}, "
          f"{report['n_divergent']} divergent -> {out.dir}")
    return code


# ---------------------------------------------------------------------
# simulate


_SCENARIO_KEYS = {"schema_version", "profile", "dgm_family", "n_studies",
                  "seed", "models", "max_reps", "mcse_target_pp",
                  "eligibility_min_studies", "min_studies_per_threshold",
                  "allow_rc_on_fc", "sampler"}
_SAMPLER_KEYS = {"chains", "warmup", "iter", "adapt_delta", "max_treedepth"}


def _resolve_profile(value: str, base: Path):
    packaged = Path(__file__).parent / "configs" / f"{value}.json"
    if packaged.is_file():
        path = packaged
    else:
        path = Path(value)
        if not path.is_absolute():
            path = base / path
    try:
        return simlab.load_profile(path), path
    except OSError as e:
        raise CliConfigError(str(e))
    except (DataError, ValueError) as e:
        raise CliConfigError(f"bad profile config: {e}")


def _parse_target(value) -> float:
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return float("inf")
        raise CliConfigError(f"mcse_target_pp: expected a number or "
                             f"'inf', got {value!r}")
    return float(value)


def cmd_simulate(args) -> int:
    t0 = time.monotonic()
    out = _OutDir(args.out)
    doc = _checked_doc(args.config, _read_json(args.config),
                       _SCENARIO_KEYS,
                       ["profile", "dgm_family", "n_studies", "models"])
    profile, profile_path = _resolve_profile(
        str(doc["profile"]), Path(args.config).resolve().parent)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    try:
        scenario = simlab.SimScenario(profile=profile,
                                      dgm_family=doc["dgm_family"],
                                      n_studies=int(doc["n_studies"]),
                                      seed=seed)
    except ValueError as e:
        raise CliConfigError(f"{args.config}: {e}")

    sdoc = doc.get("sampler", {})
    unknown = set(sdoc) - _SAMPLER_KEYS
    if unknown:
        raise CliConfigError(f"{args.config}: unknown sampler keys "
                             f"{sorted(unknown)}")
    try:
        sampler = SamplerConfig(
            n_chains=int(sdoc.get("chains", 2)),
            n_warmup=int(sdoc.get("warmup", 400)),
            n_iter=int(sdoc.get("iter", 400)),
            adapt_delta=float(sdoc.get("adapt_delta", 0.8)),
            max_treedepth=int(sdoc.get("max_treedepth", 10)))
        loop_cfg = simlab.SimLoopConfig(
            sampler=sampler,
            max_reps=int(doc.get("max_reps", 100)),
            mcse_target_pp=_parse_target(doc.get("mcse_target_pp", 0.125)),
            eligibility_min_studies=int(
                doc.get("eligibility_min_studies", 3)),
            min_studies_per_threshold=int(
                doc.get("min_studies_per_threshold", 1)),
            allow_rc_on_fc=bool(doc.get("allow_rc_on_fc", False)))
        models = list(doc["models"])
    except ValueError as e:
        raise CliConfigError(f"{args.config}: {e}")
    config_hash = _config_hash(
        {"command": "simulate", "scenario": {
            "dgm_family": scenario.dgm_family,
            "n_studies": scenario.n_studies, "seed": seed,
            "models": models, "max_reps": loop_cfg.max_reps,
            "mcse_target_pp": loop_cfg.mcse_target_pp,
            "eligibility_min_studies": loop_cfg.eligibility_min_studies,
            "min_studies_per_threshold":
                loop_cfg.min_studies_per_threshold,
            "sampler": sampler.to_dict()}},
        [args.config, profile_path])

    try:
        result = simlab.adaptive_loop(scenario, models, loop_cfg)
    except ValueError as e:
        raise CliConfigError(str(e))
    simlab.results_to_csv(result, out.path("results.csv"))
    table = simlab.format_results_table(result)
    out.path("table.txt").write_text(table)

    code = _finish(out, "simulate", config_hash, seed, t0)
    print(table.rstrip("\n"))
    print(f"{result.n_reps} replications "
          f"({'stopped early' if result.stopped_early else 'hit the cap'})"
          f" -> {out.dir}")
    return code


# ---------------------------------------------------------------------
# kfold / compare


def cmd_kfold(args) -> int:
    t0 = time.monotonic()
    out = _OutDir(args.out)
    data = _load_ma_data(args.data)
    mcfg = _model_config(args.model)
    priors = _priors(args.priors)
    cfg = _sampler_config(args)
    threads = _threads(args)
    spec = _spec_from_config(mcfg, data, priors)
    if args.folds < 2 or args.folds > data.n_studies:
        raise CliConfigError(f"cannot split {data.n_studies} studies "
                             f"into {args.folds} folds")
    hash_files = [args.data] + [p for p in (args.priors,) if p]
    if args.model not in FAMILIES:
        hash_files.append(args.model)
    config_hash = _config_hash(
        {"command": "kfold", "model": mcfg, "sampler": cfg.to_dict(),
         "folds": args.folds, "m_effects": args.m_effects,
         "min_ess": args.min_ess}, hash_files)

    folds = make_folds(data.n_studies, args.folds, seed=cfg.seed)
    result = run_kfold(spec, data, folds, cfg, m_effects=args.m_effects,
                       min_ess_threshold=args.min_ess, n_workers=threads)
    name = mcfg["family"]
    save_kfold_result(out.path(f"kfold_{name}.json"), result, name)

    code = _finish(out, "kfold", config_hash, cfg.seed, t0)
    discarded = result.discarded_folds(args.min_ess)
    note = f", folds discarded: {sorted(discarded)}" if discarded else ""
    print(f"kfold {name}: elpd {result.elpd_total:.2f} "
          f"(se {result.se_total:.2f}){note} -> {out.dir}")
    return code


def cmd_compare(args) -> int:
    t0 = time.monotonic()
    out = _OutDir(args.out)
    if len(args.results) < 2:
        raise CliConfigError("need at least two K-fold result files")
    names, results = [], []
    for path in args.results:
        try:
            name, res = load_kfold_result(path)
        except OSError as e:
            raise CliConfigError(str(e))
        except ValueError as e:
            raise CliConfigError(str(e))
        names.append(name)
        results.append(res)
    config_hash = _config_hash({"command": "compare",
                                "min_ess": args.min_ess}, args.results)

    ranking = compare_elpd(results, names=names,
                           min_ess_threshold=args.min_ess)
    table = format_comparison_table(ranking)
    if args.format == "json":
        with open(out.path("comparison.json"), "w") as fh:
            json.dump({"schema_version": 1, "ranking": ranking}, fh,
                      indent=2)
            fh.write("\n")
    else:
        comparison_to_csv(ranking, out.path("comparison.csv"))
    out.path("comparison.txt").write_text(table)

    code = _finish(out, "compare", config_hash, 0, t0)
    print(table.rstrip("\n"))
    return code


# ---------------------------------------------------------------------
# network commands


_NMA_MODEL_KEYS = {"schema_version", "family", "compound_symmetry",
                   "scale_link", "jones_transform", "jones_lambda",
                   "continuous", "binary", "categorical"}


def _nma_model_config(path) -> dict:
    doc = _checked_doc(path, _read_json(path), _NMA_MODEL_KEYS, ["family"])
    if doc["family"] not in NMA_FAMILIES:
        raise CliConfigError(f"{path}: unknown network family "
                             f"'{doc['family']}'")
    return doc


def _nma_setup(args, priors: PriorSet):
    """All the cheap validation for a network fit, before any sampling."""
    try:
        data = load_nma(args.data)
    except OSError as e:
        raise CliConfigError(str(e))
    doc = _nma_model_config(args.model)
    try:
        spec = NMASpec(
            family=doc["family"], K_per_test=tuple(data.K_per_test),
            compound_symmetry=bool(doc.get("compound_symmetry", True)),
            priors=priors, scale_link=doc.get("scale_link", "exp"),
            jones_transform=doc.get("jones_transform", "log"),
            jones_lambda=float(doc.get("jones_lambda", 0.5)))
    except ValueError as e:
        raise CliConfigError(f"{args.model}: {e}")
    covs = None
    cov_cols = {k: tuple(doc.get(k, ())) for k in
                ("continuous", "binary", "categorical")}
    if any(cov_cols.values()):
        if not args.covariates:
            raise CliConfigError(f"{args.model} names covariate columns "
                                 f"but no --covariates table was given")
        try:
            rows = read_covariate_table(args.covariates)
            covs = prepare_covariates(rows, indicator=data.indicator,
                                      **cov_cols)
        except (OSError, DataError, ValueError) as e:
            raise CliConfigError(str(e))
    return data, spec, covs


def _nma_run(args, data, spec, covs):
    cfg = _sampler_config(args)
    threads = _threads(args)
    model = build_nma_model(spec, data, covs)
    draws, params = _run_chains(model, cfg, threads)
    return draws, params


def _parse_pairs(tokens, n_tests: int):
    if not tokens:
        return None
    pairs = []
    for tok in tokens:
        try:
            a, b = (int(x) for x in tok.split(":"))
        except ValueError:
            raise CliConfigError(f"--pairs entries look like A:B, "
                                 f"got {tok!r}")
        if not (0 <= a < n_tests and 0 <= b < n_tests):
            raise CliConfigError(f"pair {tok!r} is out of range for "
                                 f"{n_tests} tests")
        pairs.append((a, b))
    return pairs


def cmd_pairwise(args) -> int:
    t0 = time.monotonic()
    out = _OutDir(args.out)
    priors = _priors(args.priors)
    cfg_files = [args.data, args.model] + [p for p in (args.priors,) if p]
    config_hash = _config_hash(
        {"command": "pairwise", "sampler": _sampler_config(args).to_dict(),
         "pairs": args.pairs or "all"}, cfg_files)
    data, spec, covs = _nma_setup(args, priors)
    pairs = _parse_pairs(args.pairs, spec.n_tests)
    draws, params = _nma_run(args, data, spec, covs)

    records = pairwise_comparisons(spec, params, pairs=pairs,
                                   test_names=data.test_names)
    with open(out.path("pairwise.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["test_a", "test_b", "threshold_a", "threshold_b",
                         "quantity", "median", "lo", "hi"])
        for r in records:
            for q in ("delta_se", "delta_sp"):
                writer.writerow([r["test_a"], r["test_b"],
                                 r["threshold_a"], r["threshold_b"], q]
                                + [repr(r[q][f]) for f in
                                   ("median", "lo", "hi")])
    out.path("forest.svg").write_text(plots.forest_svg(records))

    code = _finish(out, "pairwise", config_hash, args.seed, t0)
    print(f"pairwise: {len(records)} comparisons across "
          f"{spec.n_tests} tests -> {out.dir}")
    return code


def cmd_baseline(args) -> int:
    t0 = time.monotonic()
    out = _OutDir(args.out)
    priors = _priors(args.priors)
    cfg_files = [args.data, args.model, args.scenarios] \
        + [p for p in (args.priors,) if p]
    config_hash = _config_hash(
        {"command": "baseline",
         "sampler": _sampler_config(args).to_dict()}, cfg_files)
    data, spec, covs = _nma_setup(args, priors)
    try:
        cases = load_scenarios(args.scenarios, data.test_names)
    except (OSError, ValueError) as e:
        raise CliConfigError(str(e))
    draws, params = _nma_run(args, data, spec, covs)

    summaries = recompute_baseline(spec, params, cases,
                                   test_names=data.test_names)
    with open(out.path("baseline.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "test", "quantity", "median", "lo",
                         "hi"])
        for case in summaries:
            for entry in case["tests"]:
                acc = entry["accuracy"]
                for i, k in enumerate(acc.thresholds):
                    writer.writerow([case["name"], entry["test"],
                                     f"se@{k}", repr(float(acc.se_median[i])),
                                     repr(float(acc.se_lo[i])),
                                     repr(float(acc.se_hi[i]))])
                    writer.writerow([case["name"], entry["test"],
                                     f"sp@{k}", repr(float(acc.sp_median[i])),
                                     repr(float(acc.sp_lo[i])),
                                     repr(float(acc.sp_hi[i]))])
                auc = entry["auc"]
                writer.writerow([case["name"], entry["test"], "auc"]
                                + [repr(auc[f]) for f in
                                   ("median", "lo", "hi")])

    code = _finish(out, "baseline", config_hash, args.seed, t0)
    print(f"baseline: {len(summaries)} scenarios x {spec.n_tests} tests "
          f"-> {out.dir}")
    return code


# ---------------------------------------------------------------------
# parser


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--iter", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--adapt-delta", type=float, default=0.80,
                   dest="adapt_delta")
    p.add_argument("--max-treedepth", type=int, default=10,
                   dest="max_treedepth")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap (falls back to ORDMETA_THREADS)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ordmeta",
        description="Ordinal diagnostic-accuracy meta-analysis toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model to one dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True,
                   help="family name or model config JSON")
    p.add_argument("--priors", default=None)
    _add_sampler_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run a replication scenario")
    p.add_argument("--config", required=True, help="scenario JSON")
    p.add_argument("--seed", type=int, default=None,
                   help="override the scenario seed")
    _add_common_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("kfold",
                       help="cross-validated ELPD for one model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--priors", default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--m-effects", type=int, default=50, dest="m_effects")
    p.add_argument("--min-ess", type=float, default=DEFAULT_MIN_ESS,
                   dest="min_ess")
    _add_sampler_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_kfold)

    p = sub.add_parser("compare", help="rank stored K-fold results")
    p.add_argument("results", nargs="+",
                   help="two or more kfold_*.json files")
    p.add_argument("--min-ess", type=float, default=DEFAULT_MIN_ESS,
                   dest="min_ess")
    _add_common_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("pairwise",
                       help="between-test differences from a network fit")
    p.add_argument("--data", required=True, help="network dataset JSON")
    p.add_argument("--model", required=True, help="network config JSON")
    p.add_argument("--priors", default=None)
    p.add_argument("--covariates", default=None,
                   help="per-study covariate table (CSV)")
    p.add_argument("--pairs", nargs="*", default=None, metavar="A:B")
    _add_sampler_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_pairwise)

    p = sub.add_parser("baseline",
                       help="recompute network summaries at new "
                            "covariate settings")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--priors", default=None)
    p.add_argument("--covariates", default=None)
    p.add_argument("--scenarios", required=True,
                   help="scenario JSON with schema_version 1")
    _add_sampler_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return args.func(args)
    except (CliConfigError, DataError, OSError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # model / numeric failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
