"""Loading, validation, and representation of MA/NMA count datasets.

Data are cumulative ordinal counts: for each study and disease group
(``d=0`` non-diseased, ``d=1`` diseased) the first value is the group
size and the remaining ``K-1`` values count individuals scoring at or
above each threshold (column k holds ``#(score > k)``); ``-1`` marks a
missing threshold.  Observed entries must be non-increasing.

Canonical storage is JSON; flat CSV is accepted for single-test MA data.
Study-level covariate tables for meta-regression are prepared into
zero-padded design matrices with dummy-expanded categorical columns.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kernel import MISSING

__all__ = [
    "DataError",
    "StudyCounts",
    "MADataset",
    "NMADataset",
    "CovariateSet",
    "CountViolation",
    "validate_counts",
    "load_ma",
    "load_nma",
    "write_ma",
    "write_nma",
    "dumps_ma",
    "dumps_nma",
    "prepare_covariates",
    "read_covariate_table",
]

#: Tokens in covariate tables that all mean "missing".
MISSING_TOKENS = {"NA", "NAN", "INF", "999", "-INF"}


class DataError(ValueError):
    """Raised for malformed files or datasets failing validation."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


@dataclass(frozen=True)
class StudyCounts:
    """One study-group's cumulative counts.

    ``cum_counts[k-1]`` is the number of individuals scoring at or above
    threshold k (i.e. strictly above category k), with -1 for missing.
    """

    n_total: int
    cum_counts: tuple
    group: int

    def __post_init__(self):
        object.__setattr__(self, "cum_counts", tuple(int(c) for c in self.cum_counts))
        object.__setattr__(self, "n_total", int(self.n_total))

    @property
    def n_thresholds(self) -> int:
        return len(self.cum_counts)

    @property
    def observed_mask(self) -> np.ndarray:
        return np.array([c != MISSING for c in self.cum_counts])


@dataclass
class MADataset:
    """Single-test meta-analysis dataset: per study one (d=0, d=1) pair."""

    K: int
    studies: list  # list of (StudyCounts d=0, StudyCounts d=1)
    study_labels: list = field(default_factory=list)

    def __post_init__(self):
        if not self.study_labels:
            self.study_labels = [str(i) for i in range(len(self.studies))]

    @property
    def n_studies(self) -> int:
        return len(self.studies)

    def to_arrays(self):
        """(n, cum) integer arrays of shape (S, 2) and (S, 2, K-1)."""
        S = self.n_studies
        n = np.zeros((S, 2), dtype=np.int64)
        cum = np.full((S, 2, self.K - 1), MISSING, dtype=np.int64)
        for s, pair in enumerate(self.studies):
            for d in (0, 1):
                n[s, d] = pair[d].n_total
                cum[s, d] = pair[d].cum_counts
        return n, cum

    def subset(self, indices: Sequence[int]) -> "MADataset":
        idx = list(indices)
        return MADataset(
            K=self.K,
            studies=[self.studies[i] for i in idx],
            study_labels=[self.study_labels[i] for i in idx],
        )


@dataclass
class NMADataset:
    """Multiple tests over a shared study index.

    ``tests[t]`` holds the included studies of test t in global study
    order; ``indicator[s, t]`` is 1 iff study s reports test t.
    """

    tests: list  # list of MADataset (rows = included studies only)
    indicator: np.ndarray
    test_names: list

    @property
    def n_studies(self) -> int:
        return self.indicator.shape[0]

    @property
    def n_tests(self) -> int:
        return self.indicator.shape[1]

    @property
    def K_per_test(self) -> list:
        return [t.K for t in self.tests]

    def included_studies(self, t: int) -> np.ndarray:
        """Global study indices reporting test t."""
        return np.flatnonzero(self.indicator[:, t])


@dataclass
class CovariateSet:
    """Per-group, per-test design matrices with zero padding.

    ``X[d][t]`` has one row per global study; rows of studies without
    test t are all zero, included rows start with an intercept 1.
    ``baseline_case[d][t]`` is the covariate vector summaries are
    evaluated at (intercept 1, everything else 0).
    """

    X: list  # X[d][t]: ndarray (n_studies, p_t)
    baseline_case: list  # baseline_case[d][t]: ndarray (p_t,)
    column_names: list

    @property
    def n_columns(self) -> int:
        return len(self.column_names)


@dataclass(frozen=True)
class CountViolation:
    study: int
    group: int
    kind: str
    message: str


def _validate_group(counts: StudyCounts, study: int) -> list:
    out = []
    if counts.n_total < 0:
        out.append(CountViolation(study, counts.group, "negative-n",
                                  f"n_total={counts.n_total} < 0"))
        return out
    prev = counts.n_total
    prev_k = 0
    any_observed = False
    for k, c in enumerate(counts.cum_counts, start=1):
        if c == MISSING:
            continue
        any_observed = True
        if c < 0 or c > counts.n_total:
            out.append(CountViolation(
                study, counts.group, "out-of-range",
                f"cum[{k}]={c} outside [0, {counts.n_total}]"))
        elif c > prev:
            out.append(CountViolation(
                study, counts.group, "non-monotone",
                f"non-monotone at k={k}: cum[{k}]={c} > cum[{prev_k}]={prev}"))
        prev, prev_k = c, k
    if not any_observed and counts.n_total > 0:
        out.append(CountViolation(study, counts.group, "all-missing",
                                  "every threshold missing"))
    return out


def validate_counts(dataset: MADataset) -> list:
    """Scan a dataset for count violations; empty list means valid."""
    report = []
    for s, pair in enumerate(dataset.studies):
        for d in (0, 1):
            if pair[d].n_thresholds != dataset.K - 1:
                report.append(CountViolation(
                    s, d, "bad-length",
                    f"{pair[d].n_thresholds} thresholds, expected {dataset.K - 1}"))
                continue
            report.extend(_validate_group(pair[d], s))
    return report


# ---------------------------------------------------------------------------
# JSON / CSV readers and writers
# ---------------------------------------------------------------------------

def _require_validated(ds, label):
    violations = validate_counts(ds)
    if violations:
        lines = "; ".join(
            f"study {v.study} group {v.group}: {v.message}" for v in violations)
        raise DataError(f"{label}: validation failed: {lines}", violations)
    return ds


def _counts_from_json(obj, K, study, group, label):
    if not isinstance(obj, dict) or set(obj) != {"n", "cum"}:
        raise DataError(f"{label}: study {study} group {group}: "
                        "expected an object with keys 'n' and 'cum'")
    cum = obj["cum"]
    if len(cum) != K - 1:
        raise DataError(f"{label}: study {study} group {group}: "
                        f"row length {len(cum)} != K-1 = {K - 1}")
    return StudyCounts(n_total=obj["n"], cum_counts=cum, group=group)


def _ma_from_json(doc, label) -> MADataset:
    if not isinstance(doc, dict) or "K" not in doc or "studies" not in doc:
        raise DataError(f"{label}: expected an object with 'K' and 'studies'")
    K = int(doc["K"])
    studies = []
    for s, entry in enumerate(doc["studies"]):
        if set(entry) != {"nd", "d"}:
            raise DataError(f"{label}: study {s}: expected keys 'nd' and 'd'")
        studies.append((
            _counts_from_json(entry["nd"], K, s, 0, label),
            _counts_from_json(entry["d"], K, s, 1, label),
        ))
    return _require_validated(MADataset(K=K, studies=studies), label)


def _ma_from_csv(text, label) -> MADataset:
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{label}: empty CSV")
    if not rows[0][1].strip().lstrip("-").isdigit():
        rows = rows[1:]  # header row
    groups = {}
    order = []
    K = None
    for lineno, row in enumerate(rows, start=1):
        try:
            study_id = row[0].strip()
            group = int(row[1])
            n_total = int(row[2])
            cum = [int(v) for v in row[3:]]
        except (IndexError, ValueError) as exc:
            raise DataError(f"{label}: line {lineno}: {exc}") from exc
        if group not in (0, 1):
            raise DataError(f"{label}: line {lineno}: group must be 0 or 1")
        if K is None:
            K = len(cum) + 1
        elif len(cum) != K - 1:
            raise DataError(f"{label}: line {lineno}: row length != K-1")
        if study_id not in groups:
            groups[study_id] = {}
            order.append(study_id)
        groups[study_id][group] = StudyCounts(n_total=n_total, cum_counts=cum, group=group)
    studies = []
    for sid in order:
        pair = groups[sid]
        if set(pair) != {0, 1}:
            raise DataError(f"{label}: study {sid}: needs one row per group")
        studies.append((pair[0], pair[1]))
    ds = MADataset(K=K, studies=studies, study_labels=order)
    return _require_validated(ds, label)


def load_ma(path, format: str = None) -> MADataset:
    """Load a single-test MA dataset from JSON (canonical) or CSV."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    text = path.read_text()
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "json")
    if fmt == "csv":
        return _ma_from_csv(text, str(path))
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(
            f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from exc
    return _ma_from_json(doc, str(path))


def load_nma(path, format: str = "json") -> NMADataset:
    """Load an NMA dataset (JSON only; nested structure has no flat CSV)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if format != "json":
        raise DataError("NMA datasets are JSON only")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(
            f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from exc
    label = str(path)
    if not isinstance(doc, dict) or "tests" not in doc or "indicator" not in doc:
        raise DataError(f"{label}: expected keys 'tests' and 'indicator'")
    indicator = np.asarray(doc["indicator"], dtype=np.int64)
    if indicator.ndim != 2:
        raise DataError(f"{label}: indicator must be a matrix")
    if not np.all((indicator == 0) | (indicator == 1)):
        raise DataError(f"{label}: indicator entries must be 0 or 1")
    if np.any(indicator.sum(axis=1) == 0):
        empty = np.flatnonzero(indicator.sum(axis=1) == 0).tolist()
        raise DataError(f"{label}: studies {empty} report no test")
    if len(doc["tests"]) != indicator.shape[1]:
        raise DataError(f"{label}: {len(doc['tests'])} tests but indicator has "
                        f"{indicator.shape[1]} columns")
    tests, names = [], []
    for t, entry in enumerate(doc["tests"]):
        K = int(entry["K"])
        names.append(str(entry.get("name", f"test{t}")))
        n_included = int(indicator[:, t].sum())
        rows_nd, rows_d = entry["nd"], entry["d"]
        if len(rows_nd) != n_included or len(rows_d) != n_included:
            raise DataError(
                f"{label}: test {names[-1]}: indicator marks {n_included} studies "
                f"but {len(rows_nd)}/{len(rows_d)} rows present")
        studies = []
        for i, (rnd, rd) in enumerate(zip(rows_nd, rows_d)):
            for row in (rnd, rd):
                if len(row) != K:
                    raise DataError(f"{label}: test {names[-1]} row {i}: "
                                    f"row length {len(row)} != K = {K}")
            studies.append((
                StudyCounts(n_total=rnd[0], cum_counts=rnd[1:], group=0),
                StudyCounts(n_total=rd[0], cum_counts=rd[1:], group=1),
            ))
        included = np.flatnonzero(indicator[:, t])
        ds = MADataset(K=K, studies=studies,
                       study_labels=[str(int(s)) for s in included])
        tests.append(_require_validated(ds, f"{label}: test {names[-1]}"))
    return NMADataset(tests=tests, indicator=indicator, test_names=names)


def dumps_ma(ds: MADataset) -> str:
    """Canonical JSON serialization (stable bytes for identical data)."""
    doc = {
        "K": ds.K,
        "studies": [
            {
                "nd": {"n": p[0].n_total, "cum": list(p[0].cum_counts)},
                "d": {"n": p[1].n_total, "cum": list(p[1].cum_counts)},
            }
            for p in ds.studies
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def write_ma(ds: MADataset, path) -> None:
    Path(path).write_text(dumps_ma(ds))


def dumps_nma(ds: NMADataset) -> str:
    doc = {
        "tests": [
            {
                "name": ds.test_names[t],
                "K": test.K,
                "nd": [[p[0].n_total, *p[0].cum_counts] for p in test.studies],
                "d": [[p[1].n_total, *p[1].cum_counts] for p in test.studies],
            }
            for t, test in enumerate(ds.tests)
        ],
        "indicator": ds.indicator.tolist(),
    }
    return json.dumps(doc, indent=2) + "\n"


def write_nma(ds: NMADataset, path) -> None:
    Path(path).write_text(dumps_nma(ds))


# ---------------------------------------------------------------------------
# Covariate preparation
# ---------------------------------------------------------------------------

def read_covariate_table(path) -> list:
    """Read a covariate CSV with header into a list of row dicts.

    The tokens NA, NaN, Inf, -Inf, and 999 all mean missing and are
    mapped to None.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for row in reader:
            clean = {}
            for key, value in row.items():
                v = (value or "").strip()
                clean[key] = None if v.upper() in MISSING_TOKENS or v == "" else v
            rows.append(clean)
    if not rows:
        raise DataError(f"{path}: empty covariate table")
    return rows


def _as_float(value, column, row_idx):
    try:
        out = float(value)
    except (TypeError, ValueError) as exc:
        raise DataError(f"column '{column}' row {row_idx}: "
                        f"not a number: {value!r}") from exc
    if math.isinf(out) or math.isnan(out) or out == 999.0:
        raise DataError(f"column '{column}' row {row_idx}: missing continuous "
                        "values are not allowed")
    return out


def prepare_covariates(rows: Iterable[dict], continuous=(), binary=(),
                       categorical=(), center_scale: bool = False,
                       indicator=None) -> CovariateSet:
    """Build zero-padded design matrices from a per-study covariate table.

    Categorical columns are dummy-expanded with the (sorted) first
    observed level as reference; missing categorical values become their
    own ``(missing)`` level.  Missing continuous or binary values are an
    error.  With ``center_scale`` continuous columns are centered and
    scaled to unit SD on each test's included rows.
    """
    rows = list(rows)
    n_studies = len(rows)
    if indicator is None:
        indicator = np.ones((n_studies, 1), dtype=np.int64)
    indicator = np.asarray(indicator, dtype=np.int64)
    if indicator.shape[0] != n_studies:
        raise DataError(f"covariate table has {n_studies} rows but indicator "
                        f"has {indicator.shape[0]} studies")
    known = set(continuous) | set(binary) | set(categorical)
    for name in known:
        if name not in rows[0]:
            raise DataError(f"unknown covariate column: '{name}'")

    names = ["intercept"]
    columns = [np.ones(n_studies)]
    for col in continuous:
        values = np.array([_as_float(r[col], col, i) for i, r in enumerate(rows)])
        names.append(col)
        columns.append(values)
    for col in binary:
        values = np.array([_as_float(r[col], col, i) for i, r in enumerate(rows)])
        if not np.all(np.isin(values, (0.0, 1.0))):
            raise DataError(f"binary column '{col}' has values outside {{0,1}}")
        names.append(col)
        columns.append(values)
    for col in categorical:
        raw = [r[col] if r[col] is not None else "(missing)" for r in rows]
        levels = sorted(set(raw) - {"(missing)"})
        if "(missing)" in raw:
            levels.append("(missing)")
        if len(levels) < 2:
            continue  # constant column: nothing beyond the intercept
        for level in levels[1:]:  # first level is the reference
            names.append(f"{col}[{level}]")
            columns.append(np.array([1.0 if v == level else 0.0 for v in raw]))

    base = np.column_stack(columns)
    n_tests = indicator.shape[1]
    n_continuous = len(continuous)
    X_per_test = []
    for t in range(n_tests):
        X = base.copy()
        rows_in = indicator[:, t] == 1
        if center_scale and n_continuous:
            for j in range(1, 1 + n_continuous):
                mu = X[rows_in, j].mean()
                sd = X[rows_in, j].std()
                X[rows_in, j] = (X[rows_in, j] - mu) / (sd if sd > 0 else 1.0)
        X[~rows_in] = 0.0
        X_per_test.append(X)

    baseline = np.zeros(base.shape[1])
    baseline[0] = 1.0
    return CovariateSet(
        X=[list(X_per_test), [x.copy() for x in X_per_test]],
        baseline_case=[[baseline.copy() for _ in range(n_tests)] for _ in (0, 1)],
        column_names=names,
    )
