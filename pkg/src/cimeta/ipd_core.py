"""Individual participant data: schema, loading, partitioning and per-study summaries."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
REQUIRED_COLUMNS = ("study", "arm", "outcome")


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


class StudyExclusionWarning(UserWarning):
    """A study was dropped from an analysis because it lacks a usable arm."""


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str = CONTINUOUS
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name.strip():
            raise ValueError("covariate names must be non-empty strings")
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise ValueError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "levels", tuple(str(lv) for lv in self.levels))
        if self.kind == CATEGORICAL:
            if len(self.levels) < 2:
                raise ValueError(f"categorical covariate {self.name!r} needs at least 2 levels")
            if len(set(self.levels)) != len(self.levels):
                raise ValueError(f"categorical covariate {self.name!r} has duplicate levels")
        elif self.levels:
            raise ValueError(f"continuous covariate {self.name!r} cannot declare levels")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered covariate declarations shared by every record of a dataset."""

    entries: tuple[Covariate, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [c.name for c in self.entries]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate covariate names in schema: {names}")
        for reserved in REQUIRED_COLUMNS:
            if reserved in names:
                raise ValueError(f"covariate name {reserved!r} clashes with a required column")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, name: str) -> Covariate:
        for c in self.entries:
            if c.name == name:
                return c
        raise KeyError(name)

    def subset(self, names: Iterable[str]) -> "CovariateSchema":
        names = list(names)
        unknown = [n for n in names if n not in self.names]
        if unknown:
            raise KeyError(f"covariates not in schema: {unknown}")
        return CovariateSchema(tuple(self[n] for n in names))


@dataclass(frozen=True)
class IndividualRecord:
    study_id: str
    arm: str
    outcome: float
    covariates: tuple


@dataclass(frozen=True, eq=False)
class MetaDataset:
    """Validated, immutable collection of participant records.

    Column arrays (``study``, ``arm``, ``outcome`` and one array per covariate)
    are derived once and shared by every estimator; they must not be mutated.
    """

    schema: CovariateSchema
    records: tuple[IndividualRecord, ...]
    treatment_pair: tuple[str, str]
    dropped: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        a, a_prime = (str(x) for x in self.treatment_pair)
        object.__setattr__(self, "treatment_pair", (a, a_prime))
        if not self.records:
            raise DataError("dataset is empty")
        if a == a_prime:
            raise DataError(f"treatment pair labels must differ, got ({a!r}, {a_prime!r})")
        p = len(self.schema)
        for i, rec in enumerate(self.records):
            if len(rec.covariates) != p:
                raise DataError(f"record {i}: expected {p} covariates, got {len(rec.covariates)}")
            if not math.isfinite(rec.outcome):
                raise DataError(f"record {i}: outcome is not finite")
            for cov, value in zip(self.schema, rec.covariates):
                if cov.is_categorical:
                    if value not in cov.levels:
                        raise DataError(
                            f"record {i}: {cov.name}={value!r} is not a declared level {list(cov.levels)}")
                elif not math.isfinite(value):
                    raise DataError(f"record {i}: covariate {cov.name} is not finite")
        arms = set(self.arm)
        for label in (a, a_prime):
            if label not in arms:
                raise DataError(f"treatment label {label!r} does not appear in any record")

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, MetaDataset):
            return NotImplemented
        return (self.schema == other.schema and self.records == other.records
                and self.treatment_pair == other.treatment_pair)

    __hash__ = None

    @cached_property
    def study(self) -> np.ndarray:
        return np.array([r.study_id for r in self.records], dtype=object)

    @cached_property
    def arm(self) -> np.ndarray:
        return np.array([r.arm for r in self.records], dtype=object)

    @cached_property
    def outcome(self) -> np.ndarray:
        return np.array([r.outcome for r in self.records], dtype=float)

    @cached_property
    def studies(self) -> tuple[str, ...]:
        """Study ids in order of first appearance."""
        return tuple(dict.fromkeys(r.study_id for r in self.records))

    @cached_property
    def _columns(self) -> dict:
        cols = {}
        for j, cov in enumerate(self.schema):
            values = [r.covariates[j] for r in self.records]
            cols[cov.name] = np.array(values, dtype=object if cov.is_categorical else float)
        return cols

    def column(self, name: str) -> np.ndarray:
        return self._columns[name]

    def in_pair(self) -> np.ndarray:
        a, a_prime = self.treatment_pair
        return (self.arm == a) | (self.arm == a_prime)

    def take(self, indices: Sequence[int]) -> "MetaDataset":
        """New dataset made of the given rows (repeats allowed, as in resampling)."""
        idx = np.asarray(indices, dtype=int)
        return MetaDataset(self.schema, tuple(self.records[i] for i in idx), self.treatment_pair)


@dataclass(frozen=True)
class TargetAssignment:
    """Split of a dataset into the target sample and the contributing studies.

    ``target_rows``, ``contributing_rows`` and ``excluded_rows`` are sorted row
    indices into the dataset and together cover every record exactly once.
    """

    target_study: str
    target_rows: np.ndarray
    contributing_rows: np.ndarray
    excluded_rows: np.ndarray
    contributing_studies: tuple[str, ...]
    excluded_studies: tuple[str, ...] = ()

    @property
    def n_target(self) -> int:
        return int(self.target_rows.size)


@dataclass(frozen=True)
class StudySummary:
    study_id: str
    n_a: int
    n_a_prime: int
    mean_a: float
    mean_a_prime: float
    sd_a: float
    sd_a_prime: float
    te: float
    se_te: float
    covariate_means: dict
    degenerate: bool = False


def _parse_float(cell: str, column: str, line: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"line {line}: column {column!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}: column {column!r}: non-finite value {cell!r}")
    return value


def load_dataset(path, schema: CovariateSchema, pair: tuple[str, str]) -> MetaDataset:
    """Read a comma-separated IPD file and validate it against ``schema``.

    Rows with any empty required cell are dropped (complete-case analysis); the
    per-column count of missing cells is stored on ``MetaDataset.dropped``
    together with the total under the key ``"rows"``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        header = [h.strip() for h in header]
        reader.fieldnames = header
        missing = [c for c in (*REQUIRED_COLUMNS, *schema.names) if c not in header]
        if missing:
            raise DataError(f"{path}: missing required column(s): {', '.join(missing)}")
        columns = (*REQUIRED_COLUMNS, *schema.names)
        dropped = {c: 0 for c in columns}
        n_dropped = 0
        records = []
        for line, row in enumerate(reader, start=2):
            cells = {c: (row.get(c) or "").strip() for c in columns}
            empty = [c for c in columns if cells[c] == ""]
            if empty:
                n_dropped += 1
                for c in empty:
                    dropped[c] += 1
                continue
            covs = []
            for cov in schema:
                cell = cells[cov.name]
                if cov.is_categorical:
                    if cell not in cov.levels:
                        raise DataError(
                            f"line {line}: column {cov.name!r}: value {cell!r} is not a declared "
                            f"level {list(cov.levels)}")
                    covs.append(cell)
                else:
                    covs.append(_parse_float(cell, cov.name, line))
            records.append(IndividualRecord(
                study_id=cells["study"], arm=cells["arm"],
                outcome=_parse_float(cells["outcome"], "outcome", line),
                covariates=tuple(covs)))
    if not records:
        raise DataError(f"{path}: no complete rows remain after dropping missing values")
    report = {c: n for c, n in dropped.items() if n}
    report["rows"] = n_dropped
    if n_dropped:
        logger.warning("%s: %d row(s) dropped for missing values %s", path, n_dropped,
                       {c: n for c, n in report.items() if c != "rows"})
    return MetaDataset(schema, tuple(records), tuple(pair), dropped=report)


def write_dataset(ds: MetaDataset, path) -> None:
    """Write ``ds`` in the delimited input format; floats use shortest round-trip repr."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*REQUIRED_COLUMNS, *ds.schema.names])
        for rec in ds.records:
            covs = [v if isinstance(v, str) else repr(float(v)) for v in rec.covariates]
            writer.writerow([rec.study_id, rec.arm, repr(float(rec.outcome)), *covs])


def apply_transforms(ds: MetaDataset, transforms: Sequence[tuple[str, str]]) -> MetaDataset:
    """Apply ``(covariate, kind)`` transforms in order; kinds are ``log`` and ``standardize``."""
    if not transforms:
        return ds
    values = {c.name: ds.column(c.name).copy() for c in ds.schema if not c.is_categorical}
    for name, kind in transforms:
        if name not in values:
            raise DataError(f"transform target {name!r} is not a continuous covariate")
        x = values[name]
        if kind == "log":
            if np.any(x <= 0):
                raise DataError(f"cannot log-transform {name!r}: non-positive values present")
            values[name] = np.log(x)
        elif kind == "standardize":
            sd = x.std(ddof=1) if x.size > 1 else 0.0
            if sd == 0:
                raise DataError(f"cannot standardize {name!r}: zero variance")
            values[name] = (x - x.mean()) / sd
        else:
            raise DataError(f"unknown transform {kind!r} for {name!r}")
    records = []
    for i, rec in enumerate(ds.records):
        covs = tuple(values[c.name][i] if c.name in values else v
                     for c, v in zip(ds.schema, rec.covariates))
        records.append(IndividualRecord(rec.study_id, rec.arm, rec.outcome,
                                        tuple(float(v) if not isinstance(v, str) else v for v in covs)))
    return MetaDataset(ds.schema, tuple(records), ds.treatment_pair, dropped=ds.dropped)


def partition(ds: MetaDataset, target_study: str) -> TargetAssignment:
    """Label ``target_study`` as the target sample and the rest as contributing studies.

    Rows whose arm is outside the treatment pair are excluded everywhere.
    Contributing studies without both arms of the pair are excluded with a
    :class:`StudyExclusionWarning`.
    """
    target_study = str(target_study)
    if target_study not in ds.studies:
        raise DataError(f"unknown study id {target_study!r}; known: {list(ds.studies)}")
    a, a_prime = ds.treatment_pair
    in_pair = ds.in_pair()
    is_target = ds.study == target_study
    target_rows = np.flatnonzero(is_target & in_pair)
    if target_rows.size == 0:
        raise DataError(f"target study {target_study!r} has no rows in arms {ds.treatment_pair}")

    contributing, excluded_studies = [], []
    for s in ds.studies:
        if s == target_study:
            continue
        rows = np.flatnonzero((ds.study == s) & in_pair)
        arms = set(ds.arm[rows])
        if a in arms and a_prime in arms:
            contributing.append(s)
        else:
            excluded_studies.append(s)
            warnings.warn(f"study {s!r} lacks one of the arms {ds.treatment_pair}; excluded",
                          StudyExclusionWarning, stacklevel=2)
    if not contributing:
        raise DataError(f"no contributing study has both arms {ds.treatment_pair}")
    contributing_mask = np.isin(ds.study, contributing) & in_pair
    contributing_rows = np.flatnonzero(contributing_mask)
    keep = np.zeros(len(ds), dtype=bool)
    keep[target_rows] = True
    keep[contributing_rows] = True
    return TargetAssignment(
        target_study=target_study,
        target_rows=target_rows,
        contributing_rows=contributing_rows,
        excluded_rows=np.flatnonzero(~keep),
        contributing_studies=tuple(contributing),
        excluded_studies=tuple(excluded_studies),
    )


def covariate_aggregates(ds: MetaDataset, rows: np.ndarray) -> dict:
    """Means of continuous covariates and level proportions of categorical ones."""
    out = {}
    for cov in ds.schema:
        x = ds.column(cov.name)[rows]
        if cov.is_categorical:
            out[cov.name] = {lv: float(np.mean(x == lv)) for lv in cov.levels}
        else:
            out[cov.name] = float(np.mean(x))
    return out


def summarize_study(ds: MetaDataset, study_id: str) -> StudySummary:
    a, a_prime = ds.treatment_pair
    in_study = ds.study == study_id
    ya = ds.outcome[in_study & (ds.arm == a)]
    yb = ds.outcome[in_study & (ds.arm == a_prime)]
    if ya.size < 2 or yb.size < 2:
        raise DataError(f"study {study_id!r}: need at least 2 participants per arm "
                        f"(got {ya.size}, {yb.size})")
    sd_a, sd_b = float(ya.std(ddof=1)), float(yb.std(ddof=1))
    se = math.sqrt(sd_a ** 2 / ya.size + sd_b ** 2 / yb.size)
    mean_a, mean_b = float(ya.mean()), float(yb.mean())
    rows = np.flatnonzero(in_study & ds.in_pair())
    return StudySummary(
        study_id=study_id, n_a=int(ya.size), n_a_prime=int(yb.size),
        mean_a=mean_a, mean_a_prime=mean_b, sd_a=sd_a, sd_a_prime=sd_b,
        te=mean_a - mean_b, se_te=se,
        covariate_means=covariate_aggregates(ds, rows),
        degenerate=se == 0.0,
    )


def study_summaries(ds: MetaDataset, studies: Iterable[str] | None = None) -> list[StudySummary]:
    """Per-study arm means, treatment effect, its standard error and covariate aggregates.

    Studies with fewer than two participants in either arm are skipped with a
    warning. A zero standard error is kept but marked ``degenerate``.
    """
    out = []
    for s in (ds.studies if studies is None else studies):
        try:
            summary = summarize_study(ds, s)
        except DataError as exc:
            warnings.warn(f"{exc}; excluded from aggregate meta-analysis",
                          StudyExclusionWarning, stacklevel=2)
            continue
        if summary.degenerate:
            warnings.warn(f"study {s!r}: zero standard error (constant outcomes)",
                          StudyExclusionWarning, stacklevel=2)
        out.append(summary)
    return out
