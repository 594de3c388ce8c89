"""Longitudinal visit-level data: ingestion, validation, lags, splitting.

A Dataset is an immutable column store over visits, sorted by patient then
care date, with (patient, date) uniqueness enforced on every construction
path. Features are float64 with NaN as the missing marker; the target is
the change in Hb since the previous visit (or any single numeric outcome).
"""

from __future__ import annotations

import csv
import datetime
import math
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

__all__ = [
    "RESERVED_ID",
    "RESERVED_DATE",
    "OPTIONAL_WEIGHT",
    "DatasetError",
    "MissingColumnError",
    "DuplicateVisitError",
    "MalformedValueError",
    "VisitRecord",
    "Dataset",
    "LagDerivation",
    "LagSpec",
    "derive_lags",
    "TrainTestSplit",
    "temporal_split",
    "load_csv",
    "write_csv",
]

RESERVED_ID = "ID"
RESERVED_DATE = "Care_Date"
OPTIONAL_WEIGHT = "Weight"


class DatasetError(ValueError):
    """Base class for data-layer failures."""


class MissingColumnError(DatasetError):
    pass


class DuplicateVisitError(DatasetError):
    pass


class MalformedValueError(DatasetError):
    pass


@dataclass(frozen=True)
class VisitRecord:
    """One clinic visit: identifiers, feature map, outcome, weight."""

    patient_id: str
    care_date: datetime.date
    features: MappingProxyType
    target: float | None
    weight: float = 1.0
    source: str = "observed"

    def __post_init__(self):
        if not isinstance(self.care_date, datetime.date):
            raise DatasetError(f"care_date must be a date, got {type(self.care_date).__name__}")
        if self.target is not None and not math.isfinite(self.target):
            raise DatasetError(f"target must be finite when present, got {self.target!r}")
        if not (math.isfinite(self.weight) and self.weight >= 0):
            raise DatasetError(f"weight must be finite and >= 0, got {self.weight!r}")
        if not isinstance(self.features, MappingProxyType):
            object.__setattr__(self, "features", MappingProxyType(dict(self.features)))


class Dataset:
    """Immutable, sorted, uniquely-keyed visit table.

    Columns: patient_ids (str), care_dates (datetime.date), X (n x p float,
    NaN = missing), target (NaN = absent), weights, sources. Rows are sorted
    by (patient_id, care_date) and that key is unique.
    """

    __slots__ = (
        "schema",
        "target_name",
        "patient_ids",
        "care_dates",
        "X",
        "target",
        "weights",
        "sources",
    )

    def __init__(
        self,
        schema,
        patient_ids,
        care_dates,
        X,
        target,
        weights=None,
        sources=None,
        target_name: str = "target",
    ):
        schema = tuple(str(s) for s in schema)
        if len(set(schema)) != len(schema):
            raise DatasetError("schema contains duplicate feature names")
        if RESERVED_ID in schema or RESERVED_DATE in schema:
            raise DatasetError(f"schema may not use reserved names {RESERVED_ID!r}/{RESERVED_DATE!r}")
        ids = np.asarray([str(p) for p in patient_ids], dtype=object)
        dates = np.asarray(list(care_dates), dtype=object)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, len(schema))
        n = len(ids)
        if X.shape != (n, len(schema)):
            raise DatasetError(f"X has shape {X.shape}, expected ({n}, {len(schema)})")
        target = np.asarray(target, dtype=np.float64).ravel()
        if len(target) != n or len(dates) != n:
            raise DatasetError("column lengths disagree")
        if np.isinf(target).any():
            raise DatasetError("target contains infinite values")
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
        if len(w) != n or not np.all(np.isfinite(w)) or (w < 0).any():
            raise DatasetError("weights must be finite, non-negative, length n")
        src = (
            np.asarray(["observed"] * n, dtype=object)
            if sources is None
            else np.asarray([str(s) for s in sources], dtype=object)
        )
        if len(src) != n:
            raise DatasetError("sources length disagrees")
        for d in dates:
            if not isinstance(d, datetime.date):
                raise DatasetError(f"care dates must be datetime.date, got {type(d).__name__}")

        order = sorted(range(n), key=lambda i: (ids[i], dates[i]))
        order = np.asarray(order, dtype=np.int64)
        ids, dates, X, target, w, src = (
            ids[order],
            dates[order],
            X[order],
            target[order],
            w[order],
            src[order],
        )
        for i in range(1, n):
            if ids[i] == ids[i - 1] and dates[i] == dates[i - 1]:
                raise DuplicateVisitError(
                    f"duplicate visit key ({ids[i]}, {dates[i].isoformat()})"
                )
        for arr in (ids, dates, X, target, w, src):
            arr.setflags(write=False)
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "target_name", str(target_name))
        object.__setattr__(self, "patient_ids", ids)
        object.__setattr__(self, "care_dates", dates)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sources", src)

    def __setattr__(self, name, value):
        raise AttributeError("Dataset is immutable")

    # -- basic accessors -------------------------------------------------
    @property
    def n_records(self) -> int:
        return len(self.patient_ids)

    @property
    def n_patients(self) -> int:
        return len(set(self.patient_ids))

    def __len__(self) -> int:
        return self.n_records

    def feature_index(self, name: str) -> int:
        try:
            return self.schema.index(name)
        except ValueError:
            raise DatasetError(f"unknown feature {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.feature_index(name)]

    @property
    def records(self) -> tuple:
        """Materialize the rows as immutable VisitRecord values."""
        out = []
        for i in range(self.n_records):
            feats = {f: float(self.X[i, j]) for j, f in enumerate(self.schema)}
            t = self.target[i]
            out.append(
                VisitRecord(
                    patient_id=str(self.patient_ids[i]),
                    care_date=self.care_dates[i],
                    features=MappingProxyType(feats),
                    target=None if math.isnan(t) else float(t),
                    weight=float(self.weights[i]),
                    source=str(self.sources[i]),
                )
            )
        return tuple(out)

    @classmethod
    def from_records(cls, records, schema=None, target_name: str = "target") -> "Dataset":
        records = list(records)
        if schema is None:
            if not records:
                raise DatasetError("cannot infer a schema from zero records")
            schema = tuple(records[0].features.keys())
        schema = tuple(schema)
        sset = set(schema)
        for r in records:
            if set(r.features.keys()) != sset:
                raise DatasetError(
                    f"record ({r.patient_id}, {r.care_date}) feature keys do not match schema"
                )
        X = np.array([[r.features[f] for f in schema] for r in records], dtype=np.float64)
        X = X.reshape(len(records), len(schema))
        target = np.array(
            [np.nan if r.target is None else r.target for r in records], dtype=np.float64
        )
        return cls(
            schema,
            [r.patient_id for r in records],
            [r.care_date for r in records],
            X,
            target,
            weights=[r.weight for r in records],
            sources=[r.source for r in records],
            target_name=target_name,
        )

    # -- derived construction -------------------------------------------
    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Dataset(
            self.schema,
            self.patient_ids[index],
            self.care_dates[index],
            self.X[index],
            self.target[index],
            weights=self.weights[index],
            sources=self.sources[index],
            target_name=self.target_name,
        )

    def with_columns(self, names, values) -> "Dataset":
        """Append feature columns; existing columns and row order are kept."""
        names = tuple(names)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.shape != (self.n_records, len(names)):
            raise DatasetError(f"values shape {values.shape} != ({self.n_records}, {len(names)})")
        for nm in names:
            if nm in self.schema:
                raise DatasetError(f"column {nm!r} already exists")
        return Dataset(
            self.schema + names,
            self.patient_ids,
            self.care_dates,
            np.column_stack([self.X, values]),
            self.target,
            weights=self.weights,
            sources=self.sources,
            target_name=self.target_name,
        )

    def append_records(self, records) -> "Dataset":
        """New Dataset with extra rows; originals are untouched (value copy)."""
        extra = Dataset.from_records(records, schema=self.schema, target_name=self.target_name)
        return concat(self, extra)

    def patient_index(self, patient_id: str) -> np.ndarray:
        return np.flatnonzero(self.patient_ids == str(patient_id))

    def groups(self):
        """Yield (patient_id, start, stop) contiguous row slices, in order."""
        ids = self.patient_ids
        n = len(ids)
        start = 0
        for i in range(1, n + 1):
            if i == n or ids[i] != ids[start]:
                yield str(ids[start]), start, i
                start = i


def concat(*datasets: Dataset) -> Dataset:
    """Row-concatenate datasets sharing a schema (keys must stay unique)."""
    if not datasets:
        raise DatasetError("concat needs at least one dataset")
    first = datasets[0]
    for d in datasets[1:]:
        if d.schema != first.schema:
            raise DatasetError("cannot concat datasets with different schemas")
    return Dataset(
        first.schema,
        np.concatenate([d.patient_ids for d in datasets]),
        np.concatenate([d.care_dates for d in datasets]),
        np.vstack([d.X for d in datasets]),
        np.concatenate([d.target for d in datasets]),
        weights=np.concatenate([d.weights for d in datasets]),
        sources=np.concatenate([d.sources for d in datasets]),
        target_name=first.target_name,
    )


# -- lag derivations ------------------------------------------------------

_LAG_KINDS = ("lag", "delta", "rolling-rate")


@dataclass(frozen=True)
class LagDerivation:
    source: str
    kind: str
    k: int
    name: str

    def __post_init__(self):
        if self.kind not in _LAG_KINDS:
            raise DatasetError(f"unknown lag kind {self.kind!r}; expected one of {_LAG_KINDS}")
        if self.k < 1:
            raise DatasetError(f"lag order k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class LagSpec:
    derivations: tuple

    def __post_init__(self):
        object.__setattr__(self, "derivations", tuple(self.derivations))
        names = [d.name for d in self.derivations]
        if len(set(names)) != len(names):
            raise DatasetError("LagSpec output names collide with each other")


def derive_lags(d: Dataset, spec: LagSpec) -> Dataset:
    """Append lagged feature columns; earlier visits than the window allows
    get the NaN missing marker.

    kinds: "lag" is value k visits before; "delta" is the inter-visit change
    observed k visits before (value_{t-k} - value_{t-k-1}); "rolling-rate"
    is value_{t-k} divided by the elapsed weeks between visits t-k-1 and
    t-k (a per-week dose rate, lagged like delta).
    """
    for der in spec.derivations:
        if der.source not in d.schema:
            raise DatasetError(f"unknown source feature {der.source!r}")
        if der.name in d.schema:
            raise DatasetError(f"output column {der.name!r} already exists")
    n = d.n_records
    cols = np.full((n, len(spec.derivations)), np.nan)
    spans = list(d.groups())
    for j, der in enumerate(spec.derivations):
        v = d.column(der.source)
        k = der.k
        for _, start, stop in spans:
            if der.kind == "lag":
                if stop - start > k:
                    cols[start + k : stop, j] = v[start : stop - k]
            elif der.kind == "delta":
                if stop - start > k + 1:
                    cols[start + k + 1 : stop, j] = (
                        v[start + 1 : stop - k] - v[start : stop - k - 1]
                    )
            else:  # rolling-rate
                if stop - start > k + 1:
                    for i in range(start + k + 1, stop):
                        days = (d.care_dates[i - k] - d.care_dates[i - k - 1]).days
                        if days > 0:
                            cols[i, j] = v[i - k] / (days / 7.0)
    return d.with_columns(tuple(der.name for der in spec.derivations), cols)


# -- temporal split -------------------------------------------------------


@dataclass(frozen=True)
class TrainTestSplit:
    train: Dataset
    test: Dataset
    warning: str | None = None

    def __iter__(self):
        return iter((self.train, self.test))


def temporal_split(d: Dataset, cutoff: datetime.date) -> TrainTestSplit:
    """Records dated on or before the cutoff train; later records test."""
    mask = np.array([c <= cutoff for c in d.care_dates], dtype=bool)
    train = d.subset(mask)
    test = d.subset(~mask)
    warning = None
    if train.n_records == 0:
        warning = "training split is empty"
    elif test.n_records == 0:
        warning = "test split is empty"
    return TrainTestSplit(train=train, test=test, warning=warning)


# -- CSV ingestion --------------------------------------------------------


def load_csv(path, schema, target_name: str) -> Dataset:
    """Read a long-format visit CSV (one row per visit).

    Required columns: ID, Care_Date (ISO dates), target_name, every schema
    feature. An optional Weight column supplies row weights. Empty cells are
    missing. All malformed cells are collected and reported with their file
    line numbers (header is line 1).
    """
    schema = tuple(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumnError(f"{path}: file has no header row") from None
        header = [h.strip() for h in header]
        required = [RESERVED_ID, RESERVED_DATE, target_name, *schema]
        missing = [c for c in dict.fromkeys(required) if c not in header]
        if missing:
            raise MissingColumnError(f"{path}: missing columns {missing}")
        col = {name: header.index(name) for name in header}
        has_weight = OPTIONAL_WEIGHT in header

        ids, dates, rows, targets, weights, lines = [], [], [], [], [], []
        problems = []
        for line_no, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                problems.append(f"line {line_no}: expected {len(header)} cells, got {len(raw)}")
                continue
            pid = raw[col[RESERVED_ID]].strip()
            date_text = raw[col[RESERVED_DATE]].strip()
            try:
                care_date = datetime.date.fromisoformat(date_text)
            except ValueError:
                problems.append(f"line {line_no}: unparseable date {date_text!r}")
                continue
            ok = True
            feats = np.empty(len(schema))
            for j, f in enumerate(schema):
                cell = raw[col[f]].strip()
                if cell == "":
                    feats[j] = np.nan
                    continue
                try:
                    feats[j] = float(cell)
                except ValueError:
                    problems.append(f"line {line_no}: malformed numeric {cell!r} in {f!r}")
                    ok = False
            tcell = raw[col[target_name]].strip()
            if tcell == "":
                tval = np.nan
            else:
                try:
                    tval = float(tcell)
                except ValueError:
                    problems.append(f"line {line_no}: malformed numeric {tcell!r} in {target_name!r}")
                    ok = False
            wval = 1.0
            if has_weight:
                wcell = raw[col[OPTIONAL_WEIGHT]].strip()
                if wcell:
                    try:
                        wval = float(wcell)
                    except ValueError:
                        problems.append(
                            f"line {line_no}: malformed numeric {wcell!r} in {OPTIONAL_WEIGHT!r}"
                        )
                        ok = False
            if not ok:
                continue
            ids.append(pid)
            dates.append(care_date)
            rows.append(feats)
            targets.append(tval)
            weights.append(wval)
            lines.append(line_no)

    if problems:
        raise MalformedValueError(f"{path}: " + "; ".join(problems))

    # Duplicate keys reported with both offending file lines.
    seen: dict = {}
    for i, key in enumerate(zip(ids, dates)):
        if key in seen:
            raise DuplicateVisitError(
                f"{path}: duplicate visit ({key[0]}, {key[1].isoformat()}) "
                f"on lines {seen[key]} and {lines[i]}"
            )
        seen[key] = lines[i]

    X = np.array(rows, dtype=np.float64).reshape(len(ids), len(schema))
    return Dataset(
        schema,
        ids,
        dates,
        X,
        np.asarray(targets, dtype=np.float64),
        weights=weights,
        target_name=target_name,
    )


def _format_cell(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_csv(d: Dataset, path) -> None:
    """Write a Dataset in the ingestion format (load_csv round-trips it)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([RESERVED_ID, RESERVED_DATE, d.target_name, OPTIONAL_WEIGHT, *d.schema])
        for i in range(d.n_records):
            writer.writerow(
                [
                    d.patient_ids[i],
                    d.care_dates[i].isoformat(),
                    _format_cell(d.target[i]),
                    repr(float(d.weights[i])),
                    *(_format_cell(x) for x in d.X[i]),
                ]
            )
