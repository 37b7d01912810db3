"""Observed test-negative design data: rows, schema, CSV I/O and validation.

Each row is an enrolled, symptomatic, tested participant with an exposure
observation indicator ``delta``, the exposure ``a`` (present iff ``delta == 1``),
test result ``y`` (1 = positive) and covariates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .exceptions import DataError

KINDS = ("binary", "continuous")
FIXED_COLUMNS = ("delta", "a", "y")


class ParseError(DataError):
    """A cell could not be parsed."""


class SchemaError(DataError):
    """Header or covariate kinds do not match the declared schema."""


class MissingnessError(DataError):
    """Exposure present where ``delta == 0`` or absent where ``delta == 1``."""


@dataclass(frozen=True)
class Column:
    name: str
    kind: str = "continuous"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: kind must be one of {KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class Schema:
    """Ordered covariate columns with their kinds."""

    columns: tuple[Column, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate covariate names in {names}")
        clash = set(names) & set(FIXED_COLUMNS)
        if clash:
            raise SchemaError(f"covariate names clash with reserved columns: {sorted(clash)}")

    @classmethod
    def from_spec(cls, spec) -> "Schema":
        """Build from ``{"name": "kind", ...}``, ``[(name, kind), ...]`` or a Schema."""
        if isinstance(spec, Schema):
            return spec
        items = spec.items() if isinstance(spec, dict) else spec
        return cls(tuple(Column(str(n), str(k)) for n, k in items))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(c.kind for c in self.columns)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate {name!r}; schema has {list(self.names)}") from None

    def to_dict(self) -> dict[str, str]:
        return {c.name: c.kind for c in self.columns}


@dataclass(frozen=True)
class Observation:
    delta: int
    a: int | None
    y: int
    x: tuple[float, ...]


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store of TND observations.

    The exposure is held with NaN where ``delta == 0``; estimators read it
    through :attr:`a_observed`, which is zero on those rows, so masked
    exposures cannot leak into a fit.
    """

    delta: np.ndarray
    a: np.ndarray
    y: np.ndarray
    x: np.ndarray
    schema: Schema
    _meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.delta)
        delta = np.asarray(self.delta)
        a = np.asarray(self.a, dtype=np.float64)
        y = np.asarray(self.y)
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(n, -1)
        if not (len(a) == len(y) == x.shape[0] == n):
            raise DataError("delta, a, y and x must have the same number of rows")
        if x.shape[1] != len(self.schema.columns):
            raise SchemaError(f"x has {x.shape[1]} columns but schema declares {len(self.schema.columns)}")
        if not np.isin(delta, (0, 1)).all():
            raise DataError("delta must be 0 or 1")
        if not np.isin(y, (0, 1)).all():
            raise DataError("y must be 0 or 1")
        obs = delta == 1
        if np.isnan(a[obs]).any():
            i = int(np.flatnonzero(obs & np.isnan(a))[0])
            raise MissingnessError(f"row {i}: exposure missing although delta=1")
        if (~np.isnan(a[~obs])).any():
            i = int(np.flatnonzero(~obs & ~np.isnan(a))[0])
            raise MissingnessError(f"row {i}: exposure present although delta=0")
        if not np.isin(a[obs], (0, 1)).all():
            raise DataError("observed exposure must be 0 or 1")
        object.__setattr__(self, "delta", _readonly(delta.astype(np.int8)))
        object.__setattr__(self, "a", _readonly(a))
        object.__setattr__(self, "y", _readonly(y.astype(np.int8)))
        object.__setattr__(self, "x", _readonly(x))

    @classmethod
    def from_arrays(cls, delta, a, y, x, schema) -> "Dataset":
        """Build from arrays; `a` may contain values on ``delta == 0`` rows, which are dropped."""
        delta = np.asarray(delta)
        a = np.asarray(a, dtype=np.float64).copy()
        a[delta == 0] = np.nan
        return cls(delta, a, y, x, Schema.from_spec(schema))

    @classmethod
    def from_rows(cls, rows: Iterable[Observation], schema) -> "Dataset":
        rows = list(rows)
        schema = Schema.from_spec(schema)
        r = len(schema.columns)
        x = np.array([list(o.x) for o in rows], dtype=np.float64).reshape(len(rows), r)
        a = np.array([np.nan if o.a is None else o.a for o in rows], dtype=np.float64)
        return cls(np.array([o.delta for o in rows]), a, np.array([o.y for o in rows]), x, schema)

    @property
    def n(self) -> int:
        return len(self.delta)

    @property
    def a_observed(self) -> np.ndarray:
        """Exposure times delta: the observed exposure, 0 where missing."""
        return np.where(self.delta == 1, np.nan_to_num(self.a, nan=0.0), 0.0)

    @property
    def observed(self) -> np.ndarray:
        return self.delta == 1

    def column(self, name: str) -> np.ndarray:
        return self.x[:, self.schema.index(name)]

    def row(self, i: int) -> Observation:
        a = None if self.delta[i] == 0 else int(self.a[i])
        return Observation(int(self.delta[i]), a, int(self.y[i]), tuple(float(v) for v in self.x[i]))

    def rows(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield self.row(i)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.delta[idx], self.a[idx], self.y[idx], self.x[idx], self.schema)

    def with_delta(self, delta) -> "Dataset":
        """Return a copy observing exposure only where `delta` is 1.

        Every newly observed row must already have its exposure.
        """
        delta = np.asarray(delta)
        a = self.a.copy()
        a[delta == 0] = np.nan
        return Dataset(delta, a, self.y, self.x, self.schema)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and np.array_equal(self.delta, other.delta)
            and np.array_equal(self.a, other.a, equal_nan=True)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x, equal_nan=True)
        )

    def __len__(self) -> int:
        return self.n


# -- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    counts: dict[tuple[int, int], int]
    ranges: dict[str, tuple[float, float]]
    failures: tuple[str, ...]

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self) -> str:
        lines = [f"cell (delta={d}, y={y}): {c}" for (d, y), c in sorted(self.counts.items())]
        lines += [f"{k}: [{lo:g}, {hi:g}]" for k, (lo, hi) in self.ranges.items()]
        lines += [f"FAIL: {f}" for f in self.failures]
        return "\n".join(lines)


def validate(ds: Dataset) -> ValidationReport:
    """Check the dataset invariants; failures are reported, never raised."""
    failures = []
    counts = {(d, y): int(np.sum((ds.delta == d) & (ds.y == y))) for d in (0, 1) for y in (0, 1)}
    if ds.n < 1:
        failures.append("dataset is empty")
    if counts[(1, 1)] == 0:
        failures.append("no observed-exposure cases (delta=1, y=1)")
    if counts[(1, 0)] == 0:
        failures.append("no observed-exposure noncases (delta=1, y=0)")
    ranges = {}
    for j, col in enumerate(ds.schema.columns):
        v = ds.x[:, j]
        bad = np.flatnonzero(~np.isfinite(v))
        for i in bad[:5]:
            failures.append(f"non-finite covariate at row {int(i)}, column {col.name!r}")
        fin = v[np.isfinite(v)]
        ranges[col.name] = (float(fin.min()), float(fin.max())) if fin.size else (math.nan, math.nan)
        if col.kind == "binary" and not np.isin(fin, (0.0, 1.0)).all():
            i = int(np.flatnonzero(np.isfinite(v) & ~np.isin(v, (0.0, 1.0)))[0])
            failures.append(f"binary covariate {col.name!r} has value {v[i]:g} at row {i}")
    return ValidationReport(counts, ranges, tuple(failures))


# -- CSV ----------------------------------------------------------------------


def _parse_int01(cell: str, what: str, line: int, allow_empty=False):
    cell = cell.strip()
    if cell == "" and allow_empty:
        return None
    if cell not in ("0", "1"):
        raise ParseError(f"line {line}: column {what!r} must be 0 or 1, got {cell!r}")
    return int(cell)


def _infer_schema(names: Sequence[str], rows: list[list[str]]) -> Schema:
    cols = []
    for j, name in enumerate(names):
        vals = {r[3 + j].strip() for r in rows if len(r) > 3 + j}
        kind = "binary" if vals <= {"0", "1", "0.0", "1.0"} else "continuous"
        cols.append(Column(name, kind))
    return Schema(tuple(cols))


def load_dataset(path, schema=None, *, strict: bool = True) -> Dataset:
    """Read a ``delta,a,y,<covariates...>`` CSV; an empty ``a`` cell means missing.

    When `schema` is None the covariate kinds are inferred (0/1 columns are
    binary). With `strict`, a dataset failing :func:`validate` raises
    :class:`DataError`.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        raw = list(reader)
    if tuple(header[:3]) != FIXED_COLUMNS:
        raise SchemaError(f"{path}: header must start with delta,a,y; got {header[:3]}")
    names = header[3:]
    if schema is None:
        schema = _infer_schema(names, [r for r in raw if r])
    else:
        schema = Schema.from_spec(schema)
        if tuple(names) != schema.names:
            raise SchemaError(f"{path}: header covariates {names} do not match schema {list(schema.names)}")

    n = len(raw)
    delta = np.empty(n, dtype=np.int8)
    a = np.full(n, np.nan)
    y = np.empty(n, dtype=np.int8)
    x = np.empty((n, len(names)))
    for i, row in enumerate(raw):
        line = i + 2
        if len(row) != len(header):
            raise ParseError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        delta[i] = _parse_int01(row[0], "delta", line)
        ai = _parse_int01(row[1], "a", line, allow_empty=True)
        if delta[i] == 1 and ai is None:
            raise MissingnessError(f"line {line}: exposure missing although delta=1")
        if delta[i] == 0 and ai is not None:
            raise MissingnessError(f"line {line}: exposure present although delta=0")
        if ai is not None:
            a[i] = ai
        y[i] = _parse_int01(row[2], "y", line)
        for j, cell in enumerate(row[3:]):
            try:
                x[i, j] = float(cell)
            except ValueError:
                raise ParseError(f"line {line}: column {names[j]!r} is not a number: {cell!r}") from None

    ds = Dataset(delta, a, y, x, schema)
    if strict:
        report = validate(ds)
        if not report.passed:
            raise DataError(f"{path}: " + "; ".join(report.failures))
    return ds


def _fmt(v: float, kind: str) -> str:
    if kind == "binary" and v in (0.0, 1.0):
        return str(int(v))
    return repr(float(v))


def save_dataset(ds: Dataset, path) -> None:
    """Write `ds` in the CSV layout read by :func:`load_dataset` (lossless for floats)."""
    path = Path(path)
    kinds = ds.schema.kinds
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIXED_COLUMNS + ds.schema.names)
        for i in range(ds.n):
            a = "" if ds.delta[i] == 0 else str(int(ds.a[i]))
            w.writerow([int(ds.delta[i]), a, int(ds.y[i])] + [_fmt(v, k) for v, k in zip(ds.x[i], kinds)])
