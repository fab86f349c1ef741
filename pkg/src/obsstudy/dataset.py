"""Observational-study data: loading, validation, standardization and group views.

A :class:`StudyData` holds one row per sampled unit with the observed
response ``y``, the treatment indicator ``t`` (1 = treatment group), the
sampling weight ``w`` (reciprocal inclusion probability) and a matrix of
named covariates.  Two ordered name lists select the covariates entering the
outcome model (``x_names``) and the assignment model (``v_names``).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Base class for problems with study data."""


class SchemaError(DataError):
    """A column required by the schema is missing."""


class DataParseError(DataError):
    """A cell could not be parsed; ``row`` is the 1-based data row number."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class ValidationError(DataError):
    """Parsed values violate an invariant (weights, treatment codes, roles)."""


class DegenerateCovariateError(DataError):
    """A covariate has zero variance and cannot be standardized."""


@dataclass(frozen=True)
class Observation:
    y: float
    t: int
    w: float
    covariates: dict[str, float]


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for :func:`load_csv`.

    ``w`` may be None, in which case every unit gets weight 1.  When
    ``covariates`` is None the covariate columns are the union of
    ``x_names`` and ``v_names``.
    """

    y: str
    t: str
    x_names: Sequence[str]
    v_names: Sequence[str]
    w: str | None = None
    covariates: Sequence[str] | None = None

    @classmethod
    def from_mapping(cls, m: Mapping) -> "CsvSchema":
        return cls(
            y=m["y"],
            t=m["t"],
            x_names=tuple(m["x_names"]),
            v_names=tuple(m["v_names"]),
            w=m.get("w"),
            covariates=tuple(m["covariates"]) if m.get("covariates") else None,
        )

    def covariate_columns(self) -> tuple[str, ...]:
        if self.covariates:
            return tuple(self.covariates)
        return _ordered_union(self.x_names, self.v_names)


def _ordered_union(*seqs: Sequence[str]) -> tuple[str, ...]:
    out: list[str] = []
    for s in seqs:
        for name in s:
            if name not in out:
                out.append(name)
    return tuple(out)


@dataclass(frozen=True)
class StudyData:
    """Immutable container for an observational sample.

    Arrays are stored read-only; derive modified copies with
    :meth:`replace` or the module-level functions.
    """

    y: np.ndarray
    t: np.ndarray
    w: np.ndarray
    covariates: np.ndarray
    names: tuple[str, ...]
    x_names: tuple[str, ...]
    v_names: tuple[str, ...]
    standardization: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        t = np.array(self.t)
        w = np.array(self.w, dtype=float)
        cov = np.array(self.covariates, dtype=float)
        names = tuple(self.names)
        if cov.ndim == 1:
            cov = cov.reshape(len(y), -1)
        n = y.shape[0]
        if t.shape != (n,) or w.shape != (n,) or cov.shape != (n, len(names)):
            raise ValidationError(
                f"inconsistent shapes: y {y.shape}, t {t.shape}, w {w.shape}, "
                f"covariates {cov.shape} for {len(names)} names"
            )
        if len(set(names)) != len(names):
            raise ValidationError("duplicate covariate names")
        if not np.all(np.isin(t, (0, 1))):
            bad = int(np.flatnonzero(~np.isin(t, (0, 1)))[0])
            raise ValidationError(f"treatment indicator must be 0 or 1 (row {bad + 1})")
        if not np.all(np.isfinite(y)):
            raise ValidationError(f"non-finite response (row {int(np.flatnonzero(~np.isfinite(y))[0]) + 1})")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            bad = int(np.flatnonzero(~(np.isfinite(w) & (w > 0)))[0])
            raise ValidationError(f"sampling weights must be finite and > 0 (row {bad + 1})")
        if not np.all(np.isfinite(cov)):
            raise ValidationError("non-finite covariate value")
        x_names, v_names = tuple(self.x_names), tuple(self.v_names)
        if not x_names or not v_names:
            raise ValidationError("x_names and v_names must both be non-empty")
        missing = [nm for nm in x_names + v_names if nm not in names]
        if missing:
            raise ValidationError(f"covariate roles reference unknown names: {missing}")
        for a in (y, w, cov):
            a.setflags(write=False)
        t = t.astype(np.int8)
        t.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "x_names", x_names)
        object.__setattr__(self, "v_names", v_names)
        object.__setattr__(self, "standardization", dict(self.standardization))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def z_names(self) -> tuple[str, ...]:
        """Covariates of either model, x first then the v-only names."""
        return _ordered_union(self.x_names, self.v_names)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.names.index(nm) for nm in names]
        return self.covariates[:, idx]

    @property
    def x(self) -> np.ndarray:
        return self.matrix(self.x_names)

    @property
    def v(self) -> np.ndarray:
        return self.matrix(self.v_names)

    @property
    def z(self) -> np.ndarray:
        return self.matrix(self.z_names)

    def replace(self, **changes) -> "StudyData":
        return replace(self, **changes)

    def with_roles(self, x_names: Sequence[str], v_names: Sequence[str]) -> "StudyData":
        return replace(self, x_names=tuple(x_names), v_names=tuple(v_names))

    def subset(self, indices: Sequence[int] | np.ndarray) -> "StudyData":
        idx = np.asarray(indices)
        return replace(self, y=self.y[idx], t=self.t[idx], w=self.w[idx],
                       covariates=self.covariates[idx])

    def observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(
                y=float(self.y[i]),
                t=int(self.t[i]),
                w=float(self.w[i]),
                covariates=dict(zip(self.names, map(float, self.covariates[i]))),
            )

    def has_exclusion_restriction(self) -> bool:
        return any(nm not in self.v_names for nm in self.x_names)

    def require_exclusion_restriction(self) -> None:
        """Raise unless some outcome covariate is absent from the assignment model.

        Without such a covariate the likelihood scores for the outcome and
        assignment parameters can be collinear and the MLE is not CAN.
        """
        if not self.has_exclusion_restriction():
            raise ValidationError(
                "the outcome covariates x must contain at least one name not in the "
                f"assignment covariates v (x={list(self.x_names)}, v={list(self.v_names)})"
            )


def from_arrays(y, t, covariates: Mapping[str, Sequence[float]], x_names, v_names,
                w=None) -> StudyData:
    """Build :class:`StudyData` from plain arrays keyed by covariate name."""
    names = tuple(covariates)
    n = len(y)
    cov = np.column_stack([np.asarray(covariates[nm], dtype=float) for nm in names]) \
        if names else np.empty((n, 0))
    return StudyData(y=y, t=t, w=np.ones(n) if w is None else w, covariates=cov,
                     names=names, x_names=tuple(x_names), v_names=tuple(v_names))


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        val = float(cell)
    except ValueError:
        raise DataParseError(f"row {row}: column {col!r} is not numeric: {cell!r}", row) from None
    if not math.isfinite(val):
        raise DataParseError(f"row {row}: column {col!r} is not finite: {cell!r}", row)
    return val


def load_csv(path: str | Path, schema: CsvSchema | Mapping) -> StudyData:
    """Read a header-first UTF-8 CSV file into :class:`StudyData`.

    Missing values are rejected; there is no imputation.  Row numbers in
    error messages count data rows from 1 (the header is row 0).
    """
    if not isinstance(schema, CsvSchema):
        schema = CsvSchema.from_mapping(schema)
    cov_cols = schema.covariate_columns()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema.y, schema.t, *cov_cols] + ([schema.w] if schema.w else [])
        absent = [c for c in needed if c not in header]
        if absent:
            raise SchemaError(f"{path}: missing columns {absent}")
        ys, ts, ws, rows = [], [], [], []
        for r, rec in enumerate(reader, start=1):
            ys.append(_parse_float(rec[schema.y], r, schema.y))
            tval = _parse_float(rec[schema.t], r, schema.t)
            if tval not in (0.0, 1.0):
                raise DataParseError(f"row {r}: treatment {schema.t!r} must be 0 or 1, got {rec[schema.t]!r}", r)
            ts.append(int(tval))
            if schema.w:
                wval = _parse_float(rec[schema.w], r, schema.w)
                if wval <= 0:
                    raise ValidationError(f"row {r}: weight {schema.w!r} must be > 0, got {wval!r}")
                ws.append(wval)
            else:
                ws.append(1.0)
            rows.append([_parse_float(rec[c], r, c) for c in cov_cols])
    n = len(ys)
    log.info("loaded %d rows from %s", n, path)
    cov = np.array(rows, dtype=float).reshape(n, len(cov_cols))
    return StudyData(y=np.array(ys), t=np.array(ts), w=np.array(ws), covariates=cov,
                     names=cov_cols, x_names=tuple(schema.x_names), v_names=tuple(schema.v_names))


def write_csv(data: StudyData, path: str | Path, y: str = "y", t: str = "t", w: str = "w") -> None:
    """Write data with shortest round-trip float formatting (exact reload)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow([y, t, w, *data.names])
        for i in range(data.n):
            wr.writerow([repr(float(data.y[i])), int(data.t[i]), repr(float(data.w[i])),
                         *(repr(float(v)) for v in data.covariates[i])])


def is_binary(values: np.ndarray) -> bool:
    return bool(np.all((values == 0) | (values == 1)))


def standardize(data: StudyData, names: Sequence[str] | None = None) -> StudyData:
    """Center and scale continuous covariates to mean 0, sd 1 (ddof=1).

    Binary covariates (values in {0, 1}) are left untouched even when named.
    Re-standardizing composes with earlier metadata so ``standardization``
    always maps a name to the (mean, sd) of the original scale.
    """
    if names is None:
        names = data.names
    cov = np.array(data.covariates)
    meta = dict(data.standardization)
    for nm in names:
        j = data.names.index(nm)
        col = cov[:, j]
        if is_binary(col):
            continue
        mean = float(col.mean())
        sd = float(col.std(ddof=1)) if col.size > 1 else 0.0
        if not sd > 0:
            raise DegenerateCovariateError(f"covariate {nm!r} has zero variance")
        cov[:, j] = (col - mean) / sd
        m0, s0 = meta.get(nm, (0.0, 1.0))
        meta[nm] = (m0 + s0 * mean, s0 * sd)
    return replace(data, covariates=cov, standardization=meta)


def covariate_means(data: StudyData, weighted: bool = False,
                    names: Sequence[str] | None = None) -> dict[str, float]:
    """Unweighted or Hajek-weighted covariate means."""
    if data.n == 0:
        raise ValidationError("no observations")
    names = data.names if names is None else tuple(names)
    X = data.matrix(names)
    if weighted:
        m = data.w @ X / data.w.sum()
    else:
        m = X.mean(axis=0)
    return dict(zip(names, map(float, m)))


@dataclass(frozen=True)
class GroupView:
    """Read-only view of the units with treatment indicator ``group``."""

    parent: StudyData
    group: int
    indices: np.ndarray

    @property
    def n_t(self) -> int:
        return int(self.indices.size)

    @property
    def y(self) -> np.ndarray:
        return self.parent.y[self.indices]

    @property
    def w(self) -> np.ndarray:
        return self.parent.w[self.indices]

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return self.parent.matrix(names)[self.indices]


def split_groups(data: StudyData) -> tuple[GroupView, GroupView]:
    """Return the (treatment, control) views; input order is preserved."""
    i1 = np.flatnonzero(data.t == 1)
    i0 = np.flatnonzero(data.t == 0)
    return GroupView(data, 1, i1), GroupView(data, 0, i0)
