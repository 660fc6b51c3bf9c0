"""Data model: samples, covariate cells, and the cell-size restriction.

A :class:`Sample` holds per-unit records (outcome ``y``, binary treatment
``d``, binary instrument ``z``, plus named covariate columns).  A
:class:`CellTable` partitions a sample by the distinct combinations of a
chosen list of discrete covariates and stores per-cell sufficient
statistics: arm-specific means of ``y`` and ``d``, counts, the share of
observations, and the within-cell instrument variance.  Everything
downstream (estimators, weights, decompositions) consumes these two types.

All types are immutable after construction and safe to share across
threads; operations return new objects.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DataError, SchemaError

DEFAULT_MIN_CELL_N = 5

_RULE_OPS = {
    ">": np.greater,
    ">=": np.greater_equal,
    "<": np.less,
    "<=": np.less_equal,
    "==": np.equal,
}


@dataclass(frozen=True)
class TreatmentRule:
    """Rule that binarizes a raw treatment column.

    ``TreatmentRule(">", 12.0)`` maps values strictly greater than 12 to 1
    and everything else to 0.  The special op ``"binary"`` asserts the
    column is already 0/1.
    """

    op: str
    threshold: float = 0.0

    def __post_init__(self) -> None:
        if self.op != "binary" and self.op not in _RULE_OPS:
            raise SchemaError(f"unknown treatment rule operator {self.op!r}")

    @classmethod
    def parse(cls, text: str) -> "TreatmentRule":
        """Parse a rule like ``">12"``, ``"<=8"``, ``"==1"`` or ``"binary"``."""
        text = text.strip()
        if text == "binary":
            return cls("binary")
        for op in (">=", "<=", "==", ">", "<"):
            if text.startswith(op):
                try:
                    return cls(op, float(text[len(op):]))
                except ValueError:
                    break
        raise SchemaError(f"cannot parse treatment rule {text!r}")

    def apply(self, values: np.ndarray, column: str = "treatment") -> np.ndarray:
        values = np.asarray(values, dtype=float)
        bad = ~np.isfinite(values)
        if bad.any():
            raise DataError(
                f"column {column!r}: non-finite value at row {int(np.argmax(bad))}"
            )
        if self.op == "binary":
            return _require_binary(values, column)
        return _RULE_OPS[self.op](values, self.threshold).astype(np.int8)

    def __str__(self) -> str:
        return "binary" if self.op == "binary" else f"{self.op}{self.threshold:g}"


def _require_binary(values: np.ndarray, column: str) -> np.ndarray:
    ok = (values == 0) | (values == 1)
    if not ok.all():
        idx = int(np.argmax(~ok))
        raise DataError(
            f"column {column!r}: value {values[idx]!r} at row {idx} is not binary"
        )
    return values.astype(np.int8)


@dataclass(frozen=True, eq=False)
class Sample:
    """Validated estimation sample.

    Parameters
    ----------
    y : ndarray
        Outcome, finite floats.
    d : ndarray
        Binary treatment indicator.
    z : ndarray
        Binary instrument; both arms must be non-empty.
    covariates : mapping of str to ndarray
        Additional named columns, discrete or continuous.
    column_map : mapping of str to str
        Names of the source columns for the ``y``/``d``/``z`` roles.
    """

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    covariates: Mapping[str, np.ndarray]
    column_map: Mapping[str, str]

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float)
        bad = ~np.isfinite(y)
        if bad.any():
            raise DataError(f"non-finite outcome at row {int(np.argmax(bad))}")
        d = _require_binary(np.asarray(self.d, dtype=float), "d")
        z = _require_binary(np.asarray(self.z, dtype=float), "z")
        if not (len(y) == len(d) == len(z)):
            raise DataError("y, d, z must have equal length")
        for name, col in self.covariates.items():
            if len(col) != len(y):
                raise DataError(f"covariate {name!r} has mismatched length")
        if len(y) == 0:
            raise DataError("sample is empty")
        if z.sum() == 0 or z.sum() == len(z):
            raise DataError("instrument has an empty arm: need both z=0 and z=1 rows")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "z", z)
        object.__setattr__(
            self,
            "covariates",
            {k: np.asarray(v) for k, v in self.covariates.items()},
        )

    @property
    def n(self) -> int:
        return len(self.y)

    def column(self, name: str) -> np.ndarray:
        """Covariate column by name; raises SchemaError when absent."""
        try:
            return self.covariates[name]
        except KeyError:
            raise SchemaError(f"no covariate column named {name!r}") from None

    def with_z(self, z: np.ndarray) -> "Sample":
        """Copy of the sample with a replaced instrument column."""
        return Sample(self.y, self.d, z, self.covariates, self.column_map)

    def take(self, idx: np.ndarray) -> "Sample":
        """Row subset / resample by integer indices or boolean mask."""
        idx = np.asarray(idx)
        return Sample(
            self.y[idx],
            self.d[idx],
            self.z[idx],
            {k: v[idx] for k, v in self.covariates.items()},
            self.column_map,
        )

    def select(self, names: Sequence[str]) -> "Sample":
        """Copy keeping only the named covariate columns (slim view for
        resampling-heavy work)."""
        return Sample(
            self.y,
            self.d,
            self.z,
            {name: self.column(name) for name in names},
            self.column_map,
        )


@dataclass(frozen=True)
class Cell:
    """Sufficient statistics for one covariate cell.

    Arm-specific means are NaN when the corresponding instrument arm is
    empty; such a cell is retained but flagged via :attr:`identified`.
    """

    key: tuple[int, ...]
    n: int
    n_z1: int
    n_z0: int
    mean_y_z1: float
    mean_y_z0: float
    mean_d_z1: float
    mean_d_z0: float
    share: float
    var_z: float

    @property
    def identified(self) -> bool:
        return self.n_z1 > 0 and self.n_z0 > 0


@dataclass(frozen=True, eq=False)
class CellTable:
    """Cells sorted lexicographically by key, plus the total row count."""

    cells: tuple[Cell, ...]
    total_n: int
    covariate_names: tuple[str, ...]

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def keys(self) -> list[tuple[int, ...]]:
        return [c.key for c in self.cells]

    def arrays(self) -> "CellArrays":
        """Per-cell statistics as parallel numpy arrays (cells order)."""
        c = self.cells
        return CellArrays(
            n=np.array([x.n for x in c], dtype=float),
            n_z1=np.array([x.n_z1 for x in c], dtype=float),
            n_z0=np.array([x.n_z0 for x in c], dtype=float),
            share=np.array([x.share for x in c]),
            var_z=np.array([x.var_z for x in c]),
            mean_y_z1=np.array([x.mean_y_z1 for x in c]),
            mean_y_z0=np.array([x.mean_y_z0 for x in c]),
            mean_d_z1=np.array([x.mean_d_z1 for x in c]),
            mean_d_z0=np.array([x.mean_d_z0 for x in c]),
        )


@dataclass(frozen=True, eq=False)
class CellArrays:
    n: np.ndarray
    n_z1: np.ndarray
    n_z0: np.ndarray
    share: np.ndarray
    var_z: np.ndarray
    mean_y_z1: np.ndarray
    mean_y_z0: np.ndarray
    mean_d_z1: np.ndarray
    mean_d_z0: np.ndarray


def load_sample(
    path: str | Path,
    column_map: Mapping[str, str],
    treatment_rule: TreatmentRule | None = None,
    delimiter: str = ",",
) -> Sample:
    """Load a CSV file into a validated :class:`Sample`.

    ``column_map`` must map the roles ``y``, ``d`` and ``z`` to source
    column names.  ``treatment_rule`` binarizes the raw treatment column
    (default: require it to be 0/1 already).  All other numeric columns in
    the file are retained as covariates under their own names; row order
    is preserved.
    """
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"data file not found: {p}")
    try:
        frame = pd.read_csv(p, sep=delimiter, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise SchemaError(f"empty data file: {p}") from None
    if frame.shape[0] == 0:
        raise SchemaError(f"no data rows in {p}")

    for role in ("y", "d", "z"):
        if role not in column_map:
            raise SchemaError(f"column_map is missing the {role!r} role")
        col = column_map[role]
        if col not in frame.columns:
            raise SchemaError(f"mapped column {col!r} (role {role!r}) not found in {p}")

    ycol, dcol, zcol = (column_map[r] for r in ("y", "d", "z"))
    y = pd.to_numeric(frame[ycol], errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(y)
    if bad.any():
        raise DataError(
            f"column {ycol!r}: non-finite outcome at row {int(np.argmax(bad))}"
        )

    rule = treatment_rule or TreatmentRule("binary")
    d = rule.apply(pd.to_numeric(frame[dcol], errors="coerce").to_numpy(dtype=float), dcol)
    z = _require_binary(
        pd.to_numeric(frame[zcol], errors="coerce").to_numpy(dtype=float), zcol
    )

    covariates: dict[str, np.ndarray] = {}
    for name in frame.columns:
        if name in (ycol, dcol, zcol):
            continue
        col = frame[name]
        if col.dtype == bool:
            covariates[name] = col.to_numpy(dtype=np.int64)
            continue
        values = pd.to_numeric(col, errors="coerce")
        if values.isna().all() and not col.isna().all():
            continue  # entirely non-numeric column
        covariates[name] = values.to_numpy(dtype=float)

    return Sample(y, d, z, covariates, dict(column_map))


def _integer_keys(sample: Sample, names: Sequence[str]) -> np.ndarray:
    """Stack the named covariates into an (n, k) int64 matrix, rejecting
    anything that is not integer-valued."""
    if not names:
        raise SchemaError("covariate_spec must name at least one column")
    cols = []
    for name in names:
        col = np.asarray(sample.column(name), dtype=float)
        if not np.isfinite(col).all():
            raise DataError(f"covariate {name!r} has non-finite values")
        rounded = np.round(col)
        if not np.array_equal(rounded, col):
            raise DataError(
                f"covariate {name!r} is not integer-valued; discrete covariates only"
            )
        cols.append(rounded.astype(np.int64))
    return np.column_stack(cols)


def _encode_keys(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group rows of an integer key matrix.

    Returns ``(uniq, inverse)`` where ``uniq`` holds the distinct rows in
    lexicographic order and ``inverse`` maps each row to its group.  Uses a
    radix encoding when the value ranges permit, falling back to
    ``np.unique(axis=0)``.
    """
    lo = keys.min(axis=0)
    hi = keys.max(axis=0)
    ranges = (hi - lo + 1).astype(object)
    total = 1
    for r in ranges:
        total *= int(r)
    if total <= 2**62:
        code = np.zeros(len(keys), dtype=np.int64)
        for j in range(keys.shape[1]):
            code = code * int(ranges[j]) + (keys[:, j] - lo[j])
        uniq_codes, inverse = np.unique(code, return_inverse=True)
        # decode back to key rows (lexicographic order is preserved)
        uniq = np.empty((len(uniq_codes), keys.shape[1]), dtype=np.int64)
        rem = uniq_codes.copy()
        for j in range(keys.shape[1] - 1, -1, -1):
            uniq[:, j] = rem % int(ranges[j]) + lo[j]
            rem //= int(ranges[j])
        return uniq, inverse
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    return uniq, inverse.ravel()


def _group_means(values: np.ndarray, group: np.ndarray, n_groups: int,
                 counts: np.ndarray) -> np.ndarray:
    """Two-pass group means: a second residual pass absorbs accumulation
    error from the naive sum."""
    with np.errstate(invalid="ignore", divide="ignore"):
        m1 = np.bincount(group, weights=values, minlength=n_groups) / counts
        centered = values - np.where(np.isfinite(m1), m1, 0.0)[group]
        corr = np.bincount(group, weights=centered, minlength=n_groups) / counts
    out = m1 + corr
    out[counts == 0] = np.nan
    return out


def build_cells(sample: Sample, covariate_spec: Sequence[str]) -> CellTable:
    """Partition a sample into covariate cells with sufficient statistics.

    One cell is produced per observed combination of the named discrete
    covariates, sorted lexicographically by key.  Cells whose instrument
    arm is empty are retained but flagged (``Cell.identified`` is False);
    downstream operations reject or drop them per their own contracts.
    """
    keys = _integer_keys(sample, covariate_spec)
    uniq, inverse = _encode_keys(keys)
    k = len(uniq)
    z = sample.z.astype(np.int64)
    arm_group = inverse * 2 + z
    arm_counts = np.bincount(arm_group, minlength=2 * k).astype(np.int64)
    mean_y = _group_means(sample.y, arm_group, 2 * k, arm_counts.astype(float))
    mean_d = _group_means(sample.d.astype(float), arm_group, 2 * k,
                          arm_counts.astype(float))
    total = sample.n
    cells = []
    for i in range(k):
        n0 = int(arm_counts[2 * i])
        n1 = int(arm_counts[2 * i + 1])
        n = n0 + n1
        cells.append(
            Cell(
                key=tuple(int(v) for v in uniq[i]),
                n=n,
                n_z1=n1,
                n_z0=n0,
                mean_y_z1=float(mean_y[2 * i + 1]),
                mean_y_z0=float(mean_y[2 * i]),
                mean_d_z1=float(mean_d[2 * i + 1]),
                mean_d_z0=float(mean_d[2 * i]),
                share=n / total,
                var_z=(n1 / n) * (n0 / n),
            )
        )
    return CellTable(tuple(cells), total_n=total,
                     covariate_names=tuple(covariate_spec))


def restrict_cells(table: CellTable, min_n: int) -> tuple[CellTable, list[Cell]]:
    """Drop cells with fewer than ``min_n`` observations and renormalize.

    Returns the restricted table and the list of dropped cells (with their
    original shares).  Raises :class:`DataError` when nothing survives.
    """
    if min_n < 1:
        raise ValueError(f"min_n must be >= 1, got {min_n}")
    kept = [c for c in table.cells if c.n >= min_n]
    dropped = [c for c in table.cells if c.n < min_n]
    if not kept:
        raise DataError(f"all {table.n_cells} cells have fewer than {min_n} rows")
    total = sum(c.n for c in kept)
    kept = [replace(c, share=c.n / total) for c in kept]
    return CellTable(tuple(kept), total_n=total,
                     covariate_names=table.covariate_names), dropped


def drop_unidentified(table: CellTable, warn: bool = True) -> tuple[CellTable, list[Cell]]:
    """Drop cells with an empty instrument arm, warning about each.

    The conditional first-stage slope is undefined on such cells, so they
    cannot enter any weight scheme.  ``warn=False`` silences the warning
    for resampling loops that re-apply the policy per replicate.
    """
    kept = [c for c in table.cells if c.identified]
    dropped = [c for c in table.cells if not c.identified]
    if dropped and warn:
        warnings.warn(
            "dropping cells with an empty instrument arm: "
            + ", ".join(str(c.key) for c in dropped),
            stacklevel=2,
        )
    if not kept:
        raise DataError("every cell has an empty instrument arm")
    total = sum(c.n for c in kept)
    kept = [replace(c, share=c.n / total) for c in kept]
    return CellTable(tuple(kept), total_n=total,
                     covariate_names=table.covariate_names), dropped


def cell_index_of(sample: Sample, table: CellTable) -> np.ndarray:
    """Index of each row's cell within ``table.cells`` (-1 when the row's
    key does not appear in the table)."""
    keys = _integer_keys(sample, table.covariate_names)
    lookup = {c.key: i for i, c in enumerate(table.cells)}
    out = np.fromiter(
        (lookup.get(tuple(row), -1) for row in keys.tolist()),
        dtype=np.int64,
        count=len(keys),
    )
    return out


def subset_to_cells(sample: Sample, table: CellTable) -> Sample:
    """Rows of ``sample`` whose covariate key appears in ``table``."""
    idx = cell_index_of(sample, table)
    mask = idx >= 0
    if mask.all():
        return sample
    return sample.take(np.flatnonzero(mask))
