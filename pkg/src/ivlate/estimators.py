"""Estimators: linear IV, interacted 2SLS, reordered IV, and the
nonparametric complier-weighted average of conditional Wald estimates.

Per covariate cell the library works with three conditional quantities:
the first-stage slope ``omega(x)`` (difference in treatment rates across
instrument arms), the Wald ratio ``beta(x)`` (reduced-form difference over
``omega``), and the cell's encouragement rate ``e(x) = P[z=1 | cell]``.
With cell-saturated controls every estimator here equals an explicit
weighted average of the ``beta(x)``; the weight schemes live in
:mod:`ivlate.weights`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import EstimandError, SchemaError, SingularError
from .projection import (
    PIVOT_RTOL,
    DesignMatrices,
    first_stage_f,
    iv_just_identified,
    tsls,
)
from .sample import Cell, CellTable, Sample, cell_index_of, subset_to_cells

# Cells with |omega| below this floor have an undefined Wald ratio and are
# excluded from complier-weighted averages (with a warning).
WALD_FLOOR = 1e-9

METHOD_IV = "iv"
METHOD_2SLS = "2sls-interacted"
METHOD_RIV = "riv"
METHOD_LATE = "late-np"


@dataclass(frozen=True, eq=False)
class CellEstimates:
    """Per-cell conditional estimates, aligned with a CellTable's cells.

    ``beta_hat`` is NaN where ``|omega_hat|`` is under :data:`WALD_FLOOR`.
    """

    covariate_names: tuple[str, ...]
    keys: tuple[tuple[int, ...], ...]
    omega_hat: np.ndarray
    beta_hat: np.ndarray
    e_hat: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        """Mask of cells where the Wald ratio is defined."""
        return np.abs(self.omega_hat) >= WALD_FLOOR


@dataclass(frozen=True)
class EstimateResult:
    """One estimate: method tag, point value, SE, robust first-stage F, n.

    ``se`` is None when inference is deferred to the bootstrap; ``robust_f``
    is None where a first stage does not exist (the nonparametric average).
    """

    method: str
    estimate: float
    se: float | None
    robust_f: float | None
    n: int


@dataclass(frozen=True)
class ControlsSpec:
    """How control columns enter a just-identified IV regression.

    ``saturated`` names discrete covariates that enter as one indicator per
    observed value combination (spanning the intercept, which is therefore
    omitted).  ``linear`` names columns entered as-is; a trailing ``^2``
    squares the column (``"exper^2"``).  ``intercept`` adds a constant
    column when no saturated block is present.
    """

    saturated: tuple[str, ...] = ()
    linear: tuple[str, ...] = ()
    intercept: bool = True


def _linear_column(sample: Sample, term: str) -> np.ndarray:
    if term.endswith("^2"):
        base = np.asarray(sample.column(term[:-2]), dtype=float)
        return base * base
    return np.asarray(sample.column(term), dtype=float)


def _dummies(sample: Sample, names: Sequence[str]) -> np.ndarray:
    from .sample import _encode_keys, _integer_keys

    keys = _integer_keys(sample, names)
    uniq, inverse = _encode_keys(keys)
    g = np.zeros((sample.n, len(uniq)))
    g[np.arange(sample.n), inverse] = 1.0
    return g


def controls_matrix(sample: Sample, spec: ControlsSpec) -> np.ndarray:
    """Assemble the control block of a design matrix.

    Collinear columns are pruned here (pivoted QR, relative tolerance
    1e-10) so that the IV moment matrix stays invertible; a warning lists
    what was dropped.
    """
    blocks: list[np.ndarray] = []
    if spec.saturated:
        blocks.append(_dummies(sample, spec.saturated))
    elif spec.intercept:
        blocks.append(np.ones((sample.n, 1)))
    for term in spec.linear:
        blocks.append(_linear_column(sample, term)[:, None])
    if not blocks:
        raise SchemaError("controls spec produced no columns")
    x = np.column_stack(blocks)
    _, rmat, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rmat))
    rank = int(np.sum(diag > PIVOT_RTOL * diag[0])) if diag.size and diag[0] > 0 else 0
    if rank < x.shape[1]:
        dropped = sorted(int(j) for j in piv[rank:])
        warnings.warn(f"dropping collinear control columns {dropped}", stacklevel=2)
        keep = np.sort(piv[:rank])
        x = x[:, keep]
    return x


def _first_stage_f_or_none(dm: DesignMatrices) -> float | None:
    """First-stage F, or None (with a warning) when the robust Wald is
    degenerate, e.g. a singleton instrument arm in a saturated stage."""
    try:
        return first_stage_f(dm)
    except SingularError as exc:
        warnings.warn(f"first-stage F unavailable: {exc}", stacklevel=3)
        return None


def cell_estimates(table: CellTable) -> CellEstimates:
    """Conditional first-stage slopes, Wald ratios, and encouragement rates.

    Every cell must have both instrument arms non-empty (drop or restrict
    first otherwise).  Cells whose first-stage slope is numerically zero
    get a NaN Wald ratio and a warning.
    """
    bad = [c.key for c in table.cells if not c.identified]
    if bad:
        raise EstimandError(
            f"cells with an empty instrument arm: {bad}; "
            "restrict cells or drop unidentified cells first"
        )
    a = table.arrays()
    omega = a.mean_d_z1 - a.mean_d_z0
    e_hat = a.n_z1 / a.n
    defined = np.abs(omega) >= WALD_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(defined, (a.mean_y_z1 - a.mean_y_z0) / omega, np.nan)
    if not defined.all():
        excluded = [table.cells[i].key for i in np.flatnonzero(~defined)]
        warnings.warn(
            f"cells with first-stage slope below {WALD_FLOOR:g} have an "
            f"undefined Wald ratio and are excluded from averages: {excluded}",
            stacklevel=2,
        )
    return CellEstimates(
        covariate_names=table.covariate_names,
        keys=tuple(c.key for c in table.cells),
        omega_hat=omega,
        beta_hat=beta,
        e_hat=e_hat,
    )


def estimate_beta_iv(sample: Sample, controls: ControlsSpec) -> EstimateResult:
    """Just-identified IV of the outcome on treatment and controls, with
    the instrument replacing the treatment in the instrument set."""
    c = controls_matrix(sample, controls)
    dm = DesignMatrices(
        y=sample.y,
        w=np.column_stack([sample.d.astype(float), c]),
        q=np.column_stack([sample.z.astype(float), c]),
    )
    fit = iv_just_identified(dm)
    return EstimateResult(
        method=METHOD_IV,
        estimate=float(fit.coefficients[0]),
        se=float(np.sqrt(fit.vcov_robust[0, 0])),
        robust_f=_first_stage_f_or_none(dm),
        n=sample.n,
    )


def _aligned_cells(sample: Sample, table: CellTable) -> tuple[Sample, np.ndarray]:
    sub = subset_to_cells(sample, table)
    idx = cell_index_of(sub, table)
    return sub, idx


def estimate_beta_2sls_interacted(sample: Sample,
                                  table: CellTable) -> EstimateResult:
    """Overidentified 2SLS instrumenting with z interacted with every cell
    indicator, controlling for the cell indicators.

    Rows whose covariate key is not in ``table`` are dropped (the reported
    ``n`` is the size actually used).
    """
    bad = [c.key for c in table.cells if not c.identified]
    if bad:
        raise EstimandError(
            f"cells with an empty instrument arm: {bad}; restrict cells first"
        )
    sub, idx = _aligned_cells(sample, table)
    k = table.n_cells
    g = np.zeros((sub.n, k))
    g[np.arange(sub.n), idx] = 1.0
    zc = g * sub.z.astype(float)[:, None]
    dm = DesignMatrices(
        y=sub.y,
        w=np.column_stack([sub.d.astype(float), g]),
        q=np.column_stack([zc, g]),
    )
    fit = tsls(dm)
    return EstimateResult(
        method=METHOD_2SLS,
        estimate=float(fit.coefficients[0]),
        se=float(np.sqrt(fit.vcov_robust[0, 0])),
        robust_f=_first_stage_f_or_none(dm),
        n=sub.n,
    )


def reorder_instrument(sample: Sample, est: CellEstimates) -> Sample:
    """Flip the instrument wherever the cell's first-stage slope is negative.

    The reordered instrument equals z in cells with a positive slope and
    1 - z in cells with a negative slope; cells with an exactly zero slope
    keep z.  All other columns are unchanged; a new sample is returned.
    """
    table_stub = _keys_table(est)
    idx = cell_index_of(sample, table_stub)
    if (idx < 0).any():
        missing = np.flatnonzero(idx < 0)[0]
        raise EstimandError(
            f"row {int(missing)} belongs to a cell with no first-stage estimate"
        )
    flip = est.omega_hat[idx] < 0
    z_r = np.where(flip, 1 - sample.z, sample.z).astype(np.int8)
    return sample.with_z(z_r)


def _keys_table(est: CellEstimates) -> CellTable:
    # minimal stand-in table so cell_index_of can reuse the key lookup
    cells = tuple(
        Cell(key=k, n=1, n_z1=1, n_z0=0, mean_y_z1=0.0, mean_y_z0=0.0,
             mean_d_z1=0.0, mean_d_z0=0.0, share=0.0, var_z=0.0)
        for k in est.keys
    )
    return CellTable(cells, total_n=len(cells),
                     covariate_names=est.covariate_names)


def reordered_table(table: CellTable) -> CellTable:
    """Cell table after reordering the instrument, computed directly on the
    sufficient statistics: cells with a negative first-stage slope swap
    their z arms.  Equals rebuilding cells from
    :func:`reorder_instrument`'s output row by row."""
    cells = []
    for c in table.cells:
        omega = c.mean_d_z1 - c.mean_d_z0
        if c.identified and omega < 0:
            c = replace(
                c,
                n_z1=c.n_z0,
                n_z0=c.n_z1,
                mean_y_z1=c.mean_y_z0,
                mean_y_z0=c.mean_y_z1,
                mean_d_z1=c.mean_d_z0,
                mean_d_z0=c.mean_d_z1,
            )
        cells.append(c)
    return CellTable(tuple(cells), total_n=table.total_n,
                     covariate_names=table.covariate_names)


def estimate_beta_riv(sample: Sample, table: CellTable) -> EstimateResult:
    """Reordered IV: just-identified IV using the sign-corrected instrument
    with cell-saturated controls.

    Equals :func:`estimate_beta_iv` whenever no cell has a negative
    first-stage slope.  The reported SE is the analytic robust one,
    conditional on the estimated reordering; bootstrap inference that
    re-estimates the reordering per replicate lives in
    :mod:`ivlate.bootstrap`.
    """
    est = cell_estimates(table)
    sub = subset_to_cells(sample, table)
    reordered = reorder_instrument(sub, est)
    c = controls_matrix(reordered, ControlsSpec(saturated=table.covariate_names))
    dm = DesignMatrices(
        y=reordered.y,
        w=np.column_stack([reordered.d.astype(float), c]),
        q=np.column_stack([reordered.z.astype(float), c]),
    )
    fit = iv_just_identified(dm)
    return EstimateResult(
        method=METHOD_RIV,
        estimate=float(fit.coefficients[0]),
        se=float(np.sqrt(fit.vcov_robust[0, 0])),
        robust_f=_first_stage_f_or_none(dm),
        n=sub.n,
    )


def estimate_tau_late(table: CellTable, est: CellEstimates) -> EstimateResult:
    """Weighted average of conditional Wald ratios with weights equal to
    the cell share times the absolute first-stage slope.

    Cells with an undefined Wald ratio are excluded (their weight is
    numerically zero anyway); an error is raised when nothing remains.
    """
    _check_alignment(table, est)
    mask = est.defined
    if not mask.any():
        raise EstimandError("no cell has a defined Wald ratio; estimand undefined")
    a = table.arrays()
    wt = a.share[mask] * np.abs(est.omega_hat[mask])
    value = float(wt @ est.beta_hat[mask] / wt.sum())
    return EstimateResult(
        method=METHOD_LATE,
        estimate=value,
        se=None,
        robust_f=None,
        n=int(a.n[mask].sum()),
    )


def _check_alignment(table: CellTable, est: CellEstimates) -> None:
    if tuple(c.key for c in table.cells) != est.keys:
        raise EstimandError("cell estimates are not aligned with the cell table")
