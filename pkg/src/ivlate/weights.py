"""Per-cell weight schemes and the negative-weight report.

Four normalized schemes, each proportional to a product of cell-level
quantities (s = share, v = within-cell instrument variance, o = first-stage
slope):

====================  ==================
scheme                unnormalized weight
====================  ==================
``w_iv``              s * v * o
``w_2sls``            s * v * o**2
``w_riv``             s * v * abs(o)
``w_late``            s * abs(o)
====================  ==================

Each sums to one.  Only ``w_iv`` can go negative, and it does so exactly
in the cells with a negative first-stage slope: the just-identified IV
estimate loads those cells' Wald ratios with the wrong sign, which is the
failure mode this report is built to surface.  The dot product of any
scheme with the per-cell Wald ratios reproduces the corresponding full
estimate exactly (given a cell-saturated specification).

Note: if one instead restricts effect heterogeneity so that the per-cell
Wald ratio identifies a conditional *average* effect (rather than an
effect on movers), the same schemes describe how those average effects
are weighted; no separate machinery is provided for that reading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EstimandError
from .estimators import CellEstimates, _check_alignment
from .sample import CellTable


def weight_schemes(share: np.ndarray, var_z: np.ndarray,
                   omega: np.ndarray) -> dict[str, np.ndarray]:
    """Normalized weight schemes from raw per-cell arrays.

    Raises when a scheme's normalizer vanishes (no first-stage variation
    anywhere, or exactly cancelling signed terms).
    """
    share = np.asarray(share, dtype=float)
    var_z = np.asarray(var_z, dtype=float)
    omega = np.asarray(omega, dtype=float)
    raw = {
        "w_iv": share * var_z * omega,
        "w_2sls": share * var_z * omega**2,
        "w_riv": share * var_z * np.abs(omega),
        "w_late": share * np.abs(omega),
    }
    out = {}
    for name, values in raw.items():
        total = values.sum()
        scale = np.abs(values).sum()
        if scale == 0.0 or abs(total) <= 1e-14 * scale:
            raise EstimandError(
                f"degenerate estimand: the {name} normalizer is zero "
                "(population first stage cancels out)"
            )
        out[name] = values / total
    return out


@dataclass(frozen=True, eq=False)
class WeightTable:
    """Per-cell weights plus the raw (unnormalized) numerators for audit.

    Rows follow the cell table's lexicographic key order.
    """

    covariate_names: tuple[str, ...]
    keys: tuple[tuple[int, ...], ...]
    n: np.ndarray
    share: np.ndarray
    var_z: np.ndarray
    omega_hat: np.ndarray
    beta_hat: np.ndarray
    e_hat: np.ndarray
    w_iv: np.ndarray
    w_2sls: np.ndarray
    w_riv: np.ndarray
    w_late: np.ndarray
    raw_iv: np.ndarray
    raw_2sls: np.ndarray
    raw_riv: np.ndarray
    raw_late: np.ndarray

    @property
    def negative_obs_share(self) -> float:
        """Share of observations in cells with a negative first-stage slope."""
        return float(self.share[self.omega_hat < 0].sum())

    @property
    def sign_consistent(self) -> bool:
        """True when every first-stage slope has the same sign (zeros allowed)."""
        return bool((self.omega_hat >= 0).all() or (self.omega_hat <= 0).all())


def weight_table(table: CellTable, est: CellEstimates) -> WeightTable:
    """All four weight schemes for an identified cell table."""
    _check_alignment(table, est)
    bad = [c.key for c in table.cells if not c.identified]
    if bad:
        raise EstimandError(
            f"cells with an empty instrument arm cannot be weighted: {bad}"
        )
    a = table.arrays()
    schemes = weight_schemes(a.share, a.var_z, est.omega_hat)
    return WeightTable(
        covariate_names=table.covariate_names,
        keys=tuple(c.key for c in table.cells),
        n=a.n,
        share=a.share,
        var_z=a.var_z,
        omega_hat=est.omega_hat,
        beta_hat=est.beta_hat,
        e_hat=est.e_hat,
        w_iv=schemes["w_iv"],
        w_2sls=schemes["w_2sls"],
        w_riv=schemes["w_riv"],
        w_late=schemes["w_late"],
        raw_iv=a.share * a.var_z * est.omega_hat,
        raw_2sls=a.share * a.var_z * est.omega_hat**2,
        raw_riv=a.share * a.var_z * np.abs(est.omega_hat),
        raw_late=a.share * np.abs(est.omega_hat),
    )


@dataclass(frozen=True)
class NegativeWeightReport:
    """Summary of how much the signed IV weights distort the estimate.

    ``mean_beta_positive`` / ``mean_beta_negative`` average the Wald ratios
    within the positive- and negative-slope cell groups, weighted by
    share * |slope|; the ``_varw`` variants additionally multiply the
    within-cell instrument variance into the weight.  Group means are NaN
    when the group is empty.  ``positive_w_iv_sum`` exceeds one exactly
    when any negative weight exists.
    """

    n_cells: int
    n_negative_cells: int
    negative_obs_share: float
    mean_beta_positive: float
    mean_beta_negative: float
    mean_beta_positive_varw: float
    mean_beta_negative_varw: float
    positive_w_iv_sum: float
    sign_consistent: bool


def _group_mean(beta: np.ndarray, weights: np.ndarray,
                mask: np.ndarray) -> float:
    ok = mask & np.isfinite(beta)
    if not ok.any():
        return float("nan")
    w = weights[ok]
    return float(w @ beta[ok] / w.sum())


def negative_weight_report(wt: WeightTable) -> NegativeWeightReport:
    """Group the cells by first-stage sign and contrast their average
    Wald ratios; see :class:`NegativeWeightReport`."""
    pos = wt.omega_hat > 0
    neg = wt.omega_hat < 0
    w_abs = wt.share * np.abs(wt.omega_hat)
    w_var = w_abs * wt.var_z
    return NegativeWeightReport(
        n_cells=len(wt.keys),
        n_negative_cells=int(neg.sum()),
        negative_obs_share=wt.negative_obs_share,
        mean_beta_positive=_group_mean(wt.beta_hat, w_abs, pos),
        mean_beta_negative=_group_mean(wt.beta_hat, w_abs, neg),
        mean_beta_positive_varw=_group_mean(wt.beta_hat, w_var, pos),
        mean_beta_negative_varw=_group_mean(wt.beta_hat, w_var, neg),
        positive_w_iv_sum=float(wt.w_iv[wt.w_iv > 0].sum()),
        sign_consistent=wt.sign_consistent,
    )
