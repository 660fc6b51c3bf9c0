"""Dense linear-projection machinery.

OLS, just-identified IV, overidentified two-stage least squares, the
heteroskedasticity-robust (HC1) covariance, and the robust first-stage F
statistic.  All solves go through QR factorizations rather than normal
equations; collinear columns are dropped by pivoted QR with a relative
pivot tolerance of 1e-10 and reported on the result (their coefficients
are NaN, not zero).

Conventions
-----------
* No hidden intercept: callers supply the constant column explicitly.
* Robust covariances carry the HC1 small-sample factor n/(n-k).
* Regressor matrices put the treatment first; instrument matrices put the
  excluded instruments first, followed by the same controls.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DataError, SingularError

PIVOT_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Outcome, regressors and instruments for one estimation problem.

    ``w`` holds the regressors with the endogenous treatment in column 0;
    ``q`` holds the instruments with the excluded instruments first and
    then the same controls that appear in ``w``.
    """

    y: np.ndarray
    w: np.ndarray
    q: np.ndarray

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float)
        w = np.atleast_2d(np.asarray(self.w, dtype=float))
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        if w.shape[0] != len(y) or q.shape[0] != len(y):
            raise DataError("design matrices must share the sample dimension")
        if q.shape[1] < w.shape[1]:
            raise DataError(
                f"underidentified: {q.shape[1]} instruments for {w.shape[1]} regressors"
            )
        if len(y) <= q.shape[1]:
            raise DataError(
                f"need n > k_q, got n={len(y)} with k_q={q.shape[1]}"
            )
        for name, m in (("y", y), ("w", w), ("q", q)):
            if not np.isfinite(m).all():
                raise DataError(f"non-finite values in design matrix {name!r}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "q", q)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n_excluded(self) -> int:
        """Number of excluded instruments, k_q - (k_w - 1)."""
        return self.q.shape[1] - self.w.shape[1] + 1


@dataclass(frozen=True, eq=False)
class FitResult:
    """Coefficients, HC1-robust covariance, and residuals of one fit.

    Positions listed in ``dropped`` were removed for collinearity; their
    coefficient and covariance entries are NaN.
    """

    coefficients: np.ndarray
    vcov_robust: np.ndarray
    residuals: np.ndarray
    dropped: tuple[int, ...] = ()

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov_robust))


def _pivoted_qr(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Economic pivoted QR plus the numerical rank at PIVOT_RTOL."""
    qmat, rmat, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rmat))
    if diag.size == 0 or diag[0] == 0.0:
        raise SingularError("design matrix has rank zero")
    rank = int(np.sum(diag > PIVOT_RTOL * diag[0]))
    return qmat, rmat, piv, rank


def _scatter(values: np.ndarray, keep: np.ndarray, k: int) -> np.ndarray:
    out = np.full(k, np.nan)
    out[keep] = values
    return out


def _scatter_vcov(vk: np.ndarray, keep: np.ndarray, k: int) -> np.ndarray:
    out = np.full((k, k), np.nan)
    out[np.ix_(keep, keep)] = vk
    return out


def ols(y: np.ndarray, x: np.ndarray,
        weights: np.ndarray | None = None) -> FitResult:
    """Least squares of ``y`` on ``x`` with HC1-robust covariance.

    Optional nonnegative ``weights`` give weighted least squares (the
    sandwich is computed on the weighted model; residuals are reported on
    the original scale).  Collinear columns are dropped and reported.
    """
    y = np.asarray(y, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, k = x.shape
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if (weights < 0).any():
            raise DataError("weights must be nonnegative")
        root = np.sqrt(weights)
        xw = x * root[:, None]
        yw = y * root
    else:
        xw, yw = x, y

    qmat, rmat, piv, rank = _pivoted_qr(xw)
    keep = piv[:rank]
    dropped = tuple(sorted(int(j) for j in piv[rank:]))
    if dropped:
        warnings.warn(f"dropping collinear columns {dropped}", stacklevel=2)

    q1 = qmat[:, :rank]
    r1 = rmat[:rank, :rank]
    coef_k = scipy.linalg.solve_triangular(r1, q1.T @ yw)
    resid = y - x[:, keep] @ coef_k
    resid_w = yw - xw[:, keep] @ coef_k

    if n > rank:
        # HC1 sandwich: R^{-1} Q' diag(e^2) Q R^{-T} * n/(n-k)
        a = q1 * resid_w[:, None]
        meat = a.T @ a
        tmp = scipy.linalg.solve_triangular(r1, meat)
        vk = scipy.linalg.solve_triangular(r1, tmp.T).T
        vk *= n / (n - rank)
    else:
        # exact fit: no residual degrees of freedom for a variance
        vk = np.full((rank, rank), np.nan)

    return FitResult(
        coefficients=_scatter(coef_k, keep, k),
        vcov_robust=_scatter_vcov(vk, keep, k),
        residuals=resid,
        dropped=dropped,
    )


def iv_just_identified(dm: DesignMatrices) -> FitResult:
    """Just-identified IV: solve the sample moments (Q'W) b = Q'y.

    The first coefficient is the IV slope on the treatment.  Requires as
    many instruments as regressors; a singular moment matrix signals a
    weak or invalid instrument.
    """
    if dm.q.shape[1] != dm.w.shape[1]:
        raise DataError(
            f"just-identified IV needs k_q == k_w, got {dm.q.shape[1]} != {dm.w.shape[1]}"
        )
    a = dm.q.T @ dm.w
    b = dm.q.T @ dm.y
    if not np.isfinite(np.linalg.cond(a)) or np.linalg.cond(a) > 1e12:
        raise SingularError(
            "singular instrument-regressor moment matrix (weak or invalid instrument)"
        )
    coef = scipy.linalg.solve(a, b)
    resid = dm.y - dm.w @ coef
    m = dm.q * resid[:, None]
    meat = m.T @ m
    k = dm.w.shape[1]
    bread = scipy.linalg.solve(a, np.eye(k))
    vcov = bread @ meat @ bread.T * dm.n / (dm.n - k)
    return FitResult(coef, vcov, resid)


def tsls(dm: DesignMatrices) -> FitResult:
    """Two-stage least squares with HC1-robust covariance.

    Projects the regressors on the instrument space, then regresses the
    outcome on the fitted regressors; residuals use the actual regressors.
    Equals :func:`iv_just_identified` when k_q == k_w.
    """
    qmat, _, _, rank_q = _pivoted_qr(dm.q)
    q1 = qmat[:, :rank_q]
    w_hat = q1 @ (q1.T @ dm.w)

    q2, r2, piv2, rank_w = _pivoted_qr(w_hat)
    k = dm.w.shape[1]
    if rank_w < k:
        raise SingularError(
            "projected regressors are rank deficient: instruments do not span "
            f"the regressors (rank {rank_w} < {k})"
        )
    # full rank: undo the pivot so coefficients come back in input order
    q2 = q2[:, :rank_w]
    r2 = r2[:rank_w, :rank_w]
    coef_piv = scipy.linalg.solve_triangular(r2, q2.T @ dm.y)
    coef = np.empty(k)
    coef[piv2[:rank_w]] = coef_piv

    resid = dm.y - dm.w @ coef
    a = q2 * resid[:, None]
    meat = a.T @ a
    tmp = scipy.linalg.solve_triangular(r2, meat)
    v_piv = scipy.linalg.solve_triangular(r2, tmp.T).T
    v_piv *= dm.n / (dm.n - k)
    vcov = np.empty((k, k))
    vcov[np.ix_(piv2[:rank_w], piv2[:rank_w])] = v_piv
    return FitResult(coef, vcov, resid)


def first_stage_f(dm: DesignMatrices) -> float:
    """Robust first-stage F: the HC1 Wald statistic for joint nullity of
    the excluded-instrument coefficients, divided by their number."""
    d = dm.w[:, 0]
    fit = ols(d, dm.q)
    m = dm.n_excluded
    if any(j < m for j in fit.dropped):
        raise SingularError(
            f"excluded instrument column(s) {[j for j in fit.dropped if j < m]} "
            "were dropped as collinear; first-stage F undefined"
        )
    b = fit.coefficients[:m]
    v = fit.vcov_robust[:m, :m]
    # a saturated first stage with a singleton instrument arm yields an
    # exactly-zero residual block, so the Wald form can be degenerate
    cond = np.linalg.cond(v)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularError(
            "robust covariance of the excluded-instrument coefficients is "
            "numerically singular; first-stage F undefined"
        )
    try:
        stat = float(b @ scipy.linalg.solve(v, b, assume_a="pos"))
    except scipy.linalg.LinAlgError as exc:
        raise SingularError("singular robust covariance in first-stage F") from exc
    return stat / m
