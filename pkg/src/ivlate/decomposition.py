"""Treated/untreated decomposition of the (reordered) IV estimate.

Write theta for the share of units encouraged to get treated (z = 1 after
any reordering), pi_1 / pi_0 for the first-stage effect within each arm,
and tau_latt / tau_latu for the outcome effect per mover within each arm.
The IV estimate is then an exact convex combination

    beta = w_latt * tau_latt + w_latu * tau_latu,

where the realized weight

    w_latt = (1-theta) * Var[e|z=0] * pi_1
             / (theta * Var[e|z=1] * pi_0 + (1-theta) * Var[e|z=0] * pi_1)

is *decreasing* in theta, the opposite of the target weight
theta*pi_1 / (theta*pi_1 + (1-theta)*pi_0) that would recover the
complier-weighted average.  ``lam`` is the difference between the two
weights; it multiplies (tau_latt - tau_latu) to give the gap between the
IV estimate and that average.

Two flavors of the arm-level quantities coexist:

* the headline fields project the arm-specific outcome and treatment
  means on (1, e(x)) across cells, which makes the convex reconstruction
  above an exact algebraic identity in any sample;
* the ``*_np`` fields average the raw cell statistics instead, which
  makes the complier-weighted convexity identity
  tau_late = (theta*pi1*tau_latt + (1-theta)*pi0*tau_latu) / (...) exact.
  These drive the reweighting sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EstimandError
from .estimators import CellEstimates, _check_alignment
from .sample import CellTable

_VAR_FLOOR = 1e-14


@dataclass(frozen=True)
class Decomposition:
    """Decomposition of a reordered (or already sign-consistent) IV estimate."""

    theta: float
    pi1: float
    pi0: float
    tau_latt: float
    tau_latu: float
    w_latt: float
    w_latu: float
    lam: float
    var_e_z1: float
    var_e_z0: float
    beta_reconstructed: float
    tau_late_np: float
    tau_latt_np: float
    tau_latu_np: float
    pi1_np: float
    pi0_np: float


def _arm_projection(mass: np.ndarray, e: np.ndarray,
                    r: np.ndarray) -> tuple[float, float, float, float]:
    """Project a cell statistic ``r`` on (1, e) under the arm's cell masses.

    Returns (intercept, slope, E[e], Var[e]) for the arm.  A degenerate
    e-distribution gets slope zero (projection on the constant alone).
    """
    total = mass.sum()
    p = mass / total
    mean_e = float(p @ e)
    var_e = float(p @ (e - mean_e) ** 2)
    mean_r = float(p @ r)
    if var_e < _VAR_FLOOR:
        return mean_r, 0.0, mean_e, var_e
    slope = float(p @ ((e - mean_e) * (r - mean_r))) / var_e
    return mean_r - slope * mean_e, slope, mean_e, var_e


def decompose(table: CellTable, est: CellEstimates) -> Decomposition:
    """Decompose the saturated IV estimate into treated- and
    untreated-mover components.

    Preconditions: every cell identified and no negative first-stage slope
    (reorder the instrument first; see
    :func:`ivlate.estimators.reorder_instrument`).
    """
    _check_alignment(table, est)
    if any(not c.identified for c in table.cells):
        raise EstimandError("cells with an empty instrument arm; restrict first")
    if (est.omega_hat < 0).any():
        raise EstimandError(
            "negative first-stage slopes present; reorder the instrument first"
        )
    a = table.arrays()
    s, e, omega = a.share, est.e_hat, est.omega_hat

    theta = float(s @ e)
    u1 = s * e
    u0 = s * (1.0 - e)

    i1y, sl1y, m1, v1 = _arm_projection(u1, e, a.mean_y_z1)
    i0y, sl0y, m0, v0 = _arm_projection(u0, e, a.mean_y_z0)
    i1d, sl1d, _, _ = _arm_projection(u1, e, a.mean_d_z1)
    i0d, sl0d, _, _ = _arm_projection(u0, e, a.mean_d_z0)

    chi1 = (i1y - i0y) + (sl1y - sl0y) * m1
    chi0 = (i1y - i0y) + (sl1y - sl0y) * m0
    pi1 = (i1d - i0d) + (sl1d - sl0d) * m1
    pi0 = (i1d - i0d) + (sl1d - sl0d) * m0
    if pi1 <= 0 or pi0 <= 0:
        raise EstimandError(
            f"degenerate arm-level first stage: pi1={pi1:.3g}, pi0={pi0:.3g}"
        )
    tau_latt = chi1 / pi1
    tau_latu = chi0 / pi0

    denom = theta * v1 * pi0 + (1.0 - theta) * v0 * pi1
    if denom > 0:
        w_latt = (1.0 - theta) * v0 * pi1 / denom
    else:
        # both arm variances vanish: the variance ratio drops out and the
        # weight reduces to its equal-variance form
        w_latt = (1.0 - theta) * pi1 / (theta * pi0 + (1.0 - theta) * pi1)
    w_latu = 1.0 - w_latt
    target = theta * pi1 / (theta * pi1 + (1.0 - theta) * pi0)
    lam = w_latt - target

    # nonparametric arm averages over cells with a defined Wald ratio
    mask = est.defined
    beta = est.beta_hat
    pi1_np = float(u1 @ omega) / theta
    pi0_np = float(u0 @ omega) / (1.0 - theta)
    num_latt = float(u1[mask] @ (omega[mask] * beta[mask]))
    den_latt = float(u1[mask] @ omega[mask])
    num_latu = float(u0[mask] @ (omega[mask] * beta[mask]))
    den_latu = float(u0[mask] @ omega[mask])
    num_late = float(s[mask] @ (omega[mask] * beta[mask]))
    den_late = float(s[mask] @ omega[mask])
    if min(den_latt, den_latu, den_late) <= 0:
        raise EstimandError("no first-stage variation left after exclusions")

    return Decomposition(
        theta=theta,
        pi1=pi1,
        pi0=pi0,
        tau_latt=tau_latt,
        tau_latu=tau_latu,
        w_latt=w_latt,
        w_latu=w_latu,
        lam=lam,
        var_e_z1=v1,
        var_e_z0=v0,
        beta_reconstructed=w_latt * tau_latt + w_latu * tau_latu,
        tau_late_np=num_late / den_late,
        tau_latt_np=num_latt / den_latt,
        tau_latu_np=num_latu / den_latu,
        pi1_np=pi1_np,
        pi0_np=pi0_np,
    )


def lambda_rule_of_thumb(theta: float, pi1: float, pi0: float) -> float:
    """Weight gap under equal arm variances of e(x).

    Zero exactly at theta = 1/2, antisymmetric around it in theta.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0, 1), got {theta}")
    if pi1 <= 0 or pi0 <= 0:
        raise ValueError(f"pi1 and pi0 must be positive, got {pi1}, {pi0}")
    return (
        (1.0 - 2.0 * theta)
        * pi0
        * pi1
        / ((theta * pi0 + (1.0 - theta) * pi1) * (theta * pi1 + (1.0 - theta) * pi0))
    )


@dataclass(frozen=True)
class SweepPoint:
    """One reweighting configuration: arm-0 row weight ``w``, the implied
    encouragement share, and the normalized gap (NaN when the
    tau_latt/tau_latu spread is numerically zero)."""

    w: float
    theta: float
    lam: float
    defined: bool


@dataclass(frozen=True)
class SweepCurve:
    points: tuple[SweepPoint, ...]

    def zero_crossings(self) -> tuple[float, ...]:
        """Implied-theta locations where the gap changes sign, by linear
        interpolation between adjacent defined points."""
        out = []
        pts = [p for p in self.points if p.defined]
        for p1, p2 in zip(pts, pts[1:]):
            if p1.lam == 0.0:
                out.append(p1.theta)
            elif p1.lam * p2.lam < 0:
                frac = -p1.lam / (p2.lam - p1.lam)
                out.append(p1.theta + frac * (p2.theta - p1.theta))
        if pts and pts[-1].lam == 0.0:
            out.append(pts[-1].theta)
        return tuple(out)


def bias_sweep(table: CellTable, est: CellEstimates,
               grid: np.ndarray | None = None,
               n_points: int = 25,
               theta_span: tuple[float, float] = (0.05, 0.95)) -> SweepCurve:
    """Trace the normalized gap against the implied encouragement share.

    Rows with z = 1 keep weight 1 while rows with z = 0 get weight ``w``;
    every cell statistic is recomputed under those row weights, which only
    moves each cell's encouragement rate and mass (within-arm means are
    untouched).  For each ``w`` the curve records the implied theta and

        lam = (beta_weighted_iv - tau_late) / (tau_latt - tau_latu),

    all four recomputed nonparametrically under the weights.  The default
    grid uses ``n_points`` log-spaced ``w`` values spanning
    ``theta_span``.  The input must already be reordered (no negative
    first-stage slopes); the curve is deterministic.
    """
    _check_alignment(table, est)
    if any(not c.identified for c in table.cells):
        raise EstimandError("cells with an empty instrument arm; restrict first")
    if (est.omega_hat < 0).any():
        raise EstimandError(
            "negative first-stage slopes present; reorder the instrument first"
        )
    a = table.arrays()
    mask = est.defined
    omega = est.omega_hat
    beta = np.where(mask, est.beta_hat, 0.0)
    fs = np.where(mask, omega, 0.0)

    n1, n0 = a.n_z1, a.n_z0
    total1, total0 = n1.sum(), n0.sum()
    if grid is None:
        lo, hi = theta_span
        if not 0 < lo < hi < 1:
            raise ValueError(f"theta_span must satisfy 0 < lo < hi < 1: {theta_span}")
        w_hi_theta = total1 * (1 - hi) / (total0 * hi)
        w_lo_theta = total1 * (1 - lo) / (total0 * lo)
        grid = np.geomspace(w_hi_theta, w_lo_theta, n_points)
    grid = np.asarray(grid, dtype=float)
    if (grid <= 0).any():
        raise ValueError("reweight factors must be positive")

    points = []
    for w in grid:
        mass = n1 + w * n0
        s_w = mass / mass.sum()
        e_w = n1 / mass
        v_w = e_w * (1.0 - e_w)
        theta_w = float(s_w @ e_w)
        riv = float(s_w @ (v_w * fs * beta)) / float(s_w @ (v_w * fs))
        late = float(s_w @ (fs * beta)) / float(s_w @ fs)
        latt = float(s_w @ (e_w * fs * beta)) / float(s_w @ (e_w * fs))
        latu = float(s_w @ ((1 - e_w) * fs * beta)) / float(s_w @ ((1 - e_w) * fs))
        spread = latt - latu
        if abs(spread) < 1e-12:
            points.append(SweepPoint(float(w), theta_w, float("nan"), False))
        else:
            points.append(SweepPoint(float(w), theta_w, (riv - late) / spread, True))
    points.sort(key=lambda p: p.theta)
    return SweepCurve(tuple(points))
