"""Finite-support population lab: exact estimands and identity checks.

A :class:`DgpSpec` is a finite population over covariate cells.  Each cell
carries a mass, an encouragement probability ``e = P[z=1 | cell]``, a split
into the four latent response strata (always-taker, never-taker, complier,
defier), and per-stratum potential-outcome means.  Treatment reacts to the
instrument only through the stratum; the outcome depends on the instrument
only through treatment (potential outcomes are indexed by treatment alone,
which builds the exclusion restriction into the data model).

:func:`population_estimands` evaluates every estimand two independent
ways: (a) directly from exact population moment matrices, mirroring what
the corresponding regression estimator converges to, and (b) from the
weighted-average closed forms over cells.  :func:`verify_identities`
compares the two routes, plus the decomposition and projection identities,
and reports pass/fail/skip per identity.  :func:`draw_sample` turns a spec
into i.i.d. microdata for Monte Carlo work.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
import numpy as np
import scipy.linalg

from .errors import DataError, SchemaError
from .sample import Sample

STRATA = ("always", "never", "complier", "defier")

_SHARE_TOL = 1e-9
_DEGENERATE = 1e-12


@dataclass(frozen=True)
class PopCell:
    """One covariate cell of a finite population.

    ``mean_y0`` / ``mean_y1`` hold the untreated / treated potential-outcome
    means per stratum, in :data:`STRATA` order.  ``noise_sd`` is the SD of
    additive Gaussian noise applied when sampling (population estimands do
    not depend on it).
    """

    mass: float
    e: float
    always: float
    never: float
    complier: float
    defier: float
    mean_y0: tuple[float, float, float, float]
    mean_y1: tuple[float, float, float, float]
    noise_sd: float = 0.0

    def __post_init__(self) -> None:
        if not self.mass > 0:
            raise DataError(f"cell mass must be positive, got {self.mass}")
        if not 0.0 < self.e < 1.0:
            raise DataError(f"encouragement probability must be in (0,1), got {self.e}")
        shares = (self.always, self.never, self.complier, self.defier)
        if min(shares) < 0:
            raise DataError(f"negative stratum share in {shares}")
        if abs(sum(shares) - 1.0) > _SHARE_TOL:
            raise DataError(f"stratum shares must sum to 1, got {sum(shares)}")
        if self.noise_sd < 0:
            raise DataError("noise_sd must be nonnegative")
        for tup in (self.mean_y0, self.mean_y1):
            if len(tup) != 4 or not all(math.isfinite(v) for v in tup):
                raise DataError(f"need 4 finite per-stratum means, got {tup}")


@dataclass(frozen=True)
class DgpSpec:
    """Finite population: a tuple of cells whose masses sum to one."""

    cells: tuple[PopCell, ...]

    def __post_init__(self) -> None:
        if not self.cells:
            raise DataError("a population needs at least one cell")
        total = sum(c.mass for c in self.cells)
        if abs(total - 1.0) > _SHARE_TOL:
            raise DataError(f"cell masses must sum to 1, got {total}")

    @property
    def n_cells(self) -> int:
        return len(self.cells)


def monotonicity(dgp: DgpSpec) -> str:
    """Classify the population: ``"strong"`` (no defiers anywhere),
    ``"weak"`` (each cell one-sided), or ``"none"``."""
    if all(c.defier == 0 for c in dgp.cells):
        return "strong"
    if all(c.complier == 0 or c.defier == 0 for c in dgp.cells):
        return "weak"
    return "none"


@dataclass(frozen=True, eq=False)
class _CellMoments:
    """Vectorized per-cell population quantities."""

    m: np.ndarray
    e: np.ndarray
    dz1: np.ndarray
    dz0: np.ndarray
    yz1: np.ndarray
    yz0: np.ndarray
    omega: np.ndarray
    pi: np.ndarray
    pitau: np.ndarray  # pi(x) * tau(x), finite even where pi(x) = 0
    cx: np.ndarray
    var_z: np.ndarray

    def reordered(self) -> "_CellMoments":
        """Same population with the instrument flipped where omega < 0."""
        flip = self.omega < 0
        return _CellMoments(
            m=self.m,
            e=np.where(flip, 1.0 - self.e, self.e),
            dz1=np.where(flip, self.dz0, self.dz1),
            dz0=np.where(flip, self.dz1, self.dz0),
            yz1=np.where(flip, self.yz0, self.yz1),
            yz0=np.where(flip, self.yz1, self.yz0),
            omega=np.abs(self.omega),
            pi=self.pi,
            pitau=self.pitau,
            cx=np.where(flip, -self.cx, self.cx),
            var_z=self.var_z,
        )


def _cell_moments(dgp: DgpSpec) -> _CellMoments:
    cells = dgp.cells
    m = np.array([c.mass for c in cells])
    e = np.array([c.e for c in cells])
    al = np.array([c.always for c in cells])
    nv = np.array([c.never for c in cells])
    co = np.array([c.complier for c in cells])
    de = np.array([c.defier for c in cells])
    mu0 = np.array([c.mean_y0 for c in cells])
    mu1 = np.array([c.mean_y1 for c in cells])
    # conditional means by arm: always-takers realize y(1), never-takers
    # y(0); compliers track z, defiers track 1-z
    base = al * mu1[:, 0] + nv * mu0[:, 1]
    yz1 = base + co * mu1[:, 2] + de * mu0[:, 3]
    yz0 = base + co * mu0[:, 2] + de * mu1[:, 3]
    dz1 = al + co
    dz0 = al + de
    pitau = co * (mu1[:, 2] - mu0[:, 2]) + de * (mu1[:, 3] - mu0[:, 3])
    return _CellMoments(
        m=m,
        e=e,
        dz1=dz1,
        dz0=dz0,
        yz1=yz1,
        yz0=yz0,
        omega=dz1 - dz0,
        pi=co + de,
        pitau=pitau,
        cx=np.sign(co - de),
        var_z=e * (1.0 - e),
    )


def conditional_effects(dgp: DgpSpec) -> tuple[np.ndarray, np.ndarray]:
    """(pi, tau) per cell; tau is NaN where the cell has no movers."""
    cm = _cell_moments(dgp)
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = np.where(cm.pi > 0, cm.pitau / np.where(cm.pi > 0, cm.pi, 1.0), np.nan)
    return cm.pi, tau


def _projection_slope_on_z(cm: _CellMoments, rz1: np.ndarray,
                           rz0: np.ndarray) -> float:
    """Coefficient on z in the population projection of r on (z, cell
    dummies), via exact moment matrices."""
    k = len(cm.m)
    xx = np.zeros((k + 1, k + 1))
    xr = np.zeros(k + 1)
    me = cm.m * cm.e
    xx[0, 0] = me.sum()
    xx[0, 1:] = me
    xx[1:, 0] = me
    xx[1:, 1:] = np.diag(cm.m)
    xr[0] = (me * rz1).sum()
    xr[1:] = cm.m * (cm.e * rz1 + (1.0 - cm.e) * rz0)
    return float(scipy.linalg.solve(xx, xr, assume_a="sym")[0])


def _beta_iv_direct(cm: _CellMoments) -> float:
    """Just-identified IV estimand from exact moments of (z, dummies) vs
    (d, dummies); NaN when the signed first-stage weighting cancels."""
    denom = float((cm.m * cm.var_z * cm.omega).sum())
    scale = float((cm.m * cm.var_z).sum())
    if scale <= 0 or abs(denom) <= _DEGENERATE * scale:
        return float("nan")
    k = len(cm.m)
    qw = np.zeros((k + 1, k + 1))
    qy = np.zeros(k + 1)
    me = cm.m * cm.e
    dbar = cm.e * cm.dz1 + (1.0 - cm.e) * cm.dz0
    ybar = cm.e * cm.yz1 + (1.0 - cm.e) * cm.yz0
    qw[0, 0] = (me * cm.dz1).sum()
    qw[0, 1:] = me
    qw[1:, 0] = cm.m * dbar
    qw[1:, 1:] = np.diag(cm.m)
    qy[0] = (me * cm.yz1).sum()
    qy[1:] = cm.m * ybar
    return float(scipy.linalg.solve(qw, qy)[0])


def _beta_2sls_direct(cm: _CellMoments) -> float:
    """Interacted 2SLS estimand from exact moments; instruments are z
    interacted with every cell dummy, controls are the dummies."""
    scale = float((cm.m * cm.var_z).sum())
    denom = float((cm.m * cm.var_z * cm.omega**2).sum())
    if scale <= 0 or denom <= _DEGENERATE * scale:
        return float("nan")
    k = len(cm.m)
    me = cm.m * cm.e
    dbar = cm.e * cm.dz1 + (1.0 - cm.e) * cm.dz0
    ybar = cm.e * cm.yz1 + (1.0 - cm.e) * cm.yz0
    # B = E[Qc' Qc], Qc = (z*G_1..z*G_k, G_1..G_k)
    b = np.zeros((2 * k, 2 * k))
    b[:k, :k] = np.diag(me)
    b[:k, k:] = np.diag(me)
    b[k:, :k] = np.diag(me)
    b[k:, k:] = np.diag(cm.m)
    # E[Qc' W], W = (d, G_1..G_k)
    qw = np.zeros((2 * k, k + 1))
    qw[:k, 0] = me * cm.dz1
    qw[:k, 1:] = np.diag(me)
    qw[k:, 0] = cm.m * dbar
    qw[k:, 1:] = np.diag(cm.m)
    qy = np.concatenate([me * cm.yz1, cm.m * ybar])
    binv_qw = scipy.linalg.solve(b, qw, assume_a="sym")
    binv_qy = scipy.linalg.solve(b, qy, assume_a="sym")
    lhs = qw.T @ binv_qw
    rhs = qw.T @ binv_qy
    return float(scipy.linalg.solve(lhs, rhs, assume_a="sym")[0])


def _ratio(num: float, den: float) -> float:
    return num / den if abs(den) > _DEGENERATE else float("nan")


@dataclass(frozen=True)
class PopulationEstimands:
    """Population values of every estimand, both routes.

    The plain fields come from exact moment matrices (the probability
    limits of the corresponding regressions); the ``*_weighted`` fields are
    the closed-form weighted averages over cells, which equal the direct
    values exactly under one-sided (per-cell) monotonicity.  NaN flags an
    undefined value.  The arm-level block (theta, pi1, pi0, tau_latt,
    tau_latu, variances, w_latt, lam) refers to the sign-corrected
    instrument, under which per-cell monotonicity is one-sided.
    """

    beta_iv: float
    beta_2sls: float
    beta_riv: float
    beta_iv_weighted: float
    beta_2sls_weighted: float
    beta_riv_weighted: float
    tau_late: float
    tau_latt: float
    tau_latu: float
    theta: float
    pi1: float
    pi0: float
    var_e_z1: float
    var_e_z0: float
    w_latt: float
    lam: float


def population_estimands(dgp: DgpSpec) -> PopulationEstimands:
    """Evaluate every estimand exactly on a finite population.

    See :class:`PopulationEstimands` for the two-route layout.
    """
    cm = _cell_moments(dgp)
    rm = cm.reordered()
    m = cm.m

    wiv = m * cm.var_z * cm.cx * cm.pi
    w2s = m * cm.var_z * cm.pi**2
    wrv = m * cm.var_z * cm.pi
    beta_iv_weighted = _ratio(float((m * cm.var_z * cm.cx * cm.pitau).sum()),
                              float(wiv.sum()))
    beta_2sls_weighted = _ratio(float((m * cm.var_z * cm.pi * cm.pitau).sum()),
                                float(w2s.sum()))
    beta_riv_weighted = _ratio(float((m * cm.var_z * cm.pitau).sum()),
                               float(wrv.sum()))
    tau_late = _ratio(float((m * cm.pitau).sum()), float((m * cm.pi).sum()))

    theta = float((m * rm.e).sum())
    u1 = m * rm.e
    u0 = m * (1.0 - rm.e)
    pi1 = _ratio(float((u1 * cm.pi).sum()), theta)
    pi0 = _ratio(float((u0 * cm.pi).sum()), 1.0 - theta)
    tau_latt = _ratio(float((u1 * cm.pitau).sum()), float((u1 * cm.pi).sum()))
    tau_latu = _ratio(float((u0 * cm.pitau).sum()), float((u0 * cm.pi).sum()))

    p1 = u1 / theta
    p0 = u0 / (1.0 - theta)
    mean1 = float(p1 @ rm.e)
    mean0 = float(p0 @ rm.e)
    v1 = float(p1 @ (rm.e - mean1) ** 2)
    v0 = float(p0 @ (rm.e - mean0) ** 2)

    if np.isnan(pi1) or np.isnan(pi0) or pi1 <= 0 or pi0 <= 0:
        w_latt = float("nan")
        lam = float("nan")
    else:
        denom = theta * v1 * pi0 + (1.0 - theta) * v0 * pi1
        if denom > 0:
            w_latt = (1.0 - theta) * v0 * pi1 / denom
        else:
            w_latt = (1.0 - theta) * pi1 / (theta * pi0 + (1.0 - theta) * pi1)
        lam = w_latt - theta * pi1 / (theta * pi1 + (1.0 - theta) * pi0)

    return PopulationEstimands(
        beta_iv=_beta_iv_direct(cm),
        beta_2sls=_beta_2sls_direct(cm),
        beta_riv=_beta_iv_direct(rm),
        beta_iv_weighted=beta_iv_weighted,
        beta_2sls_weighted=beta_2sls_weighted,
        beta_riv_weighted=beta_riv_weighted,
        tau_late=tau_late,
        tau_latt=tau_latt,
        tau_latu=tau_latu,
        theta=theta,
        pi1=pi1,
        pi0=pi0,
        var_e_z1=v1,
        var_e_z0=v0,
        w_latt=w_latt,
        lam=lam,
    )


def draw_sample(dgp: DgpSpec, n: int, seed: int) -> Sample:
    """Draw n i.i.d. units from the population; deterministic given seed.

    Each row draws its cell from the masses, z from the cell's
    encouragement rate, a stratum from the cell's shares, treatment from
    the stratum and z, and the outcome as the realized potential-outcome
    mean plus Gaussian noise.  The cell index is stored as the single
    covariate column ``"cell"``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    k = dgp.n_cells
    masses = np.array([c.mass for c in dgp.cells])
    e = np.array([c.e for c in dgp.cells])
    shares = np.array(
        [(c.always, c.never, c.complier, c.defier) for c in dgp.cells]
    )
    mu0 = np.array([c.mean_y0 for c in dgp.cells])
    mu1 = np.array([c.mean_y1 for c in dgp.cells])
    noise = np.array([c.noise_sd for c in dgp.cells])

    cell = rng.choice(k, size=n, p=masses / masses.sum())
    z = (rng.random(n) < e[cell]).astype(np.int8)
    cum = np.cumsum(shares, axis=1)
    u = rng.random(n)
    stratum = (u[:, None] >= cum[cell]).sum(axis=1)
    d = np.select(
        [stratum == 0, stratum == 1, stratum == 2],
        [np.ones(n, dtype=np.int8), np.zeros(n, dtype=np.int8), z],
        default=(1 - z),
    ).astype(np.int8)
    mean = np.where(d == 1, mu1[cell, stratum], mu0[cell, stratum])
    y = mean + noise[cell] * rng.standard_normal(n)
    return Sample(
        y=y,
        d=d,
        z=z,
        covariates={"cell": cell.astype(np.int64)},
        column_map={"y": "y", "d": "d", "z": "z"},
    )


# ---------------------------------------------------------------------------
# identity verification


@dataclass(frozen=True)
class IdentityCheck:
    name: str
    status: str  # "pass" | "fail" | "skip"
    gap: float | None
    detail: str


@dataclass(frozen=True)
class IdentityReport:
    monotonicity: str
    tol: float
    checks: tuple[IdentityCheck, ...]

    @property
    def all_pass(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    def failed(self) -> list[IdentityCheck]:
        return [c for c in self.checks if c.status == "fail"]


def _check(name: str, gap: float, tol: float, detail: str = "") -> IdentityCheck:
    status = "pass" if gap <= tol else "fail"
    return IdentityCheck(name, status, gap, detail)


def _gap(a: float, b: float) -> float:
    """|a - b| scaled by max(1, |a|, |b|): absolute for O(1) quantities,
    relative beyond, so near-cancelling weightings with huge estimands are
    judged at the precision floats can deliver."""
    return abs(a - b) / max(1.0, abs(a), abs(b))


def _skip(name: str, reason: str) -> IdentityCheck:
    return IdentityCheck(name, "skip", None, reason)


def _is_two_point_linear(cm: _CellMoments) -> bool:
    """True when e takes exactly two values and all arm-conditional means
    are constant within each e-group, so that arm-conditional means are
    exactly linear in e."""
    codes = np.round(cm.e, 12)
    values = np.unique(codes)
    if len(values) != 2:
        return False
    for v in values:
        grp = codes == v
        for arr in (cm.dz1, cm.dz0, cm.yz1, cm.yz0):
            if np.ptp(arr[grp]) > 1e-12:
                return False
    return True


def _two_group_projection_slope(cm: _CellMoments, rz1: np.ndarray,
                            rz0: np.ndarray) -> float:
    """Assemble the projection slope on z from within-arm projections of r
    on (1, e), recombined with the share-and-variance weights."""
    theta = float((cm.m * cm.e).sum())
    u1 = cm.m * cm.e / theta
    u0 = cm.m * (1.0 - cm.e) / (1.0 - theta)

    def arm(p: np.ndarray, r: np.ndarray) -> tuple[float, float, float, float]:
        mean_e = float(p @ cm.e)
        var_e = float(p @ (cm.e - mean_e) ** 2)
        mean_r = float(p @ r)
        slope = float(p @ ((cm.e - mean_e) * (r - mean_r))) / var_e
        return mean_r - slope * mean_e, slope, mean_e, var_e

    i1, s1, m1, v1 = arm(u1, rz1)
    i0, s0, m0, v0 = arm(u0, rz0)
    w1 = (1.0 - theta) * v0 / (theta * v1 + (1.0 - theta) * v0)
    w0 = 1.0 - w1
    di, ds = i1 - i0, s1 - s0
    return w1 * (di + ds * m1) + w0 * (di + ds * m0)


def verify_identities(dgp: DgpSpec, tol: float = 1e-10) -> IdentityReport:
    """Check every closed-form identity against the direct moment route.

    Identities whose assumptions the population violates are marked
    skipped with the reason, never failed.
    """
    cm = _cell_moments(dgp)
    rm = cm.reordered()
    mono = monotonicity(dgp)
    one_sided = mono in ("strong", "weak")
    est = population_estimands(dgp)
    checks: list[IdentityCheck] = []

    # (1) interacted 2SLS equals the squared-slope variance-weighted form
    name = "2sls_weighted_form"
    if not one_sided:
        checks.append(_skip(name, "cells mix compliers and defiers"))
    elif np.isnan(est.beta_2sls_weighted):
        checks.append(_skip(name, "no first-stage variation anywhere"))
    else:
        checks.append(_check(name, _gap(est.beta_2sls, est.beta_2sls_weighted), tol))

    # (2) just-identified IV equals the signed variance-weighted form
    name = "iv_signed_weighted_form"
    if not one_sided:
        checks.append(_skip(name, "cells mix compliers and defiers"))
    elif np.isnan(est.beta_iv_weighted) or np.isnan(est.beta_iv):
        checks.append(_skip(name, "signed first-stage weights cancel; IV undefined"))
    else:
        checks.append(_check(name, _gap(est.beta_iv, est.beta_iv_weighted), tol))

    # (3) under one-sided compliance everywhere, IV already has the
    # sign-corrected form and reordering changes nothing
    name = "strong_monotone_iv_form"
    if mono != "strong":
        checks.append(_skip(name, f"monotonicity is {mono}, not strong"))
    elif np.isnan(est.beta_riv_weighted) or np.isnan(est.beta_iv):
        checks.append(_skip(name, "no movers"))
    else:
        gap = max(
            _gap(est.beta_iv, est.beta_riv_weighted),
            _gap(est.beta_riv, est.beta_iv),
        )
        checks.append(_check(name, gap, tol))

    # (4) reordered IV equals the unsigned variance-weighted form
    name = "riv_weighted_form"
    if not one_sided:
        checks.append(_skip(name, "cells mix compliers and defiers"))
    elif np.isnan(est.beta_riv_weighted):
        checks.append(_skip(name, "no movers"))
    else:
        checks.append(_check(name, _gap(est.beta_riv, est.beta_riv_weighted), tol))

    # (5) two-point-e populations: treated/untreated mover decomposition
    # with reversed weights reconstructs the estimand, and the weight gap
    # times the effect spread equals the bias
    name = "latt_latu_reverse_weights"
    ln = _is_two_point_linear(rm)
    if not one_sided:
        checks.append(_skip(name, "cells mix compliers and defiers"))
    elif not ln:
        checks.append(
            _skip(name, "arm-conditional means are not linear in a two-point e")
        )
    elif np.isnan(est.w_latt) or np.isnan(est.beta_riv):
        checks.append(_skip(name, "arm-level mover shares degenerate"))
    else:
        recon = est.w_latt * est.tau_latt + (1.0 - est.w_latt) * est.tau_latu
        gap = max(
            _gap(est.beta_riv, recon),
            _gap(est.beta_riv - est.tau_late, est.lam * (est.tau_latt - est.tau_latu)),
        )
        checks.append(_check(name, gap, tol))

    # (6) under equal arm variances of e: the estimand matches the
    # complier-weighted average iff theta = 1/2 or the spread vanishes
    name = "theta_half_rule"
    hs = (
        abs(est.var_e_z1 - est.var_e_z0)
        <= 1e-9 * max(est.var_e_z1, est.var_e_z0, 1e-30)
    )
    if not one_sided:
        checks.append(_skip(name, "cells mix compliers and defiers"))
    elif not ln:
        checks.append(_skip(name, "arm-conditional means are not linear in e"))
    elif not hs:
        checks.append(_skip(name, "arm variances of e differ"))
    elif np.isnan(est.w_latt):
        checks.append(_skip(name, "arm-level mover shares degenerate"))
    else:
        bias = est.beta_riv - est.tau_late
        spread = est.tau_latt - est.tau_latu
        if abs(est.theta - 0.5) <= 1e-9 or abs(spread) <= 1e-9:
            checks.append(_check(name, abs(bias), tol, "zero-bias direction"))
        else:
            from .decomposition import lambda_rule_of_thumb

            lam_hs = lambda_rule_of_thumb(est.theta, est.pi1, est.pi0)
            gap = _gap(bias, lam_hs * spread)
            if abs(bias) <= tol:
                checks.append(
                    IdentityCheck(
                        name,
                        "fail",
                        gap,
                        "bias vanished although theta != 1/2 and the spread is nonzero",
                    )
                )
            else:
                checks.append(_check(name, gap, tol, "nonzero-bias direction"))

    # (7) projection of any response on (z, dummies): the slope on z is
    # the variance-weighted average of the per-cell slopes
    name = "projection_variance_weighting"
    scale = float((cm.m * cm.var_z).sum())
    if scale <= 0:
        checks.append(_skip(name, "instrument is degenerate in every cell"))
    else:
        gaps = []
        for rz1, rz0 in ((cm.dz1, cm.dz0), (cm.yz1, cm.yz0)):
            direct = _projection_slope_on_z(cm, rz1, rz0)
            weighted = float((cm.m * cm.var_z * (rz1 - rz0)).sum()) / scale
            gaps.append(_gap(direct, weighted))
        checks.append(_check(name, max(gaps), tol, "checked for d and y responses"))

    # (8) the same slope decomposes over the two instrument arms via
    # within-arm projections on (1, e)
    name = "projection_two_group_decomposition"
    theta = float((cm.m * cm.e).sum())
    u1 = cm.m * cm.e / theta
    u0 = cm.m * (1.0 - cm.e) / (1.0 - theta)
    v1 = float(u1 @ (cm.e - float(u1 @ cm.e)) ** 2)
    v0 = float(u0 @ (cm.e - float(u0 @ cm.e)) ** 2)
    if min(v1, v0) < 1e-12:
        checks.append(_skip(name, "e is constant within an instrument arm"))
    else:
        gaps = []
        for rz1, rz0 in ((cm.dz1, cm.dz0), (cm.yz1, cm.yz0)):
            direct = _projection_slope_on_z(cm, rz1, rz0)
            assembled = _two_group_projection_slope(cm, rz1, rz0)
            gaps.append(_gap(direct, assembled))
        checks.append(_check(name, max(gaps), tol, "checked for d and y responses"))

    # (9) the complier-weighted average is the stated convex combination of
    # the treated- and untreated-mover averages
    name = "late_convex_in_latt_latu"
    if not one_sided:
        checks.append(_skip(name, "cells mix compliers and defiers"))
    elif np.isnan(est.tau_latt) or np.isnan(est.tau_latu) or np.isnan(est.tau_late):
        checks.append(_skip(name, "no movers in one arm"))
    else:
        wnum = est.theta * est.pi1
        wden = est.theta * est.pi1 + (1.0 - est.theta) * est.pi0
        combo = (wnum * est.tau_latt + (1.0 - est.theta) * est.pi0 * est.tau_latu) / wden
        checks.append(_check(name, _gap(est.tau_late, combo), tol))

    return IdentityReport(monotonicity=mono, tol=tol, checks=tuple(checks))


# ---------------------------------------------------------------------------
# constructors, fixtures, serialization


def hs_mass(p: float, q: float) -> float:
    """Mass on the first of two e-values that equates the arm variances of
    e (closed form)."""
    if not (0 < p < 1 and 0 < q < 1):
        raise ValueError("e values must be in (0,1)")
    sp = math.sqrt(p * (1 - p))
    sq = math.sqrt(q * (1 - q))
    return sq / (sp + sq)


def _strata(mover: float, defier: bool, rest_split: float) -> tuple[float, float, float, float]:
    rest = 1.0 - mover
    always = rest * rest_split
    never = rest - always
    if defier:
        return always, never, 0.0, mover
    return always, never, mover, 0.0


def random_dgp(rng: np.random.Generator, max_cells: int = 8,
               monotone: str = "weak") -> DgpSpec:
    """Random valid population with one-sided cells.

    ``monotone="strong"`` draws complier-only cells; ``"weak"`` flips at
    least one cell to defiers.  Masses, encouragement rates, and mover
    shares are bounded away from degeneracy so closed-form denominators
    stay well-scaled.
    """
    if monotone not in ("strong", "weak"):
        raise ValueError(f"monotone must be 'strong' or 'weak', got {monotone!r}")
    k = int(rng.integers(2, max_cells + 1))
    masses = rng.dirichlet(np.full(k, 2.0)) + 0.05
    masses /= masses.sum()
    defier = np.zeros(k, dtype=bool)
    if monotone == "weak":
        defier = rng.random(k) < 0.4
        if not defier.any():
            defier[-1] = True
        if defier.all():
            defier[0] = False
    cells = []
    for i in range(k):
        mover = float(rng.uniform(0.1, 0.6))
        cells.append(
            PopCell(
                mass=float(masses[i]),
                e=float(rng.uniform(0.15, 0.85)),
                **dict(
                    zip(
                        ("always", "never", "complier", "defier"),
                        _strata(mover, bool(defier[i]), float(rng.uniform(0.2, 0.8))),
                    )
                ),
                mean_y0=tuple(rng.normal(0.0, 1.0, 4)),
                mean_y1=tuple(rng.normal(0.0, 1.0, 4)),
                noise_sd=float(rng.uniform(0.0, 0.8)),
            )
        )
    return DgpSpec(tuple(cells))


def two_point_dgp(rng: np.random.Generator, *, hs: bool = False,
                  theta_half: bool = False, defier_second: bool = False,
                  equal_tau: bool = False) -> DgpSpec:
    """Two-cell population whose (sign-corrected) e takes two values.

    With two cells every arm-conditional mean is exactly linear in e,
    which is the structural setting of the reversed-weights decomposition.
    ``hs`` solves for the masses that equate the arm variances of e;
    ``theta_half`` centres the encouragement share at one half (which also
    yields equal variances); ``defier_second`` makes the second cell
    defier-only with its raw e flipped so the sign-corrected e keeps the
    intended two-point support; ``equal_tau`` forces a common mover effect.
    """
    p = float(rng.uniform(0.15, 0.45))
    q = 1.0 - p if theta_half else float(rng.uniform(0.55, 0.85))
    if theta_half or hs:
        mass1 = hs_mass(p, q)
    else:
        mass1 = float(rng.uniform(0.25, 0.75))
    tau_common = float(rng.normal(0.0, 1.0))
    cells = []
    for i, (ev, defier) in enumerate(((p, False), (q, defier_second))):
        mover = float(rng.uniform(0.15, 0.5))
        mu0 = rng.normal(0.0, 1.0, 4)
        mu1 = rng.normal(0.0, 1.0, 4)
        if equal_tau:
            mu1[2] = mu0[2] + tau_common
            mu1[3] = mu0[3] + tau_common
        e_raw = 1.0 - ev if defier else ev
        cells.append(
            PopCell(
                mass=mass1 if i == 0 else 1.0 - mass1,
                e=e_raw,
                **dict(
                    zip(
                        ("always", "never", "complier", "defier"),
                        _strata(mover, defier, float(rng.uniform(0.2, 0.8))),
                    )
                ),
                mean_y0=tuple(mu0),
                mean_y1=tuple(mu1),
                noise_sd=float(rng.uniform(0.0, 0.5)),
            )
        )
    return DgpSpec(tuple(cells))


def sign_reversal_dgp() -> DgpSpec:
    """Frozen population with every conditional mover effect >= 0.1 whose
    just-identified IV estimand is nonetheless negative.

    The defier cell carries the large mover effect (1.9 vs 0.15), so the
    signed weighting flips the dominant contribution while the
    sign-corrected and interacted estimands stay inside the convex hull of
    the conditional effects.  Kept as a regression fixture; the test suite
    re-verifies the properties on every run.
    """
    return DgpSpec(
        (
            PopCell(
                mass=0.55,
                e=0.5,
                always=0.25,
                never=0.35,
                complier=0.4,
                defier=0.0,
                mean_y0=(0.3, -0.2, 0.1, 0.0),
                mean_y1=(0.8, 0.1, 0.25, 0.0),
                noise_sd=0.4,
            ),
            PopCell(
                mass=0.45,
                e=0.5,
                always=0.3,
                never=0.34,
                complier=0.0,
                defier=0.36,
                mean_y0=(-0.1, 0.4, 0.0, -0.6),
                mean_y1=(0.5, -0.3, 0.0, 1.3),
                noise_sd=0.4,
            ),
        )
    )


def fixture_dgps() -> list[tuple[str, DgpSpec]]:
    """Twenty named, deterministic populations used across the test suite:
    strong and weak random draws, engineered two-point variants, the
    sign-reversal fixture, and hand-built corner cases."""
    out: list[tuple[str, DgpSpec]] = []
    for i in range(8):
        out.append((f"strong-{i}", random_dgp(np.random.default_rng(100 + i),
                                              monotone="strong")))
    for i in range(5):
        out.append((f"weak-{i}", random_dgp(np.random.default_rng(200 + i),
                                            monotone="weak")))
    out.append(("two-point-hs", two_point_dgp(np.random.default_rng(301), hs=True)))
    out.append(
        ("two-point-theta-half",
         two_point_dgp(np.random.default_rng(302), theta_half=True))
    )
    out.append(
        ("two-point-defier",
         two_point_dgp(np.random.default_rng(303), hs=True, defier_second=True))
    )
    out.append(
        ("two-point-equal-tau",
         two_point_dgp(np.random.default_rng(304), hs=True, equal_tau=True))
    )
    out.append(("mirrored-movers", _mirrored_movers()))
    out.append(("constant-e", _constant_e()))
    out.append(("sign-reversal", sign_reversal_dgp()))
    return out


def _mirrored_movers() -> DgpSpec:
    """Two equal cells, compliers in one and defiers in the other, with
    matching mover effects: the signed weighting cancels exactly."""
    return DgpSpec(
        (
            PopCell(mass=0.5, e=0.5, always=0.3, never=0.3, complier=0.4,
                    defier=0.0, mean_y0=(0.0, 0.0, 0.0, 0.0),
                    mean_y1=(0.0, 0.0, 1.0, 0.0)),
            PopCell(mass=0.5, e=0.5, always=0.3, never=0.3, complier=0.0,
                    defier=0.4, mean_y0=(0.0, 0.0, 0.0, 0.0),
                    mean_y1=(0.0, 0.0, 0.0, 1.0)),
        )
    )


def _constant_e() -> DgpSpec:
    """Three complier-only cells with a common encouragement rate: the
    plain IV estimand already equals the complier-weighted average."""
    rng = np.random.default_rng(42)
    cells = []
    for mass, mover in ((0.5, 0.3), (0.3, 0.5), (0.2, 0.2)):
        cells.append(
            PopCell(
                mass=mass,
                e=0.4,
                **dict(zip(("always", "never", "complier", "defier"),
                           _strata(mover, False, 0.5))),
                mean_y0=tuple(rng.normal(0.0, 1.0, 4)),
                mean_y1=tuple(rng.normal(0.0, 1.0, 4)),
                noise_sd=0.3,
            )
        )
    return DgpSpec(tuple(cells))


def dgp_to_dict(dgp: DgpSpec) -> dict:
    return {
        "cells": [
            {
                "mass": c.mass,
                "e": c.e,
                "always": c.always,
                "never": c.never,
                "complier": c.complier,
                "defier": c.defier,
                "mean_y0": dict(zip(STRATA, c.mean_y0)),
                "mean_y1": dict(zip(STRATA, c.mean_y1)),
                "noise_sd": c.noise_sd,
            }
            for c in dgp.cells
        ]
    }


def dgp_from_dict(data: dict) -> DgpSpec:
    try:
        cells = []
        for raw in data["cells"]:
            cells.append(
                PopCell(
                    mass=float(raw["mass"]),
                    e=float(raw["e"]),
                    always=float(raw["always"]),
                    never=float(raw["never"]),
                    complier=float(raw["complier"]),
                    defier=float(raw["defier"]),
                    mean_y0=tuple(float(raw["mean_y0"][s]) for s in STRATA),
                    mean_y1=tuple(float(raw["mean_y1"][s]) for s in STRATA),
                    noise_sd=float(raw.get("noise_sd", 0.0)),
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed population spec: {exc}") from exc
    return DgpSpec(tuple(cells))


def save_dgp(dgp: DgpSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dgp_to_dict(dgp), indent=2) + "\n")


def load_dgp(path: str | Path) -> DgpSpec:
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"population spec not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"population spec {p} is not valid JSON: {exc}") from exc
    return dgp_from_dict(data)
