import numpy as np
import pytest

import ivlate as iv
from ivlate.errors import DataError, SingularError
from ivlate.projection import DesignMatrices, first_stage_f, iv_just_identified, ols, tsls


def mp_ols_oracle(y, x):
    """Normal equations in 50-digit arithmetic: an independent check of the
    QR path."""
    import mpmath as mp

    mp.mp.dps = 50
    a = mp.matrix(x.tolist())
    b = mp.matrix([[v] for v in y.tolist()])
    sol = mp.lu_solve(a.T * a, a.T * b)
    return np.array([float(v) for v in sol])


def mp_tsls_oracle(y, w, q):
    """Explicit two-stage matrix products in 50-digit arithmetic."""
    import mpmath as mp

    mp.mp.dps = 50
    wm = mp.matrix(w.tolist())
    qm = mp.matrix(q.tolist())
    ym = mp.matrix([[v] for v in y.tolist()])
    qq_inv = mp.inverse(qm.T * qm)
    lhs = wm.T * qm * qq_inv * (qm.T * wm)
    rhs = wm.T * qm * qq_inv * (qm.T * ym)
    sol = mp.lu_solve(lhs, rhs)
    return np.array([float(v) for v in sol])


class TestOls:
    def test_exact_fit(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(30, 3))
        b = np.array([1.0, -2.0, 0.5])
        fit = ols(x @ b, x)
        np.testing.assert_allclose(fit.coefficients, b, atol=1e-12)
        np.testing.assert_allclose(fit.residuals, 0, atol=1e-12)

    def test_two_point_line(self):
        x = np.column_stack([np.ones(2), np.array([0.0, 1.0])])
        fit = ols(np.array([1.0, 3.0]), x)
        assert fit.coefficients[0] == pytest.approx(1.0, abs=1e-14)
        assert fit.coefficients[1] == pytest.approx(2.0, abs=1e-14)

    def test_random_system_vs_extended_precision(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(50, 4))
        y = rng.normal(size=50)
        fit = ols(y, x)
        np.testing.assert_allclose(fit.coefficients, mp_ols_oracle(y, x),
                                   rtol=0, atol=1e-10)

    def test_weights_match_row_duplication(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(40, 2))
        y = rng.normal(size=40)
        w = rng.integers(1, 4, size=40).astype(float)
        fit_w = ols(y, x, weights=w)
        reps = np.repeat(np.arange(40), w.astype(int))
        fit_dup = ols(y[reps], x[reps])
        np.testing.assert_allclose(fit_w.coefficients, fit_dup.coefficients,
                                   atol=1e-10)

    def test_collinear_column_dropped(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=(25, 2))
        x = np.column_stack([x0, x0[:, 0] + x0[:, 1]])
        with pytest.warns(UserWarning, match="collinear"):
            fit = ols(rng.normal(size=25), x)
        assert len(fit.dropped) == 1
        assert np.isnan(fit.coefficients[fit.dropped[0]])
        assert np.isnan(fit.vcov_robust[fit.dropped[0], 0])

    def test_rank_zero(self):
        with pytest.raises(SingularError):
            ols(np.ones(10), np.zeros((10, 2)))

    def test_negative_weights_rejected(self):
        with pytest.raises(DataError):
            ols(np.ones(5), np.ones((5, 1)), weights=np.array([1, 1, -1, 1, 1.0]))

    def test_saturated_dummies_reproduce_cell_means(self):
        rng = np.random.default_rng(3)
        g = rng.integers(0, 4, size=200)
        y = rng.normal(size=200)
        dummies = np.eye(4)[g]
        fit = ols(y, dummies)
        means = [y[g == k].mean() for k in range(4)]
        np.testing.assert_allclose(fit.coefficients, means, atol=1e-10)

    def test_vcov_symmetric_psd(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(60, 3))
        y = x @ np.array([1.0, 2.0, 3.0]) + rng.normal(size=60) * (1 + x[:, 0] ** 2)
        v = ols(y, x).vcov_robust
        np.testing.assert_allclose(v, v.T, rtol=1e-8)
        assert np.linalg.eigvalsh(v).min() > -1e-8 * np.abs(v).max()


def _dm_with_controls(y, d, z, controls):
    return DesignMatrices(
        y=y,
        w=np.column_stack([d, controls]),
        q=np.column_stack([z, controls]),
    )


class TestIvJustIdentified:
    def test_known_coefficient_recovered(self):
        # perfect compliance: d equals z, outcome effect exactly 2
        rng = np.random.default_rng(5)
        n = 10_000
        z = rng.integers(0, 2, n).astype(float)
        d = z
        y = 2.0 * d + rng.normal(size=n)
        fit = iv_just_identified(_dm_with_controls(y, d, z, np.ones((n, 1))))
        se = np.sqrt(fit.vcov_robust[0, 0])
        assert abs(fit.coefficients[0] - 2.0) < 3 * se

    def test_self_instrument_equals_ols(self):
        rng = np.random.default_rng(6)
        n = 300
        d = rng.integers(0, 2, n).astype(float)
        y = 1.5 * d + rng.normal(size=n)
        controls = np.column_stack([np.ones(n), rng.normal(size=n)])
        fit_iv = iv_just_identified(_dm_with_controls(y, d, d, controls))
        fit_ols = ols(y, np.column_stack([d, controls]))
        np.testing.assert_allclose(fit_iv.coefficients, fit_ols.coefficients,
                                   atol=1e-10)

    def test_singular_moments(self):
        rng = np.random.default_rng(7)
        n = 50
        d = rng.integers(0, 2, n).astype(float)
        y = rng.normal(size=n)
        ones = np.ones((n, 1))
        # "instrument" equal to the constant control: no variation left
        with pytest.raises(SingularError):
            iv_just_identified(_dm_with_controls(y, d, np.ones(n), ones))

    def test_shape_contract(self):
        with pytest.raises(DataError, match="underidentified"):
            DesignMatrices(np.ones(10), np.ones((10, 2)), np.ones((10, 1)))

    def test_instrument_relabel_invariance(self):
        rng = np.random.default_rng(8)
        n = 500
        z = rng.integers(0, 2, n).astype(float)
        d = np.where(rng.random(n) < 0.3 + 0.4 * z, 1.0, 0.0)
        # keep both arms in d
        y = d + rng.normal(size=n)
        ones = np.ones((n, 1))
        b1 = iv_just_identified(_dm_with_controls(y, d, z, ones)).coefficients[0]
        b2 = iv_just_identified(_dm_with_controls(y, d, 1 - z, ones)).coefficients[0]
        assert b1 == pytest.approx(b2, abs=1e-10)


class TestTsls:
    def test_equals_iv_when_just_identified(self):
        rng = np.random.default_rng(9)
        n = 400
        z = rng.integers(0, 2, n).astype(float)
        d = np.where(rng.random(n) < 0.2 + 0.5 * z, 1.0, 0.0)
        y = 0.7 * d + rng.normal(size=n)
        controls = np.column_stack([np.ones(n), rng.normal(size=n)])
        dm = _dm_with_controls(y, d, z, controls)
        np.testing.assert_allclose(
            tsls(dm).coefficients,
            iv_just_identified(dm).coefficients,
            atol=1e-10,
        )

    def test_overidentified_vs_extended_precision(self):
        rng = np.random.default_rng(10)
        n = 120
        x = rng.normal(size=(n, 2))
        z1 = rng.integers(0, 2, n).astype(float)
        z2 = rng.normal(size=n)
        d = 0.4 * z1 + 0.3 * z2 + x[:, 0] + rng.normal(size=n)
        y = 1.2 * d - x[:, 1] + rng.normal(size=n)
        controls = np.column_stack([np.ones(n), x])
        w = np.column_stack([d, controls])
        q = np.column_stack([z1, z2, controls])
        fit = tsls(DesignMatrices(y, w, q))
        np.testing.assert_allclose(fit.coefficients, mp_tsls_oracle(y, w, q),
                                   rtol=0, atol=1e-10)

    def test_regressors_not_spanned(self):
        rng = np.random.default_rng(11)
        n = 100
        d = rng.normal(size=n)
        # instruments contain only the constant: cannot span (d, 1)
        w = np.column_stack([d, np.ones(n)])
        q = np.column_stack([np.ones(n), np.zeros(n) + np.ones(n)])
        with pytest.raises(SingularError):
            tsls(DesignMatrices(rng.normal(size=n), w, q))


class TestFirstStageF:
    def test_size_under_null(self):
        # independent instrument: the robust Wald/1 statistic should reject
        # at the 5% chi-square critical value about 5% of the time
        rng = np.random.default_rng(12)
        crit = 3.841458820694124  # chi2(1) 95th percentile
        n, sims = 2000, 1000
        rejections = 0
        for _ in range(sims):
            z = rng.integers(0, 2, n).astype(float)
            d = (rng.random(n) < 0.3).astype(float)
            y = rng.normal(size=n)
            dm = _dm_with_controls(y, d, z, np.ones((n, 1)))
            if first_stage_f(dm) > crit:
                rejections += 1
        assert abs(rejections / sims - 0.05) < 0.02

    def test_excluded_count(self):
        rng = np.random.default_rng(13)
        n = 200
        controls = np.column_stack([np.ones(n), rng.normal(size=n)])
        w = np.column_stack([rng.integers(0, 2, n).astype(float), controls])
        q = np.column_stack([rng.normal(size=(n, 3)), controls])
        assert DesignMatrices(rng.normal(size=n), w, q).n_excluded == 3


class TestAgainstStatsmodels:
    def test_hc1_and_wald_conventions(self):
        sm = pytest.importorskip("statsmodels.api")
        rng = np.random.default_rng(0)
        n = 500
        x = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
        y = x @ np.array([1.0, 2.0, -0.5]) + rng.normal(size=n) * (1 + np.abs(x[:, 1]))
        fit = ols(y, x)
        ref = sm.OLS(y, x).fit(cov_type="HC1")
        np.testing.assert_allclose(fit.coefficients, ref.params, atol=1e-12)
        np.testing.assert_allclose(fit.se(), ref.bse, atol=1e-12)

        z = rng.integers(0, 2, n).astype(float)
        d = (rng.random(n) < 0.3 + 0.3 * z).astype(float)
        controls = np.column_stack([np.ones(n), rng.normal(size=n)])
        q = np.column_stack([z, rng.normal(size=n), controls])
        dm = DesignMatrices(d + rng.normal(size=n),
                            np.column_stack([d, controls]), q)
        ref_fs = sm.OLS(d, q).fit(cov_type="HC1")
        wald = float(ref_fs.wald_test(np.eye(4)[:2], scalar=True).statistic)
        assert first_stage_f(dm) == pytest.approx(wald / 2, abs=1e-10)


class TestInSampleVarianceWeighting:
    def test_slope_on_z_is_variance_weighted_cell_slope(self):
        # saturated controls: the regression slope on z equals the
        # share*var-weighted average of per-cell mean differences, exactly
        rng = np.random.default_rng(14)
        n = 3000
        g = rng.integers(0, 6, n)
        e = np.array([0.2, 0.3, 0.5, 0.6, 0.7, 0.8])[g]
        z = (rng.random(n) < e).astype(float)
        d = (rng.random(n) < 0.2 + 0.4 * z * (g % 2)).astype(float)
        dummies = np.eye(6)[g]
        fit = ols(d, np.column_stack([z, dummies]))
        num = den = 0.0
        for k in range(6):
            mask = g == k
            nk = mask.sum()
            zk = z[mask]
            n1 = zk.sum()
            var = (n1 / nk) * (1 - n1 / nk)
            delta = d[mask][zk == 1].mean() - d[mask][zk == 0].mean()
            num += nk * var * delta
            den += nk * var
        assert fit.coefficients[0] == pytest.approx(num / den, abs=1e-10)
