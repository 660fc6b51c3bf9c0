import numpy as np
import pytest

import ivlate as iv
from ivlate.decomposition import SweepCurve, SweepPoint, bias_sweep, lambda_rule_of_thumb
from ivlate.errors import EstimandError
from ivlate.sample import Cell, CellTable


def make_table(rows):
    """rows: (key, n, n_z1, mean_y_z1, mean_y_z0, mean_d_z1, mean_d_z0)."""
    total = sum(r[1] for r in rows)
    cells = []
    for key, n, n_z1, my1, my0, md1, md0 in rows:
        n_z0 = n - n_z1
        cells.append(
            Cell(
                key=key, n=n, n_z1=n_z1, n_z0=n_z0,
                mean_y_z1=my1, mean_y_z0=my0,
                mean_d_z1=md1, mean_d_z0=md0,
                share=n / total, var_z=(n_z1 / n) * (n_z0 / n),
            )
        )
    return CellTable(tuple(cells), total_n=total, covariate_names=("g",))


def reordered_dgp_table(seed=3, monotone="weak", n=20_000):
    dgp = iv.random_dgp(np.random.default_rng(seed), monotone=monotone)
    s = iv.draw_sample(dgp, n, seed=21)
    table = iv.reordered_table(iv.build_cells(s, ["cell"]))
    return s, table, iv.cell_estimates(table)


class TestDecompose:
    @pytest.mark.parametrize("seed,monotone", [(3, "weak"), (4, "strong")])
    def test_exact_reconstruction(self, seed, monotone):
        s, table, est = reordered_dgp_table(seed, monotone)
        dec = iv.decompose(table, est)
        riv = iv.estimate_beta_riv(s, iv.build_cells(s, ["cell"]))
        assert dec.beta_reconstructed == pytest.approx(riv.estimate, abs=1e-12)
        assert dec.w_latt + dec.w_latu == pytest.approx(1.0, abs=1e-12)
        assert dec.lam == pytest.approx(
            dec.w_latt - dec.theta * dec.pi1 / (dec.theta * dec.pi1
                                                + (1 - dec.theta) * dec.pi0),
            abs=1e-12,
        )

    def test_convexity_identity_on_cell_averages(self):
        _, table, est = reordered_dgp_table(5)
        dec = iv.decompose(table, est)
        num = (dec.theta * dec.pi1_np * dec.tau_latt_np
               + (1 - dec.theta) * dec.pi0_np * dec.tau_latu_np)
        den = dec.theta * dec.pi1_np + (1 - dec.theta) * dec.pi0_np
        assert dec.tau_late_np == pytest.approx(num / den, abs=1e-10)

    def test_constant_encouragement_rate(self):
        table = make_table([
            ((0,), 100, 50, 1.0, 0.2, 0.6, 0.2),
            ((1,), 100, 50, 0.1, 0.0, 0.5, 0.3),
        ])
        dec = iv.decompose(table, iv.cell_estimates(table))
        assert dec.pi1 == pytest.approx(dec.pi0, abs=1e-14)
        assert dec.tau_latt == pytest.approx(dec.tau_latu, abs=1e-14)
        assert dec.var_e_z1 == pytest.approx(0.0, abs=1e-14)
        assert dec.var_e_z0 == pytest.approx(0.0, abs=1e-14)
        # weight gap times spread vanishes: the estimate equals the
        # complier-weighted average under a flat encouragement rate
        assert dec.lam * (dec.tau_latt - dec.tau_latu) == pytest.approx(0.0, abs=1e-14)
        assert dec.w_latt == pytest.approx(1 - dec.theta, abs=1e-12)

    def test_negative_slope_precondition(self):
        table = make_table([
            ((0,), 100, 50, 1.0, 0.2, 0.2, 0.6),
            ((1,), 100, 50, 0.1, 0.0, 0.5, 0.3),
        ])
        with pytest.raises(EstimandError, match="reorder"):
            iv.decompose(table, iv.cell_estimates(table))

    def test_degenerate_first_stage(self):
        table = make_table([
            ((0,), 100, 50, 1.0, 0.2, 0.4, 0.4),
            ((1,), 100, 60, 0.1, 0.0, 0.3, 0.3),
        ])
        with pytest.warns(UserWarning):
            est = iv.cell_estimates(table)
        with pytest.raises(EstimandError, match="degenerate"):
            iv.decompose(table, est)

    def test_two_point_population_identity(self):
        # with a two-point encouragement rate the reconstruction target is
        # the population estimand itself
        dgp = iv.two_point_dgp(np.random.default_rng(17), hs=True)
        pop = iv.population_estimands(dgp)
        recon = pop.w_latt * pop.tau_latt + (1 - pop.w_latt) * pop.tau_latu
        assert recon == pytest.approx(pop.beta_riv, abs=1e-12)
        assert pop.beta_riv - pop.tau_late == pytest.approx(
            pop.lam * (pop.tau_latt - pop.tau_latu), abs=1e-12
        )

    def test_sample_decomposition_converges_on_two_point_population(self):
        # when arm-conditional means are linear in e, the projection-based
        # sample analogs estimate the same objects as the cell averages:
        # both must land on the population values
        dgp = iv.two_point_dgp(np.random.default_rng(18), hs=True,
                               defier_second=True)
        pop = iv.population_estimands(dgp)
        s = iv.draw_sample(dgp, 200_000, seed=2)
        rt = iv.reordered_table(iv.build_cells(s, ["cell"]))
        dec = iv.decompose(rt, iv.cell_estimates(rt))
        for field, target in (
            ("theta", pop.theta), ("pi1", pop.pi1), ("pi0", pop.pi0),
            ("tau_latt", pop.tau_latt), ("tau_latu", pop.tau_latu),
            ("w_latt", pop.w_latt), ("lam", pop.lam),
        ):
            assert getattr(dec, field) == pytest.approx(target, abs=0.03), field
        assert dec.tau_latt_np == pytest.approx(dec.tau_latt, abs=1e-10)
        assert dec.tau_latu_np == pytest.approx(dec.tau_latu, abs=1e-10)


class TestWeightMonotonicity:
    def test_w_latt_decreasing_in_theta(self):
        # holding the arm mover shares and variances fixed, the realized
        # weight on the treated-mover effect falls as the encouraged share
        # rises: the core of the non-intuitive weighting
        pi1, pi0, v1, v0 = 0.3, 0.2, 0.04, 0.05
        grid = np.linspace(0.02, 0.98, 49)
        w = (1 - grid) * v0 * pi1 / (grid * v1 * pi0 + (1 - grid) * v0 * pi1)
        assert (np.diff(w) < 0).all()


class TestLambdaRuleOfThumb:
    def test_half_is_zero(self):
        assert lambda_rule_of_thumb(0.5, 0.3, 0.2) == 0.0

    def test_antisymmetric_in_theta(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            theta = float(rng.uniform(0.05, 0.95))
            pi1 = float(rng.uniform(0.05, 0.9))
            pi0 = float(rng.uniform(0.05, 0.9))
            a = lambda_rule_of_thumb(theta, pi1, pi0)
            b = lambda_rule_of_thumb(1 - theta, pi1, pi0)
            assert a == pytest.approx(-b, abs=1e-12)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            lambda_rule_of_thumb(0.0, 0.1, 0.1)
        with pytest.raises(ValueError):
            lambda_rule_of_thumb(0.4, 0.0, 0.1)
        with pytest.raises(ValueError):
            lambda_rule_of_thumb(1.2, 0.1, 0.1)


class TestPublishedDecomposition:
    """Internal-consistency checks against the published application table
    (encouragement share 0.667, arm mover shares 0.134/0.083, arm
    variances 0.036/0.059)."""

    THETA, PI1, PI0 = 0.667, 0.134, 0.083
    V1, V0 = 0.036, 0.059

    def test_weight_formula_matches_published(self):
        num = (1 - self.THETA) * self.V0 * self.PI1
        den = self.THETA * self.V1 * self.PI0 + num
        assert num / den == pytest.approx(0.568, abs=2e-3)

    def test_lambda_matches_published(self):
        w_latt = 0.568
        target = self.THETA * self.PI1 / (
            self.THETA * self.PI1 + (1 - self.THETA) * self.PI0
        )
        assert target == pytest.approx(0.764, abs=1e-3)
        assert w_latt - target == pytest.approx(-0.196, abs=2e-3)

    def test_equal_variance_hypothetical_weight(self):
        lam_hs = lambda_rule_of_thumb(self.THETA, self.PI1, self.PI0)
        target = self.THETA * self.PI1 / (
            self.THETA * self.PI1 + (1 - self.THETA) * self.PI0
        )
        assert lam_hs + target == pytest.approx(0.446, abs=1e-3)

    def test_reconstruction_matches_published(self):
        assert 0.568 * 0.296 + 0.432 * 0.280 == pytest.approx(0.289, abs=1e-3)


class TestBiasSweep:
    def test_weight_one_reproduces_unweighted_share(self):
        _, table, est = reordered_dgp_table(seed=6)
        curve = bias_sweep(table, est, grid=np.array([1.0]))
        a = table.arrays()
        theta_hat = float((a.share * a.n_z1 / a.n).sum())
        assert curve.points[0].theta == pytest.approx(theta_hat, abs=1e-12)

    def test_curve_sorted_and_deterministic(self):
        _, table, est = reordered_dgp_table(seed=7)
        c1 = bias_sweep(table, est)
        c2 = bias_sweep(table, est)
        thetas = [p.theta for p in c1.points]
        assert thetas == sorted(thetas)
        assert c1 == c2

    def test_endpoint_magnitudes_and_signs(self):
        # the normalized gap approaches +1 as the encouraged share goes to
        # zero and -1 as it goes to one
        _, table, est = reordered_dgp_table(seed=8)
        curve = bias_sweep(table, est, n_points=31)
        first, last = curve.points[0], curve.points[-1]
        assert first.theta == pytest.approx(0.05, abs=1e-6)
        assert last.theta == pytest.approx(0.95, abs=1e-6)
        assert first.lam > 0.5
        assert last.lam < -0.5
        assert abs(first.lam) < 1.3 and abs(last.lam) < 1.3

    def test_identical_ratios_marked_undefined(self):
        table = make_table([
            ((0,), 100, 50, 0.8, 0.0, 0.6, 0.2),   # ratio 2.0
            ((1,), 100, 70, 0.4, 0.0, 0.5, 0.3),   # ratio 2.0
        ])
        est = iv.cell_estimates(table)
        curve = bias_sweep(table, est, grid=np.array([0.5, 1.0, 2.0]))
        assert all(not p.defined for p in curve.points)
        assert curve.zero_crossings() == ()

    def test_zero_crossing_interpolation(self):
        curve = SweepCurve((
            SweepPoint(w=2.0, theta=0.3, lam=-1.0, defined=True),
            SweepPoint(w=1.0, theta=0.5, lam=1.0, defined=True),
            SweepPoint(w=0.5, theta=0.7, lam=3.0, defined=True),
        ))
        assert curve.zero_crossings() == (0.4,)

    def test_requires_reordered_input(self):
        table = make_table([
            ((0,), 100, 50, 1.0, 0.2, 0.2, 0.6),
            ((1,), 100, 50, 0.1, 0.0, 0.5, 0.3),
        ])
        with pytest.raises(EstimandError, match="reorder"):
            bias_sweep(table, iv.cell_estimates(table))
