import numpy as np
import pytest

import ivlate as iv
from ivlate.bootstrap import BootstrapConfig, bootstrap_se, bootstrap_se_vector
from ivlate.errors import BootstrapError, EstimandError


def normal_sample(n=1000, sd=2.0, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, sd, n)
    z = rng.integers(0, 2, n)
    return iv.Sample(y, z, z, {"g": np.zeros(n, dtype=int)},
                     {"y": "y", "d": "d", "z": "z"})


def mean_y(s):
    return float(s.y.mean())


class TestBootstrapSe:
    def test_constant_statistic(self):
        res = bootstrap_se(normal_sample(), lambda s: 3.25, BootstrapConfig(100, 0))
        assert res.se == 0.0
        assert res.failures == 0

    def test_sample_mean_matches_closed_form(self):
        # sd of the mean of n iid draws is sd/sqrt(n)
        n, sd = 1000, 2.0
        target = sd / np.sqrt(n)
        for seed in (0, 1, 2):
            s = normal_sample(n, sd, seed)
            res = bootstrap_se(s, mean_y, BootstrapConfig(500, seed=seed))
            assert abs(res.se - target) / target < 0.10

    def test_reproducible_bit_identical(self):
        s = normal_sample()
        a = bootstrap_se(s, mean_y, BootstrapConfig(300, seed=7))
        b = bootstrap_se(s, mean_y, BootstrapConfig(300, seed=7))
        assert a.se == b.se

    def test_identical_across_worker_counts(self):
        s = normal_sample()
        a = bootstrap_se(s, mean_y, BootstrapConfig(300, seed=7, n_jobs=1))
        b = bootstrap_se(s, mean_y, BootstrapConfig(300, seed=7, n_jobs=4))
        assert a.se == b.se

    def test_scalar_and_vector_agree(self):
        s = normal_sample()
        a = bootstrap_se(s, mean_y, BootstrapConfig(200, seed=3))
        b = bootstrap_se_vector(
            s, lambda x: [mean_y(x), 2 * mean_y(x)], BootstrapConfig(200, seed=3), 2
        )
        assert b.se[0] == a.se
        assert b.se[1] == pytest.approx(2 * a.se, rel=1e-12)

    def test_seed_changes_result(self):
        s = normal_sample()
        a = bootstrap_se(s, mean_y, BootstrapConfig(200, seed=1))
        b = bootstrap_se(s, mean_y, BootstrapConfig(200, seed=2))
        assert a.se != b.se


class TestFailures:
    def test_failures_counted_and_excluded(self):
        s = normal_sample(200)

        def sometimes(sample):
            # fails on roughly a third of resamples, deterministically in
            # the resample itself
            if sample.y[0] > 0.8:
                raise EstimandError("synthetic failure")
            return float(sample.y.mean())

        res = bootstrap_se(s, sometimes, BootstrapConfig(400, seed=5))
        assert 0 < res.failures < 200
        assert np.isfinite(res.se)

    def test_mostly_failing_statistic_raises(self):
        s = normal_sample(200)

        def mostly(sample):
            if sample.y[0] < 1.5:
                raise EstimandError("synthetic failure")
            return 1.0

        with pytest.raises(BootstrapError, match="unreliable"):
            bootstrap_se(s, mostly, BootstrapConfig(100, seed=5))

    def test_nan_counts_as_failure(self):
        s = normal_sample(100)

        def sometimes_nan(sample):
            return float("nan") if sample.y[0] > 0.8 else 1.0

        res = bootstrap_se(s, sometimes_nan, BootstrapConfig(200, seed=6))
        assert res.failures > 0
        assert res.se == 0.0

    def test_cell_losing_an_arm_is_a_failure(self):
        # one tiny cell: resamples occasionally drop one of its arms, which
        # must surface as a failure, not a wrong number
        y = np.concatenate([np.random.default_rng(0).normal(size=60), [5.0, 6.0]])
        d = np.concatenate([np.tile([0, 1], 30), [0, 1]]).astype(int)
        z = np.concatenate([np.tile([0, 1], 30), [0, 1]]).astype(int)
        g = np.concatenate([np.zeros(60, dtype=int), [1, 1]])
        s = iv.Sample(y, d, z, {"g": g}, {"y": "y", "d": "d", "z": "z"})

        def stat(sample):
            table = iv.build_cells(sample, ["g"])
            est = iv.cell_estimates(table)  # raises on an empty arm
            return iv.estimate_tau_late(table, est).estimate

        res = bootstrap_se(s, stat, BootstrapConfig(300, seed=9))
        assert res.failures > 0


class TestConfigValidation:
    def test_needs_two_replications(self):
        with pytest.raises(ValueError):
            BootstrapConfig(replications=1)

    def test_rows_only(self):
        with pytest.raises(ValueError):
            BootstrapConfig(resample_unit="cells")

    def test_positive_workers(self):
        with pytest.raises(ValueError):
            BootstrapConfig(n_jobs=0)
