"""Study harness: KS test, truth generator, replicated runs."""

import numpy as np
import pytest

from plncl import (
    FitConfig,
    ModelParams,
    StudyConfig,
    ks_test,
    random_truth,
    run_study,
)
from plncl.stats import normal_cdf


class TestKsTest:
    def test_two_equal_points(self):
        stat, _ = ks_test([0.5, 0.5])
        assert stat == pytest.approx(float(normal_cdf(0.5)), abs=1e-12)

    def test_perfect_quantile_sample(self):
        m = 100
        sample = [float(x) for x in np.sort(
            np.array([_q((i - 0.5) / m) for i in range(1, m + 1)])
        )]
        stat, p = ks_test(sample)
        assert stat <= 0.5 / m + 1e-9
        assert p > 0.99

    def test_point_mass_rejected(self):
        stat, p = ks_test(np.zeros(50))
        assert stat == pytest.approx(0.5)
        assert p < 1e-6

    def test_statistic_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            stat, p = ks_test(rng.normal(size=30))
            assert 0.0 <= stat <= 1.0
            assert 0.0 <= p <= 1.0

    def test_null_calibration(self):
        rng = np.random.default_rng(1)
        pvals = [ks_test(rng.normal(size=60))[1] for _ in range(100)]
        frac = np.mean(np.asarray(pvals) < 0.05)
        assert 0.0 <= frac <= 0.15

    def test_shifted_sample_detected(self):
        rng = np.random.default_rng(2)
        _, p = ks_test(rng.normal(size=200) + 1.0)
        assert p < 1e-6

    def test_input_validation(self):
        with pytest.raises(ValueError):
            ks_test([1.0])
        with pytest.raises(ValueError):
            ks_test([0.0, np.nan])


def _q(u):
    from plncl.stats import normal_quantile
    return float(normal_quantile(u))


class TestRandomTruth:
    def test_unit_diagonal_correlation(self):
        truth = random_truth(6, 3, np.random.default_rng(3))
        np.testing.assert_allclose(np.diag(truth.Sigma), 1.0, atol=1e-12)
        np.linalg.cholesky(truth.Sigma)
        assert np.all(np.abs(truth.B) <= 0.5)

    def test_deterministic(self):
        a = random_truth(4, 2, np.random.default_rng(4))
        b = random_truth(4, 2, np.random.default_rng(4))
        np.testing.assert_array_equal(a.B, b.B)
        np.testing.assert_array_equal(a.Sigma, b.Sigma)


def _study_cfg(seed=0, m=3, run_full=False, block_sizes=(2,)):
    truth = random_truth(2, 2, np.random.default_rng(42))
    fit_cfg = FitConfig(n_iter_max=8, n_particles_initial=60,
                        particle_growth="constant", stop_lag=4,
                        stop_tol=1e-3, master_seed=seed)
    return StudyConfig(
        n_sites=40, n_species=2, n_covariates=2, n_replicates=m,
        truth=truth, fit_config=fit_cfg, block_sizes=block_sizes,
        run_full=run_full, master_seed=seed,
    )


class TestRunStudy:
    def test_deterministic_given_seed(self):
        cfg = _study_cfg(seed=5)
        a = run_study(cfg)
        b = run_study(cfg)
        np.testing.assert_array_equal(a.estimates["cl2"], b.estimates["cl2"])
        np.testing.assert_array_equal(a.ks_p_values["cl2"], b.ks_p_values["cl2"])

    def test_parallel_matches_serial(self):
        cfg = _study_cfg(seed=6)
        a = run_study(cfg, n_jobs=1)
        b = run_study(cfg, n_jobs=2)
        np.testing.assert_array_equal(a.estimates["cl2"], b.estimates["cl2"])
        np.testing.assert_array_equal(a.coverage["cl2"], b.coverage["cl2"])

    def test_report_shapes(self):
        cfg = _study_cfg(seed=7, m=4, run_full=True)
        report = run_study(cfg)
        assert report.methods == ["full", "cl2"]
        assert report.estimates["full"].shape == (4, 4)
        assert report.coverage["cl2"].shape == (4,)
        assert len(report.coef_names) == 4
        assert all(len(report.failures[m]) == 0 for m in report.methods)
        payload = report.to_dict()
        assert set(payload["ks_p_values"]) == {"full", "cl2"}

    def test_degenerate_standardized_sample_flagged_by_ks(self):
        # estimates identical to the truth with unit variance give a point
        # mass at zero; the KS machinery must reject normality outright.
        stats = [0.0] * 50
        _, p = ks_test(stats)
        assert p < 1e-6
