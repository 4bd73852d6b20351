"""Wald reports, multiplicity adjustments, composite BIC, selection."""

import numpy as np
import pytest

from plncl import (
    BlockDesign,
    Dataset,
    FitConfig,
    ModelParams,
    all_subset_masks,
    cl_bic,
    fit_composite,
    full_design,
    random_truth,
    sample_pln,
    select_model,
    standardized_estimate,
    wald_report,
)
from plncl.stats import benjamini_hochberg, bonferroni, normal_cdf, normal_quantile
from plncl.full_em import FitResult
from plncl.params_vector import n_params, pack_params


def _fake_fit(B, Sigma, std_errors):
    params = ModelParams(B=B, Sigma=Sigma)
    theta = pack_params(params)
    return FitResult(
        params=params,
        variance=np.diag(np.asarray(std_errors) ** 2),
        std_errors=np.asarray(std_errors, dtype=float),
        objective_trace=np.zeros(1),
        ess_trace=np.zeros((1, 2)),
        iterations_run=1,
        converged=True,
        config=FitConfig(),
        n_sites=10,
    )


class TestStandardized:
    def test_zero_at_truth(self):
        assert standardized_estimate(1.3, 1.3, 2.0) == 0.0

    def test_example_value(self):
        assert standardized_estimate(1.0, 0.0, 0.25) == pytest.approx(2.0)

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(ValueError):
            standardized_estimate(1.0, 0.0, 0.0)


class TestAdjustments:
    def test_bh_never_exceeds_bonferroni(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(size=40)
        assert np.all(benjamini_hochberg(p) <= bonferroni(p) + 1e-15)

    def test_bh_no_extra_discoveries(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(size=60) ** 2
        adj = benjamini_hochberg(p)
        assert np.all(adj >= p - 1e-15)
        for level in (0.01, 0.05, 0.2):
            assert (adj < level).sum() <= (p < level).sum()

    def test_bh_known_example(self):
        p = np.array([0.01, 0.04, 0.03, 0.005])
        adj = benjamini_hochberg(p)
        np.testing.assert_allclose(adj, [0.02, 0.04, 0.04, 0.02])


class TestWaldReport:
    def test_p_value_at_critical_z(self):
        fit = _fake_fit([[1.959964]], [[1.0]], np.array([1.0, 1.0]))
        report = wald_report(fit)
        assert report.p_values[0] == pytest.approx(0.05, abs=1e-6)

    def test_zero_estimate(self):
        fit = _fake_fit([[0.0]], [[1.0]], np.array([0.5, 0.4]))
        report = wald_report(fit)
        assert report.p_values[0] == 1.0
        assert report.ci_lower[0] == pytest.approx(-report.ci_upper[0])

    def test_monotone_in_z(self):
        se = np.ones(2)
        previous = 1.1
        for theta in (0.2, 0.5, 1.0, 2.0, 3.0):
            fit = _fake_fit([[theta]], [[1.0]], se)
            p = wald_report(fit).p_values[0]
            assert p < previous
            previous = p

    def test_ci_nesting(self):
        fit = _fake_fit([[0.7, -0.2]], np.eye(2), np.full(5, 0.3))
        r95 = wald_report(fit, level=0.95)
        r99 = wald_report(fit, level=0.99)
        assert np.all(r99.ci_lower <= r95.ci_lower)
        assert np.all(r99.ci_upper >= r95.ci_upper)
        assert np.all(r95.ci_lower <= r95.estimates)
        assert np.all(r95.estimates <= r95.ci_upper)

    def test_significance_matrix_layout(self):
        fit = _fake_fit(
            [[3.0, 0.0]], [[1.0, -0.9], [-0.9, 1.0]], np.full(5, 0.2)
        )
        report = wald_report(fit)
        beta_sig = report.significance_matrix("beta")
        assert beta_sig.shape == (1, 2)
        assert beta_sig[0, 0] == 1.0 and beta_sig[0, 1] == 0.0
        sigma_sig = report.significance_matrix("sigma")
        assert sigma_sig[0, 1] == -1.0
        np.testing.assert_array_equal(sigma_sig, sigma_sig.T)

    def test_names_and_shapes(self):
        fit = _fake_fit([[0.1, 0.2]], np.eye(2), np.full(5, 0.1))
        data = Dataset(
            counts=[[1, 2]], covariates=[[1.0]],
            species_names=["cod", "haddock"], covariate_names=["intercept"],
        )
        report = wald_report(fit, data)
        assert report.names[0] == "beta[intercept,cod]"
        assert report.names[-1] == "sigma[haddock,haddock]"
        assert len(report.names) == n_params(1, 2)

    def test_normal_helpers(self):
        assert normal_cdf(0.0) == pytest.approx(0.5)
        assert normal_cdf(1.959963985) == pytest.approx(0.975, abs=1e-9)
        assert normal_quantile(0.975) == pytest.approx(1.959963985, abs=1e-8)


def _quick_composite(seed=0, n=150, p=3, masks=None):
    rng = np.random.default_rng(seed)
    truth = random_truth(p, 2, rng)
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    data, _ = sample_pln(truth, X, rng=rng)
    design = BlockDesign(n_species=3, blocks=((0, 1), (0, 2), (1, 2)))
    cfg = FitConfig(n_iter_max=15, n_particles_initial=80,
                    particle_growth="constant", stop_lag=5, stop_tol=1e-3,
                    master_seed=seed)
    return data, design, cfg


class TestClBic:
    def test_single_block_dimension_is_parameter_count(self):
        rng = np.random.default_rng(10)
        truth = random_truth(3, 2, rng)
        X = np.column_stack([np.ones(120), rng.standard_normal(120)])
        data, _ = sample_pln(truth, X, rng=rng)
        cfg = FitConfig(n_iter_max=8, n_particles_initial=60,
                        particle_growth="constant", stop_lag=4, stop_tol=1e-3,
                        master_seed=1)
        fit = fit_composite(data, cfg, design=full_design(3))
        score = cl_bic(fit, data)
        assert score.dim_estimate == pytest.approx(n_params(2, 3), rel=1e-6)
        assert not score.flagged
        assert score.bic == pytest.approx(
            fit.cl_value - 0.5 * np.log(120) * score.dim_estimate
        )

    def test_trace_identity(self):
        data, design, cfg = _quick_composite(seed=11)
        fit = fit_composite(data, cfg, design=design)
        god = fit.godambe
        assert god.dim_hg == pytest.approx(god.dim_jh, rel=1e-6)


class TestSelectModel:
    def test_all_subset_masks(self):
        masks = all_subset_masks(3)
        assert len(masks) == 4
        assert all(m[0] for m in masks)

    def test_identical_subsets_identical_scores(self):
        data, design, cfg = _quick_composite(seed=12)
        scores = select_model(
            data,
            [(True, True), (True, True)],
            cfg,
            design_builder=lambda d: design,
        )
        assert scores[0].bic == scores[1].bic
        assert scores[0].cl_value == scores[1].cl_value

    def test_single_subset(self):
        data, design, cfg = _quick_composite(seed=13)
        scores = select_model(
            data, [(True, False)], cfg, design_builder=lambda d: design
        )
        assert len(scores) == 1
        assert scores[0].model_id == (True, False)

    def test_intercept_required(self):
        data, design, cfg = _quick_composite(seed=14)
        with pytest.raises(ValueError, match="intercept"):
            select_model(data, [(False, True)], cfg, design_builder=lambda d: design)

    def test_dimension_stable_across_same_size_models(self):
        # Effective dimension should hardly move between models with the
        # same number of covariates.
        rng = np.random.default_rng(15)
        truth = random_truth(3, 3, rng)
        X = np.column_stack([np.ones(200), rng.standard_normal((200, 2))])
        data, _ = sample_pln(truth, X, rng=rng)
        design = BlockDesign(n_species=3, blocks=((0, 1), (0, 2), (1, 2)))
        cfg = FitConfig(n_iter_max=20, n_particles_initial=100,
                        particle_growth="constant", stop_lag=8, stop_tol=1e-3,
                        master_seed=2)
        scores = select_model(
            data,
            [(True, True, False), (True, False, True)],
            cfg,
            design_builder=lambda d: design,
        )
        dims = sorted(s.dim_estimate for s in scores)
        assert dims[1] / dims[0] < 1.2
