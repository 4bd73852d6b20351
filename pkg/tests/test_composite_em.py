"""Composite EM: block E-steps, pooled M-steps, Godambe sandwich."""

import numpy as np
import pytest

from plncl import (
    BlockDesign,
    Dataset,
    FitConfig,
    ModelParams,
    fit_composite,
    fit_full,
    full_design,
    godambe_estimate,
    m_step_beta,
    m_step_beta_composite,
    m_step_sigma,
    m_step_sigma_composite,
    quadrature_log_evidence,
    quadrature_oracle,
    random_truth,
    sample_pln,
    singleton_design,
)
from plncl.composite_em import (
    composite_e_step,
    restrict_init,
    sigma_gradient_matrix,
    _sigma_objective,
)
from plncl.full_em import e_step_site, initial_site_moments, site_proposal
from plncl.importance import SiteMoments
from plncl.initialization import init_moment
from plncl.model import log_joint_site
from plncl.params_vector import n_params
from plncl.streams import substream


def _sim(seed, n=100, p=3, d=2):
    rng = np.random.default_rng(seed)
    truth = random_truth(p, d, rng)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, d - 1))])
    data, _ = sample_pln(truth, X, rng=rng)
    return truth, data


def random_spd(rng, k):
    A = rng.normal(size=(k, k))
    return A @ A.T + k * np.eye(k)


class TestCompositeEStep:
    def test_single_block_reduces_to_full_e_step(self):
        truth, data = _sim(0, n=8)
        design = full_design(3)
        init = init_moment(data)
        moments = initial_site_moments(init)
        proposal = site_proposal(moments[2], init.params0.Sigma, 0.9)
        full = e_step_site(
            init.params0, data, 2, proposal, 300, substream(7, 2, 0, 4)
        )
        comp = composite_e_step(
            init.params0, data, design, 0, 2, proposal, 300, substream(7, 2, 0, 4)
        )
        np.testing.assert_array_equal(full[0].mean, comp[0].mean)
        np.testing.assert_array_equal(full[0].second_moment, comp[0].second_moment)
        assert full[1] == comp[1] and full[2] == comp[2]

    def test_block_target_equals_submodel_density(self):
        truth, data = _sim(1, n=5)
        block = np.array([0, 2])
        sub_params = truth.restrict(block)
        sub_data = data.restrict_species(block)
        rng = np.random.default_rng(2)
        z = rng.normal(size=2)
        direct = log_joint_site(sub_params, sub_data, 3, z)
        manual_prior = -np.log(2 * np.pi) - 0.5 * np.log(
            np.linalg.det(truth.Sigma[np.ix_(block, block)])
        ) - 0.5 * z @ np.linalg.solve(truth.Sigma[np.ix_(block, block)], z)
        eta = (
            data.offsets[3, block]
            + data.covariates[3] @ truth.B[:, block]
            + z
        )
        from scipy.special import gammaln
        y = data.counts[3, block]
        manual = manual_prior + np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0))
        assert direct == pytest.approx(manual, rel=1e-12)

    def test_singleton_block_matches_quadrature(self):
        truth, data = _sim(3, n=4, p=2)
        design = singleton_design(2)
        init = init_moment(data)
        sub_init = restrict_init(init, [1])
        prop = site_proposal(
            initial_site_moments(sub_init)[0], init.params0.Sigma[1:, 1:], 0.9
        )
        est, _, _ = composite_e_step(
            init.params0, data, design, 1, 0, prop, 100_000, substream(5, 0, 1, 0)
        )
        oracle = quadrature_oracle(
            init.params0.restrict([1]),
            data.counts[0, [1]], data.covariates[0], data.offsets[0, [1]],
        )
        assert est.mean[0] == pytest.approx(oracle.mean[0], rel=0.01, abs=0.005)
        assert est.exp_mean[0] == pytest.approx(oracle.exp_mean[0], rel=0.01)

    def test_deterministic(self):
        truth, data = _sim(4, n=6)
        design = full_design(3)
        init = init_moment(data)
        prop = site_proposal(
            initial_site_moments(init)[0], init.params0.Sigma, 0.9
        )
        a = composite_e_step(
            init.params0, data, design, 0, 0, prop, 100, substream(9, 0, 0, 1)
        )
        b = composite_e_step(
            init.params0, data, design, 0, 0, prop, 100, substream(9, 0, 0, 1)
        )
        np.testing.assert_array_equal(a[0].mean, b[0].mean)


class TestCompositeBetaStep:
    def test_single_block_identical_to_full(self):
        rng = np.random.default_rng(10)
        truth, data = _sim(11, n=50)
        design = full_design(3)
        e = rng.uniform(0.5, 2.0, size=(50, 3))
        full = m_step_beta(1, data, e[:, 1], np.zeros(2))
        comp = m_step_beta_composite(1, data, design, [e], np.zeros(2))
        np.testing.assert_allclose(comp, full, atol=1e-12)

    def test_equal_block_estimates_reduce_to_closed_form(self):
        rng = np.random.default_rng(12)
        n = 40
        data = Dataset(
            counts=rng.poisson(2.0, size=(n, 2)), covariates=np.ones((n, 1))
        )
        design = BlockDesign(n_species=2, blocks=((0, 1),), weights=[1.0])
        # two overlapping singleton-ish designs sharing species 0
        design = BlockDesign(n_species=2, blocks=((0, 1),))
        e = rng.uniform(0.5, 2.0, size=(n, 2))
        beta = m_step_beta_composite(0, data, design, [e], np.zeros(1))
        closed = np.log(data.counts[:, 0].sum() / e[:, 0].sum())
        assert beta[0] == pytest.approx(closed, abs=1e-10)

    def test_multiplicity_cancels_with_equal_estimates(self):
        # Species in several blocks with identical per-block estimates must
        # give the same solution as a single block (count weight cancels).
        rng = np.random.default_rng(13)
        n = 30
        data = Dataset(
            counts=rng.poisson(1.5, size=(n, 3)), covariates=np.ones((n, 1))
        )
        design = BlockDesign(n_species=3, blocks=((0, 1), (0, 2), (1, 2)))
        e_shared = rng.uniform(0.5, 2.0, size=n)
        block_e = [np.column_stack([e_shared, e_shared]) for _ in range(3)]
        beta = m_step_beta_composite(0, data, design, block_e, np.zeros(1))
        closed = np.log(data.counts[:, 0].sum() / e_shared.sum())
        assert beta[0] == pytest.approx(closed, abs=1e-10)

    def test_gradient_below_tolerance(self):
        rng = np.random.default_rng(14)
        truth, data = _sim(15, n=60)
        design = BlockDesign(n_species=3, blocks=((0, 1), (0, 2), (1, 2)))
        block_e = [rng.uniform(0.5, 2.0, size=(60, 2)) for _ in range(3)]
        beta = m_step_beta_composite(0, data, design, block_e, np.zeros(2))
        pooled = block_e[0][:, 0] + block_e[1][:, 0]
        y = data.counts[:, 0].astype(float)
        eta = data.offsets[:, 0] + data.covariates @ beta
        grad = (2.0 * y - np.exp(eta) * pooled) @ data.covariates
        assert np.max(np.abs(grad)) < 1e-8 * (1 + 2.0 * y.sum())


class TestCompositeSigmaStep:
    def test_single_block_gradient_vanishes_at_closed_form(self):
        rng = np.random.default_rng(20)
        vs = rng.normal(size=(25, 3))
        moments = [
            SiteMoments(mean=v, second_moment=np.outer(v, v) + 0.4 * np.eye(3),
                        exp_mean=np.exp(v))
            for v in vs
        ]
        sigma_hat = m_step_sigma(moments)
        design = full_design(3)
        A = sum(m.second_moment for m in moments)
        grad = sigma_gradient_matrix(sigma_hat, design, [A], 25)
        assert np.max(np.abs(grad)) < 1e-8

    def test_ascent_recovers_closed_form_from_perturbed_start(self):
        rng = np.random.default_rng(21)
        vs = rng.normal(size=(25, 3))
        moments = [
            SiteMoments(mean=v, second_moment=np.outer(v, v) + 0.4 * np.eye(3),
                        exp_mean=np.exp(v))
            for v in vs
        ]
        sigma_hat = m_step_sigma(moments)
        design = full_design(3)
        A = [sum(m.second_moment for m in moments)]
        start = sigma_hat + 0.3 * np.eye(3)
        result, ok = m_step_sigma_composite(design, A, start, 25)
        assert ok
        np.testing.assert_allclose(result, sigma_hat, atol=1e-4)
        M = sigma_gradient_matrix(result, design, A, 25)
        free_norm = max(
            np.abs(M - np.diag(np.diag(M))).max(), np.abs(np.diag(M)).max() / 2
        )
        assert free_norm < 1e-6 * 25

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(22)
        p, n = 3, 30
        design = BlockDesign(n_species=3, blocks=((0, 1), (0, 2), (1, 2)))
        sums = [random_spd(rng, 2) * n / 2 for _ in range(3)]
        for _ in range(3):
            Sigma = random_spd(rng, p)
            M = sigma_gradient_matrix(Sigma, design, sums, n)
            eps = 1e-5
            for j in range(p):
                for k in range(j + 1):
                    Sp, Sm = Sigma.copy(), Sigma.copy()
                    Sp[j, k] += eps
                    Sp[k, j] = Sp[j, k]
                    Sm[j, k] -= eps
                    Sm[k, j] = Sm[j, k]
                    fd = (
                        _sigma_objective(Sp, design, sums, n)
                        - _sigma_objective(Sm, design, sums, n)
                    ) / (2 * eps)
                    analytic = (1.0 if j == k else 2.0) / 2.0 * M[j, k]
                    assert analytic == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_zero_gradient_returns_start(self):
        rng = np.random.default_rng(23)
        Sigma = random_spd(rng, 2)
        design = full_design(2)
        A = [Sigma * 10]
        result, ok = m_step_sigma_composite(design, A, Sigma, 10)
        assert ok
        np.testing.assert_array_equal(result, Sigma)


class TestGodambe:
    def test_single_block_h_equals_j(self):
        rng = np.random.default_rng(30)
        scores = rng.normal(size=(15, 1, 9))
        design = full_design(3)
        god = godambe_estimate(scores, design, 1)
        np.testing.assert_array_equal(god.H, god.J)
        np.testing.assert_allclose(god.G, god.H, atol=1e-10)
        assert god.dim_hg == pytest.approx(n_params(1, 3), abs=1e-6)
        assert god.dim_jh == pytest.approx(n_params(1, 3), abs=1e-6)

    def test_single_site_j_rank_one(self):
        rng = np.random.default_rng(31)
        design = BlockDesign(n_species=3, blocks=((0, 1), (0, 2), (1, 2)))
        scores = rng.normal(size=(1, 3, 5))
        god = godambe_estimate(scores, design, 1)
        assert np.linalg.matrix_rank(god.J, tol=1e-10) <= 1

    def test_embedded_positions(self):
        design = BlockDesign(n_species=3, blocks=((0, 1), (0, 2), (1, 2)))
        scores = np.zeros((2, 3, 5))
        scores[:, 0, :] = 1.0  # only block (0, 1) contributes
        god = godambe_estimate(scores, design, 1)
        D = n_params(1, 3)
        # parameters of species 2 (beta index 2, sigma rows 3..5 not touching
        # species 0/1) stay zero
        untouched = [2, 6, 7, 8]
        for idx in untouched:
            assert np.all(god.J[idx] == 0)
            assert np.all(god.H[idx] == 0)
        assert god.J.shape == (D, D)


class TestFitComposite:
    def test_deterministic(self):
        _, data = _sim(40, n=25)
        design = BlockDesign(n_species=3, blocks=((0, 1), (0, 2), (1, 2)))
        cfg = FitConfig(n_iter_max=5, n_particles_initial=40, stop_lag=3,
                        stop_tol=1e-4, master_seed=3)
        a = fit_composite(data, cfg, design=design)
        b = fit_composite(data, cfg, design=design)
        np.testing.assert_array_equal(a.params.B, b.params.B)
        np.testing.assert_array_equal(a.params.Sigma, b.params.Sigma)
        np.testing.assert_array_equal(a.godambe.G, b.godambe.G)
        assert a.cl_value == b.cl_value

    def test_thread_count_invariant(self):
        _, data = _sim(41, n=15)
        design = BlockDesign(n_species=3, blocks=((0, 1), (0, 2), (1, 2)))
        cfg = FitConfig(n_iter_max=3, n_particles_initial=40, stop_lag=2,
                        stop_tol=1e-4, master_seed=4)
        a = fit_composite(data, cfg, design=design, n_jobs=1)
        b = fit_composite(data, cfg, design=design, n_jobs=2)
        np.testing.assert_array_equal(a.params.B, b.params.B)
        np.testing.assert_array_equal(a.params.Sigma, b.params.Sigma)

    def test_exact_cl_em_monotone(self):
        # Exact E-steps (quadrature) make the composite likelihood provably
        # non-decreasing; singleton blocks keep it cheap.
        rng = np.random.default_rng(42)
        truth = random_truth(3, 1, rng)
        data, _ = sample_pln(truth, np.ones((40, 1)), rng=rng)
        design = singleton_design(3)
        cfg = FitConfig(n_iter_max=30, n_particles_initial=2, stop_lag=60,
                        stop_tol=1e-12, master_seed=5)
        result = fit_composite(data, cfg, design=design, e_step="quadrature")
        trace = result.objective_trace
        assert len(trace) == 30
        assert np.all(np.diff(trace) >= -1e-10)

    @pytest.mark.slow
    def test_single_block_matches_full_likelihood(self):
        truth, data = _sim(43, n=500, p=3)
        cfg = FitConfig(n_iter_max=40, n_particles_initial=150,
                        particle_growth="constant", stop_lag=10, stop_tol=5e-4,
                        master_seed=6)
        full = fit_full(data, cfg)
        comp = fit_composite(data, cfg, design=full_design(3))
        assert np.max(np.abs(comp.params.B - full.params.B)) < 0.05
        assert np.max(np.abs(comp.params.Sigma - full.params.Sigma)) < 0.05
        np.testing.assert_array_equal(comp.godambe.H, comp.godambe.J)
        assert comp.godambe.dim_hg == pytest.approx(n_params(2, 3), rel=1e-6)

    def test_cl_value_close_to_exact_for_singletons(self):
        rng = np.random.default_rng(44)
        truth = random_truth(2, 1, rng)
        data, _ = sample_pln(truth, np.ones((30, 1)), rng=rng)
        design = singleton_design(2)
        cfg = FitConfig(n_iter_max=15, n_particles_initial=400,
                        particle_growth="constant", stop_lag=5, stop_tol=1e-4,
                        master_seed=7)
        result = fit_composite(data, cfg, design=design)
        exact = sum(
            quadrature_log_evidence(
                result.params.restrict([j]),
                data.counts[i, [j]], data.covariates[i], data.offsets[i, [j]],
            )
            for i in range(30)
            for j in range(2)
        )
        assert result.cl_value == pytest.approx(exact, abs=1.0)
