"""Importance sampling kernel against its quadrature oracle."""

import numpy as np
import pytest

from plncl import (
    DegenerateSampleError,
    MixtureProposal,
    MvnParams,
    ModelParams,
    compute_weights,
    estimate_moments,
    mixture_logpdf,
    quadrature_log_evidence,
    quadrature_oracle,
    sample_mixture,
)
from plncl.importance import WeightedSample, weighted_sample
from plncl.model import Dataset, log_joint_site

# Conditional moments for k=1, Y=0, zero offset and regression, unit prior
# variance; produced by the oracle under node doubling and cross-checked
# against a 50-digit independent integration.
PINNED_MEAN = -0.67806611460155754
PINNED_SECOND = 1.0808874558348039
PINNED_EXP_MEAN = 0.67806611460155754
PINNED_LOG_EVIDENCE = -0.96297240050030377


class TestComputeWeights:
    def test_proposal_equals_target(self):
        logs = np.array([-3.0, -1.0, -2.0, -4.0])
        w, ess = compute_weights(logs, logs.copy())
        np.testing.assert_allclose(w, 0.25, rtol=1e-15)
        assert ess == pytest.approx(1.0, abs=1e-12)

    def test_two_particles(self):
        w, _ = compute_weights(np.array([0.0, np.log(3.0)]), np.zeros(2))
        np.testing.assert_allclose(w, [0.25, 0.75], rtol=1e-14)

    def test_ess_half(self):
        # weights (0.5, 0.5, 0, 0) -> ess = 1 / (4 * 0.5) = 0.5
        log_t = np.array([0.0, 0.0, -np.inf, -np.inf])
        w, ess = compute_weights(log_t, np.zeros(4))
        np.testing.assert_allclose(w, [0.5, 0.5, 0.0, 0.0])
        assert ess == pytest.approx(0.5, abs=1e-14)

    def test_all_degenerate_raises(self):
        with pytest.raises(DegenerateSampleError):
            compute_weights(np.full(3, -np.inf), np.zeros(3))

    def test_shift_invariance_exact(self):
        # Integer-valued inputs keep the constant shift exact in floating
        # point, so the self-normalized weights must match bit for bit.
        rng = np.random.default_rng(0)
        log_t = rng.integers(-300, 10, size=32).astype(float)
        log_q = rng.integers(-5, 5, size=32).astype(float)
        w1, e1 = compute_weights(log_t, log_q)
        w2, e2 = compute_weights(log_t + 2048.0, log_q)
        np.testing.assert_array_equal(w1, w2)
        assert e1 == e2

    def test_shift_invariance_general(self):
        rng = np.random.default_rng(3)
        log_t = rng.normal(size=32) * 50
        log_q = rng.normal(size=32)
        w1, e1 = compute_weights(log_t, log_q)
        w2, e2 = compute_weights(log_t + 1234.5, log_q)
        np.testing.assert_allclose(w1, w2, rtol=1e-12, atol=1e-15)
        assert e1 == pytest.approx(e2, rel=1e-12)

    def test_single_dominant_weight(self):
        log_t = np.array([0.0] + [-800.0] * 15)
        w, ess = compute_weights(log_t, np.zeros(16))
        assert w[0] == pytest.approx(1.0)
        assert ess == pytest.approx(1.0 / 16.0)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            compute_weights(np.zeros(3), np.zeros(2))
        with pytest.raises(ValueError):
            compute_weights(np.array([np.nan]), np.zeros(1))
        with pytest.raises(ValueError):
            compute_weights(np.zeros(2), np.array([0.0, np.inf]))


class TestEstimateMoments:
    def test_single_particle(self):
        v = np.array([[0.3, -1.2]])
        sample = WeightedSample(
            particles=v, log_weights_raw=np.zeros(1), weights=np.ones(1), ess=1.0
        )
        m = estimate_moments(sample)
        np.testing.assert_allclose(m.mean, v[0])
        np.testing.assert_allclose(m.second_moment, np.outer(v[0], v[0]))
        np.testing.assert_allclose(m.exp_mean, np.exp(v[0]))
        np.testing.assert_allclose(m.cov, 0.0, atol=1e-15)

    def test_uniform_weights_are_sample_moments(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(64, 2))
        sample = weighted_sample(v, np.zeros(64), np.zeros(64))
        m = estimate_moments(sample)
        np.testing.assert_allclose(m.mean, v.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(m.second_moment, v.T @ v / 64, rtol=1e-12)
        np.testing.assert_allclose(m.exp_mean, np.exp(v).mean(axis=0), rtol=1e-12)

    def test_weights_sum_to_one_invariant(self):
        rng = np.random.default_rng(2)
        sample = weighted_sample(
            rng.normal(size=(50, 1)), rng.normal(size=50) * 30, rng.normal(size=50)
        )
        assert abs(sample.weights.sum() - 1.0) < 1e-12
        assert 0.0 < sample.ess <= 1.0


class TestQuadratureOracle:
    def test_pinned_k1_values(self):
        params = ModelParams(B=[[0.0]], Sigma=[[1.0]])
        m = quadrature_oracle(params, [0], [1.0], [0.0])
        assert m.mean[0] == pytest.approx(PINNED_MEAN, abs=1e-10)
        assert m.second_moment[0, 0] == pytest.approx(PINNED_SECOND, abs=1e-10)
        assert m.exp_mean[0] == pytest.approx(PINNED_EXP_MEAN, abs=1e-10)
        lev = quadrature_log_evidence(params, [0], [1.0], [0.0])
        assert lev == pytest.approx(PINNED_LOG_EVIDENCE, abs=1e-10)

    def test_degenerate_prior_limit(self):
        params = ModelParams(B=[[0.2]], Sigma=[[1e-10]])
        m = quadrature_oracle(params, [1], [1.0], [0.0])
        assert m.mean[0] == pytest.approx(0.0, abs=1e-4)
        assert m.exp_mean[0] == pytest.approx(1.0, abs=1e-4)

    def test_k2_diagonal_factorizes(self):
        params2 = ModelParams(
            B=np.array([[0.3, -0.1]]), Sigma=np.diag([0.8, 1.3])
        )
        y = [2, 0]
        m2 = quadrature_oracle(params2, y, [1.0], [0.1, -0.2])
        for j in range(2):
            p1 = ModelParams(B=[[params2.B[0, j]]], Sigma=[[params2.Sigma[j, j]]])
            m1 = quadrature_oracle(p1, [y[j]], [1.0], [[0.1, -0.2][j]])
            assert m2.mean[j] == pytest.approx(m1.mean[0], abs=1e-8)
            assert m2.second_moment[j, j] == pytest.approx(
                m1.second_moment[0, 0], abs=1e-8
            )
            assert m2.exp_mean[j] == pytest.approx(m1.exp_mean[0], abs=1e-8)
        assert m2.second_moment[0, 1] == pytest.approx(
            m2.mean[0] * m2.mean[1], abs=1e-8
        )

    def test_rejects_k3(self):
        params = ModelParams(B=np.zeros((1, 3)), Sigma=np.eye(3))
        with pytest.raises(ValueError, match="k"):
            quadrature_oracle(params, [0, 0, 0], [1.0], [0.0, 0.0, 0.0])


def _pln_site(params, y):
    return Dataset(
        counts=np.array([[y]]), covariates=np.ones((1, 1)), offsets=np.zeros((1, 1))
    )


def _is_moments(params, data, n_particles, seed, alpha=0.9):
    """One importance-sampling estimate of the k=1 conditional moments."""
    rng = np.random.default_rng(seed)
    mean = np.zeros(1)
    q = MixtureProposal(
        alpha=alpha,
        narrow=MvnParams(mean=mean, cov=0.5 * params.Sigma),
        wide=MvnParams(mean=mean, cov=params.Sigma),
    )
    draws = sample_mixture(q, n_particles, rng)
    log_t = log_joint_site(params, data, 0, draws)
    log_q = mixture_logpdf(q, draws)
    return estimate_moments(weighted_sample(draws, log_t, log_q))


def test_is_moments_close_to_oracle_at_large_n():
    params = ModelParams(B=[[0.4]], Sigma=[[1.1]])
    data = _pln_site(params, 3)
    oracle = quadrature_oracle(params, [3], [1.0], [0.0])
    est = _is_moments(params, data, 100_000, seed=11)
    assert est.mean[0] == pytest.approx(oracle.mean[0], rel=0.01)
    assert est.exp_mean[0] == pytest.approx(oracle.exp_mean[0], rel=0.01)


def test_is_error_decreases_with_sample_size():
    params = ModelParams(B=[[0.2]], Sigma=[[0.9]])
    data = _pln_site(params, 2)
    oracle = quadrature_oracle(params, [2], [1.0], [0.0])
    medians = []
    for n_particles in (500, 2000, 8000):
        errors = []
        for seed in range(50):
            est = _is_moments(params, data, n_particles, seed=seed)
            errors.append(abs(est.mean[0] - oracle.mean[0]))
        medians.append(np.median(errors))
    assert medians[0] > medians[1] > medians[2]
