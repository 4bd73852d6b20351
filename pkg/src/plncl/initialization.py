"""Warm starts for the EM loops.

``init_moment`` is a cheap log-count regression; ``init_vem_lite`` refines it
by coordinate ascent on the evidence lower bound of a per-site diagonal
Gaussian approximation of the latent conditional.  Neither affects the
validity of the samplers, only their warm-up speed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr
from scipy.special import gammaln

from .gaussian import make_spd
from .model import Dataset, ModelParams
from .newton import newton_poisson_species

# Initial per-site proposal variances never start below this.
MIN_SITE_VAR = 0.1


@dataclass(frozen=True)
class InitState:
    """Initial parameters plus per-site proposal moments."""

    params0: ModelParams
    site_means: np.ndarray  # (n, p)
    site_vars: np.ndarray   # (n, p) positive, diagonal proposal covariances

    def __post_init__(self):
        if np.any(self.site_vars <= 0):
            raise ValueError("site_vars must be positive")
        if self.site_means.shape != self.site_vars.shape:
            raise ValueError("site_means and site_vars shapes differ")


def _leastsq_coefficients(data: Dataset, targets: np.ndarray) -> np.ndarray:
    X = data.covariates
    d = X.shape[1]
    rank = np.linalg.matrix_rank(X)
    if rank < d:
        _, _, piv = qr(X, mode="economic", pivoting=True)
        dependent = sorted(piv[rank:])
        names = [data.covariate_names[c] for c in dependent]
        raise ValueError(
            f"covariate matrix is rank deficient; dependent columns: {names}"
        )
    coef, *_ = np.linalg.lstsq(X, targets, rcond=None)
    return coef


def init_moment(data: Dataset) -> InitState:
    """Log-shifted-count least squares initialization (no RNG)."""
    W = np.log(data.counts + 0.5) - data.offsets
    B0 = _leastsq_coefficients(data, W)
    resid = W - data.covariates @ B0
    Sigma0 = make_spd(resid.T @ resid / data.n_sites)
    site_vars = np.maximum(MIN_SITE_VAR, resid.var(axis=0))
    return InitState(
        params0=ModelParams(B=B0, Sigma=Sigma0),
        site_means=resid,
        site_vars=np.broadcast_to(site_vars, resid.shape).copy(),
    )


def _elbo(data, B, Sigma, M, S) -> float:
    """Evidence lower bound for the diagonal-Gaussian site approximation."""
    n, p = data.counts.shape
    eta = data.offsets + data.covariates @ B + M
    y = data.counts
    ll = np.sum(y * eta - np.exp(eta + 0.5 * S) - gammaln(y + 1.0))
    chol = np.linalg.cholesky(Sigma)
    Omega = np.linalg.inv(Sigma)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    quad = np.einsum("ij,jk,ik->", M, Omega, M) + np.sum(S * np.diag(Omega))
    prior = -0.5 * (n * logdet + quad + n * p * np.log(2.0 * np.pi))
    entropy = 0.5 * np.sum(np.log(S)) + 0.5 * n * p * (1.0 + np.log(2.0 * np.pi))
    return float(ll + prior + entropy)


def _ascend_sites(data, B, Sigma, M, S, n_inner: int = 8):
    """Gradient steps with halving on (m_i, log s_i), jointly over sites."""
    Omega = np.linalg.inv(Sigma)
    diag_Omega = np.diag(Omega)
    eta0 = data.offsets + data.covariates @ B
    y = data.counts

    def site_objective(M, S):
        # ELBO terms that depend on (M, S); prior cross-terms included.
        ll = np.sum(y * M - np.exp(eta0 + M + 0.5 * S), axis=1)
        quad = 0.5 * (np.einsum("ij,jk,ik->i", M, Omega, M) + S @ diag_Omega)
        ent = 0.5 * np.sum(np.log(S), axis=1)
        return ll - quad + ent

    value = site_objective(M, S)
    step = np.ones(data.n_sites)
    for _ in range(n_inner):
        A = np.exp(eta0 + M + 0.5 * S)
        grad_m = y - A - M @ Omega
        grad_logs = (-0.5 * A - 0.5 * diag_Omega + 0.5 / S) * S
        for _ in range(30):
            M_new = M + step[:, None] * grad_m
            S_new = S * np.exp(step[:, None] * grad_logs)
            new_value = site_objective(M_new, S_new)
            worse = new_value < value
            if not np.any(worse):
                break
            step[worse] *= 0.5
        improved = new_value >= value
        M = np.where(improved[:, None], M_new, M)
        S = np.where(improved[:, None], S_new, S)
        value = np.maximum(new_value, value)
        step = np.minimum(step * 2.0, 1.0)
    return M, S


def init_vem_lite(data: Dataset, n_steps: int = 50) -> InitState:
    """Variational refinement of ``init_moment``; ``n_steps = 0`` is a no-op.

    Each outer loop updates the per-site Gaussian moments by guarded ascent,
    then ``B`` (per-species Newton) and ``Sigma`` (closed form) exactly.  The
    bound is asserted non-decreasing across outer loops.
    """
    state = init_moment(data)
    if n_steps == 0:
        return state
    B = state.params0.B.copy()
    Sigma = state.params0.Sigma.copy()
    M = state.site_means.copy()
    S = state.site_vars.copy()
    bound = _elbo(data, B, Sigma, M, S)
    for _ in range(n_steps):
        M, S = _ascend_sites(data, B, Sigma, M, S)
        exp_factor = np.exp(M + 0.5 * S)
        for j in range(data.n_species):
            B[:, j] = newton_poisson_species(
                data.covariates,
                data.counts[:, j],
                data.offsets[:, j],
                exp_factor[:, j],
                B[:, j],
                species=data.species_names[j],
            )
        Sigma = make_spd((M.T @ M + np.diag(S.sum(axis=0))) / data.n_sites)
        new_bound = _elbo(data, B, Sigma, M, S)
        assert new_bound >= bound - 1e-8 * (1.0 + abs(bound)), (
            f"ELBO decreased: {bound} -> {new_bound}"
        )
        bound = new_bound
    return InitState(
        params0=ModelParams(B=B, Sigma=Sigma), site_means=M, site_vars=S
    )
