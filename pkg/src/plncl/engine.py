"""Internal E-step engine shared by the full and composite fit loops.

Per-iteration quantities (Cholesky factors, inverses, linear predictors) are
prepared once for all sites of a block, and the per-site sampling work runs
on plain arrays.  Public per-site operations (``e_step_site``,
``composite_e_step``) keep their own straightforward implementations; this
module computes the same quantities with the same per-site RNG streams, just
batched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy.special import gammaln

from .gaussian import make_spd
from .streams import substream

LOG_2PI = float(np.log(2.0 * np.pi))

# Effective particle counts below this mark a sample as degenerate.
MIN_EFFECTIVE_PARTICLES = 2.0


def prepare_cholesky_batch(covs: np.ndarray):
    """Batched Cholesky factors, inverses and log-determinants.

    Non-PD entries are repaired by the jitter policy first.
    """
    covs = np.asarray(covs, dtype=float)
    n, k, _ = covs.shape
    try:
        chols = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        covs = np.stack([make_spd(c) for c in covs])
        chols = np.linalg.cholesky(covs)
    eye = np.broadcast_to(np.eye(k), (n, k, k))
    chol_invs = np.linalg.solve(chols, eye.copy())
    diags = np.diagonal(chols, axis1=1, axis2=2)
    logdets = 2.0 * np.sum(np.log(diags), axis=1)
    return covs, chols, chol_invs, logdets


@dataclass
class BlockSweepResult:
    """Per-site outputs of one E-sweep on one block."""

    means: np.ndarray        # (n, k)
    seconds: np.ndarray      # (n, k, k)
    exp_means: np.ndarray    # (n, k)
    ess: np.ndarray          # (n,)
    log_evidence: np.ndarray  # (n,)
    degenerate: np.ndarray   # (n,) bool; degenerate rows carry stale moments


def _site_pass(
    y_row,
    eta0_row,
    lgamma_row,
    mean_row,
    narrow_chol,
    narrow_chol_inv,
    narrow_logdet,
    wide_chol,
    wide_chol_inv,
    wide_logdet,
    prior_chol_inv,
    prior_logdet,
    alpha,
    log_alpha,
    log_1m_alpha,
    n_particles,
    rng,
):
    k = mean_row.size
    pick_narrow = rng.random(n_particles) < alpha
    normals = rng.standard_normal((n_particles, k))
    centered = normals @ wide_chol.T
    if alpha > 0.0 and pick_narrow.any():
        centered[pick_narrow] = normals[pick_narrow] @ narrow_chol.T
    draws = mean_row + centered

    # target: latent prior at zero mean plus the Poisson term
    t = draws @ prior_chol_inv.T
    log_prior = -0.5 * (k * LOG_2PI + prior_logdet + np.einsum("nk,nk->n", t, t))
    eta = eta0_row + draws
    log_target = log_prior + (eta @ y_row - np.exp(eta).sum(axis=1)) - lgamma_row

    # proposal: two-component mixture sharing the site mean
    tw = centered @ wide_chol_inv.T
    log_wide = -0.5 * (k * LOG_2PI + wide_logdet + np.einsum("nk,nk->n", tw, tw))
    if alpha > 0.0:
        tn = centered @ narrow_chol_inv.T
        log_narrow = -0.5 * (
            k * LOG_2PI + narrow_logdet + np.einsum("nk,nk->n", tn, tn)
        )
        log_q = np.logaddexp(log_narrow + log_alpha, log_wide + log_1m_alpha)
    else:
        log_q = log_wide

    log_ratio = log_target - log_q
    shift = np.max(log_ratio)
    if not np.isfinite(shift):
        return None
    w = np.exp(log_ratio - shift)
    total = w.sum()
    log_evidence = shift + np.log(total / n_particles)
    w /= total
    ess = 1.0 / (n_particles * float(w @ w))
    if ess * n_particles < MIN_EFFECTIVE_PARTICLES:
        return None, ess, log_evidence
    mean = w @ draws
    second = (draws * w[:, None]).T @ draws
    second = 0.5 * (second + second.T)
    exp_mean = w @ np.exp(draws)
    return (mean, second, exp_mean), ess, log_evidence


def sweep_block(
    counts: np.ndarray,
    eta0: np.ndarray,
    lgamma_const: np.ndarray,
    Sigma_block: np.ndarray,
    state_means: np.ndarray,
    state_covs: np.ndarray,
    alpha: float,
    n_particles: int,
    master_seed: int,
    block_index: int,
    iteration: int,
    prev: BlockSweepResult = None,
    n_jobs: int = 1,
) -> BlockSweepResult:
    """One importance-sampling sweep over all sites of one block.

    ``state_means`` and ``state_covs`` hold the current per-site proposal
    moments; degenerate sites keep the moments from ``prev`` (or the proposal
    state when there is none).  Deterministic: site ``i`` draws from the
    stream keyed ``(master_seed, i, block_index, iteration)``.
    """
    n, k = state_means.shape
    y = counts.astype(float)
    _, narrow_chols, narrow_invs, narrow_logdets = prepare_cholesky_batch(state_covs)
    wide = np.atleast_2d(Sigma_block)
    wide_chol = np.linalg.cholesky(wide)
    wide_inv = np.linalg.solve(wide_chol, np.eye(k))
    wide_logdet = 2.0 * float(np.sum(np.log(np.diag(wide_chol))))
    log_alpha = np.log(alpha) if alpha > 0 else -np.inf
    log_1m_alpha = np.log1p(-alpha)

    means = np.empty((n, k))
    seconds = np.empty((n, k, k))
    exp_means = np.empty((n, k))
    ess = np.zeros(n)
    log_evidence = np.full(n, -np.inf)
    degenerate = np.zeros(n, dtype=bool)

    def run_site(i):
        return _site_pass(
            y[i], eta0[i], lgamma_const[i], state_means[i],
            narrow_chols[i], narrow_invs[i], narrow_logdets[i],
            wide_chol, wide_inv, wide_logdet,
            wide_inv, wide_logdet,
            alpha, log_alpha, log_1m_alpha,
            n_particles,
            substream(master_seed, i, block_index, iteration),
        )

    if n_jobs == 1:
        outcomes = [run_site(i) for i in range(n)]
    else:
        outcomes = Parallel(n_jobs=n_jobs, prefer="threads", batch_size=32)(
            delayed(run_site)(i) for i in range(n)
        )

    for i, outcome in enumerate(outcomes):
        if outcome is None:
            moments = None
        else:
            moments, ess[i], log_evidence[i] = outcome
        if moments is None:
            degenerate[i] = True
            if prev is not None:
                means[i] = prev.means[i]
                seconds[i] = prev.seconds[i]
                exp_means[i] = prev.exp_means[i]
                log_evidence[i] = prev.log_evidence[i]
            else:
                means[i] = state_means[i]
                seconds[i] = state_covs[i] + np.outer(state_means[i], state_means[i])
                exp_means[i] = np.exp(
                    state_means[i] + 0.5 * np.diag(state_covs[i])
                )
        else:
            means[i], seconds[i], exp_means[i] = moments
    return BlockSweepResult(
        means=means, seconds=seconds, exp_means=exp_means,
        ess=ess, log_evidence=log_evidence, degenerate=degenerate,
    )


def poisson_lgamma_rows(counts: np.ndarray) -> np.ndarray:
    """Per-site sum of log(Y!) terms, constant across iterations."""
    return gammaln(counts + 1.0).sum(axis=1)


def linear_predictor(offsets, covariates, B) -> np.ndarray:
    return offsets + covariates @ B


def batch_scores(
    counts: np.ndarray,
    covariates: np.ndarray,
    eta0: np.ndarray,
    sweep: BlockSweepResult,
    Sigma_block: np.ndarray,
) -> np.ndarray:
    """Per-site packed score estimates, vectorized over sites.

    Layout matches ``params_vector.site_score`` on the block sub-model:
    regression entries species by species, then the covariance lower
    triangle with the symmetric-completion factor on off-diagonals.
    """
    n, k = sweep.means.shape
    d = covariates.shape[1]
    resid = counts - np.exp(eta0) * sweep.exp_means          # (n, k)
    beta_part = np.einsum("nk,nd->nkd", resid, covariates).reshape(n, k * d)
    omega = np.linalg.inv(np.atleast_2d(Sigma_block))
    inner = np.einsum("ab,nbc,cd->nad", omega, sweep.seconds, omega) - omega
    factor = 0.5 * (2.0 - np.eye(k))
    smat = factor * inner
    tril = np.tril_indices(k)
    sigma_part = smat[:, tril[0], tril[1]]
    return np.concatenate([beta_part, sigma_part], axis=1)
