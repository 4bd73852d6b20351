"""Flat parameter vector convention and score evaluation.

The packed order is fixed everywhere: the columns of ``B`` stacked species by
species (``beta_1, ..., beta_p``, each of length d), followed by the lower
triangle of ``Sigma`` row by row (``sigma_11, sigma_21, sigma_22, ...``).
Off-diagonal entries are free coordinates with symmetric completion, so their
score components carry a factor 2.
"""

from __future__ import annotations

import numpy as np

from .importance import SiteMoments
from .model import Dataset, ModelParams


def n_params(d: int, p: int) -> int:
    return d * p + p * (p + 1) // 2


def tril_index(j: int, k: int) -> int:
    """Position of sigma_jk (j >= k) within the packed lower triangle."""
    if k > j:
        j, k = k, j
    return j * (j + 1) // 2 + k


def pack_params(params: ModelParams) -> np.ndarray:
    d, p = params.B.shape
    tril = params.Sigma[np.tril_indices(p)]
    return np.concatenate([params.B.T.ravel(), tril])


def unpack_params(theta: np.ndarray, d: int, p: int) -> ModelParams:
    theta = np.asarray(theta, dtype=float)
    if theta.size != n_params(d, p):
        raise ValueError(f"theta has length {theta.size}, expected {n_params(d, p)}")
    B = theta[: d * p].reshape(p, d).T
    Sigma = np.zeros((p, p))
    Sigma[np.tril_indices(p)] = theta[d * p:]
    Sigma = Sigma + np.tril(Sigma, -1).T
    return ModelParams(B=B, Sigma=Sigma)


def param_names(species: list[str], covariates: list[str]) -> list[str]:
    names = [f"beta[{x},{sp}]" for sp in species for x in covariates]
    for j, sp_j in enumerate(species):
        for k in range(j + 1):
            names.append(f"sigma[{sp_j},{species[k]}]")
    return names


def sigma_score_matrix(Sigma_inv: np.ndarray, second_moment: np.ndarray) -> np.ndarray:
    """Matrix of d/d sigma_jk of E[log p(Z) | Y] for one site.

    Entry (j, k) is ``(2 - delta_jk)/2 * [Om M Om - Om]_jk`` with
    ``Om = Sigma^{-1}`` and ``M`` the conditional second moment.
    """
    inner = Sigma_inv @ second_moment @ Sigma_inv - Sigma_inv
    factor = 2.0 - np.eye(Sigma_inv.shape[0])
    return 0.5 * factor * inner


def site_score(
    params: ModelParams, data: Dataset, site: int, moments: SiteMoments
) -> np.ndarray:
    """Conditional expectation of the complete-data score for one site.

    This is the marginal score by Louis' identity; it consumes exactly the
    moment statistics the M-step uses (``exp_mean`` and ``second_moment``).
    """
    d, p = params.B.shape
    x = data.covariates[site]
    eta0 = data.offsets[site] + x @ params.B
    resid = data.counts[site] - np.exp(eta0) * moments.exp_mean
    beta_part = np.outer(resid, x).ravel()
    Sigma_inv = np.linalg.inv(params.Sigma)
    smat = sigma_score_matrix(Sigma_inv, moments.second_moment)
    return np.concatenate([beta_part, smat[np.tril_indices(p)]])
