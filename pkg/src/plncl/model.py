"""Multivariate Poisson log-normal model.

Counts ``Y`` are an ``n x p`` matrix (sites by species).  Each site carries a
latent Gaussian vector ``Z_i ~ N(0, Sigma)`` and, conditionally on it, the
counts are independent Poisson with log-rate ``o_ij + x_i @ beta_j + Z_ij``,
where ``x_i`` is the site's covariate row and ``beta_j`` the species' column
of the regression matrix ``B``.

This module holds the data/parameter containers, the exact joint log density
(the ``-log(Y!)`` term is included so values are true log densities, which
keeps importance ratios exact), and forward simulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

# Log-rates beyond this overflow exp() in double precision during simulation.
MAX_LOG_RATE = 700.0


def default_species_names(p: int) -> list[str]:
    return [f"sp{j + 1}" for j in range(p)]


def default_covariate_names(d: int) -> list[str]:
    return [f"x{l + 1}" for l in range(d)]


@dataclass(frozen=True)
class Dataset:
    """Observed counts, covariates and offsets for ``n`` sites.

    Attributes
    ----------
    counts : (n, p) integer array, nonnegative.
    covariates : (n, d) float array.  Used as-is; supply an all-ones column
        yourself if you want an intercept (the CLI adds one by default).
    offsets : (n, p) float array, defaults to zeros.
    species_names, covariate_names : labels, generated when omitted.
    """

    counts: np.ndarray
    covariates: np.ndarray
    offsets: np.ndarray = None
    species_names: list[str] = None
    covariate_names: list[str] = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.size == 0:
            raise ValueError("counts must be a nonempty n x p matrix")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.isfinite(counts)):
                raise ValueError("counts contain non-finite values")
            if np.any(counts != np.floor(counts)):
                raise ValueError("counts must be integers")
        counts = counts.astype(np.int64)
        if np.any(counts < 0):
            i, j = np.argwhere(counts < 0)[0]
            raise ValueError(f"negative count at site {i}, species {j}")
        covariates = np.asarray(self.covariates, dtype=float)
        if covariates.ndim != 2 or covariates.shape[0] != counts.shape[0]:
            raise ValueError(
                f"covariates shape {covariates.shape} does not match "
                f"{counts.shape[0]} sites"
            )
        if not np.all(np.isfinite(covariates)):
            raise ValueError("covariates contain non-finite values")
        offsets = self.offsets
        if offsets is None:
            offsets = np.zeros(counts.shape)
        offsets = np.asarray(offsets, dtype=float)
        if offsets.shape != counts.shape:
            raise ValueError(
                f"offsets shape {offsets.shape} does not match counts "
                f"shape {counts.shape}"
            )
        if not np.all(np.isfinite(offsets)):
            raise ValueError("offsets contain non-finite values")
        species = self.species_names or default_species_names(counts.shape[1])
        covars = self.covariate_names or default_covariate_names(covariates.shape[1])
        if len(species) != counts.shape[1]:
            raise ValueError("species_names length does not match counts")
        if len(covars) != covariates.shape[1]:
            raise ValueError("covariate_names length does not match covariates")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "species_names", list(species))
        object.__setattr__(self, "covariate_names", list(covars))

    @property
    def n_sites(self) -> int:
        return self.counts.shape[0]

    @property
    def n_species(self) -> int:
        return self.counts.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def restrict_species(self, species: np.ndarray) -> "Dataset":
        """Dataset reduced to the given species columns (a block)."""
        idx = np.asarray(species, dtype=int)
        return Dataset(
            counts=self.counts[:, idx],
            covariates=self.covariates,
            offsets=self.offsets[:, idx],
            species_names=[self.species_names[j] for j in idx],
            covariate_names=self.covariate_names,
        )


@dataclass(frozen=True)
class ModelParams:
    """Regression matrix ``B`` (d x p) and latent covariance ``Sigma`` (p x p SPD)."""

    B: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if not np.all(np.isfinite(B)):
            raise ValueError("B contains non-finite values")
        if Sigma.shape[0] != Sigma.shape[1]:
            raise ValueError("Sigma must be square")
        if B.shape[1] != Sigma.shape[0]:
            raise ValueError(
                f"B has {B.shape[1]} species but Sigma is {Sigma.shape[0]} x "
                f"{Sigma.shape[1]}"
            )
        scale = max(np.abs(Sigma).max(), 1.0)
        if np.abs(Sigma - Sigma.T).max() > 1e-12 * scale:
            raise ValueError("Sigma is not symmetric")
        try:
            np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError:
            raise ValueError("Sigma is not positive definite") from None
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Sigma", Sigma)

    @property
    def n_species(self) -> int:
        return self.Sigma.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.B.shape[0]

    def restrict(self, species: np.ndarray) -> "ModelParams":
        """Parameters of the sub-model on the given species block."""
        idx = np.asarray(species, dtype=int)
        return ModelParams(B=self.B[:, idx], Sigma=self.Sigma[np.ix_(idx, idx)])


@dataclass(frozen=True)
class LatentMatrix:
    """Latent Gaussian values, one p-vector per site."""

    Z: np.ndarray

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        if not np.all(np.isfinite(Z)):
            raise ValueError("latent matrix contains non-finite values")
        object.__setattr__(self, "Z", Z)


def _check_dims(params: ModelParams, data: Dataset):
    if params.n_species != data.n_species:
        raise ValueError(
            f"params have {params.n_species} species, data has {data.n_species}"
        )
    if params.n_covariates != data.n_covariates:
        raise ValueError(
            f"params have {params.n_covariates} covariates, data has "
            f"{data.n_covariates}"
        )


def poisson_log_density(params: ModelParams, data: Dataset, z: np.ndarray) -> float:
    """Exact log p(Y | Z), summed over all sites and species."""
    eta = data.offsets + data.covariates @ params.B + z
    y = data.counts
    return float(np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0)))

def gaussian_log_density(params: ModelParams, z: np.ndarray) -> float:
    """Exact log p(Z), rows i.i.d. N(0, Sigma)."""
    z = np.atleast_2d(z)
    n, p = z.shape
    chol = np.linalg.cholesky(params.Sigma)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    sol = np.linalg.solve(chol, z.T)
    quad = np.sum(sol * sol)
    return float(-0.5 * (n * p * np.log(2.0 * np.pi) + n * logdet + quad))


def complete_log_lik(params: ModelParams, data: Dataset, z: LatentMatrix) -> float:
    """Exact joint log density log p(Y, Z) under the model.

    Decomposes as ``gaussian_log_density(Z) + poisson_log_density(Y | Z)``;
    the factorial term is included, so this is a true density (not only up to
    a constant).
    """
    _check_dims(params, data)
    zmat = z.Z if isinstance(z, LatentMatrix) else np.atleast_2d(np.asarray(z, float))
    if zmat.shape != data.counts.shape:
        raise ValueError(
            f"latent matrix shape {zmat.shape} does not match counts shape "
            f"{data.counts.shape}"
        )
    return gaussian_log_density(params, zmat) + poisson_log_density(params, data, zmat)


def log_joint_site(
    params: ModelParams, data: Dataset, site: int, z: np.ndarray
) -> np.ndarray | float:
    """Exact log p(Y_i, z) for one site.

    ``z`` may be a single p-vector or an (N, p) batch; the batch form returns
    one value per row.  Summing over sites with the rows of a latent matrix
    recovers ``complete_log_lik``.
    """
    _check_dims(params, data)
    if not 0 <= site < data.n_sites:
        raise ValueError(f"site {site} out of range [0, {data.n_sites})")
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    p = data.n_species
    if zb.shape[1] != p:
        raise ValueError(f"z has dimension {zb.shape[1]}, expected {p}")
    chol = np.linalg.cholesky(params.Sigma)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    sol = np.linalg.solve(chol, zb.T)
    log_prior = -0.5 * (p * np.log(2.0 * np.pi) + logdet + np.sum(sol * sol, axis=0))
    eta = (
        data.offsets[site]
        + data.covariates[site] @ params.B
        + zb
    )
    y = data.counts[site]
    log_cond = np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0), axis=1)
    out = log_prior + log_cond
    return float(out[0]) if single else out


def sample_pln(
    params: ModelParams,
    covariates: np.ndarray,
    offsets: np.ndarray = None,
    rng: np.random.Generator = None,
    species_names: list[str] = None,
    covariate_names: list[str] = None,
) -> tuple[Dataset, LatentMatrix]:
    """Draw counts and latents from the model, deterministically given ``rng``.

    Raises if any realized log-rate exceeds ``MAX_LOG_RATE`` (the Poisson
    sampler would overflow).
    """
    if rng is None:
        rng = np.random.default_rng()
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    n = covariates.shape[0]
    p = params.n_species
    if covariates.shape[1] != params.n_covariates:
        raise ValueError(
            f"covariates have {covariates.shape[1]} columns, params expect "
            f"{params.n_covariates}"
        )
    if offsets is None:
        offsets = np.zeros((n, p))
    offsets = np.asarray(offsets, dtype=float)
    if offsets.shape != (n, p):
        raise ValueError(f"offsets shape {offsets.shape}, expected {(n, p)}")
    chol = np.linalg.cholesky(params.Sigma)
    z = rng.standard_normal((n, p)) @ chol.T
    log_rate = offsets + covariates @ params.B + z
    if np.any(log_rate > MAX_LOG_RATE):
        raise FloatingPointError(
            "simulated log-rate exceeds overflow guard "
            f"({MAX_LOG_RATE}); check parameter scales"
        )
    counts = rng.poisson(np.exp(log_rate))
    data = Dataset(
        counts=counts,
        covariates=covariates,
        offsets=offsets,
        species_names=species_names,
        covariate_names=covariate_names,
    )
    return data, LatentMatrix(Z=z)
