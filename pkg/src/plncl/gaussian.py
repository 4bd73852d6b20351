"""Multivariate normal primitives and the two-component mixture proposal.

The importance sampler draws from a mixture of two Gaussians sharing a mean:
a "narrow" component matched to the estimated conditional covariance, and a
"wide" safety component scaled to the latent marginal covariance.  The wide
component is what guarantees finite weight variance; the PD conditions that
back this guarantee are exposed as predicates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

# Relative jitter ladder for repairing nearly-PD covariance estimates.
JITTER_LADDER = (1e-8, 1e-6, 1e-4)


def is_positive_definite(mat: np.ndarray) -> bool:
    """Cholesky-based PD check; a failed factorization means not PD."""
    try:
        np.linalg.cholesky(mat)
        return True
    except np.linalg.LinAlgError:
        return False


def make_spd(mat: np.ndarray) -> np.ndarray:
    """Return a positive definite repair of ``mat``.

    Symmetrizes, then adds the smallest jitter from ``JITTER_LADDER`` scaled
    by the mean diagonal that lets Cholesky succeed.  A zero or negative
    trace falls back to unit scale, so the zero matrix maps to
    ``1e-8 * identity``.  The input is returned unchanged when already PD.
    """
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    sym = 0.5 * (mat + mat.T)
    if is_positive_definite(sym):
        return sym
    k = sym.shape[0]
    trace = np.trace(sym)
    scale = trace / k if trace > 0 else 1.0
    eye = np.eye(k)
    for jitter in JITTER_LADDER:
        candidate = sym + jitter * scale * eye
        if is_positive_definite(candidate):
            return candidate
    # Severely indefinite estimate: keep the diagonal, floor it, drop the rest.
    diag = np.maximum(np.diag(sym), JITTER_LADDER[0] * scale)
    return np.diag(diag)


@dataclass(frozen=True)
class MvnParams:
    """Mean and SPD covariance with cached Cholesky factor and log-det."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    log_det: float = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean size {mean.size}")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "log_det", 2.0 * float(np.sum(np.log(np.diag(chol)))))

    @property
    def dim(self) -> int:
        return self.mean.size


def mvn_logpdf(p: MvnParams, x: np.ndarray) -> np.ndarray | float:
    """Exact Gaussian log density at ``x`` (a k-vector or an (N, k) batch)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != p.dim:
        raise ValueError(f"x has dimension {xb.shape[1]}, expected {p.dim}")
    diff = xb - p.mean
    sol = solve_triangular(p.chol, diff.T, lower=True)
    quad = np.sum(sol * sol, axis=0)
    out = -0.5 * (p.dim * np.log(2.0 * np.pi) + p.log_det + quad)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class MixtureProposal:
    """Two-component Gaussian mixture with a shared mean.

    ``alpha`` weights the narrow (conditional-matched) component; the
    remaining mass sits on the wide (marginal-scaled) safety component.
    ``alpha = 0`` degenerates to the wide component alone.
    """

    alpha: float
    narrow: MvnParams
    wide: MvnParams

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.narrow.dim != self.wide.dim:
            raise ValueError("mixture components have different dimensions")
        if not np.allclose(self.narrow.mean, self.wide.mean, rtol=0.0, atol=0.0):
            raise ValueError("mixture components must share the same mean")

    @property
    def dim(self) -> int:
        return self.wide.dim


def mixture_logpdf(q: MixtureProposal, x: np.ndarray) -> np.ndarray | float:
    """log q(x) via log-sum-exp of the two component log densities."""
    if q.alpha == 0.0:
        return mvn_logpdf(q.wide, x)
    l_narrow = np.atleast_1d(mvn_logpdf(q.narrow, x))
    l_wide = np.atleast_1d(mvn_logpdf(q.wide, x))
    stacked = np.stack([l_narrow, l_wide])
    out = logsumexp(stacked, axis=0, b=np.array([[q.alpha], [1.0 - q.alpha]]))
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def sample_mixture(
    q: MixtureProposal, n_draws: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``n_draws`` i.i.d. points from the mixture; (n_draws, k) array."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    pick_narrow = rng.random(n_draws) < q.alpha
    normals = rng.standard_normal((n_draws, q.dim))
    draws = np.empty((n_draws, q.dim))
    draws[pick_narrow] = q.narrow.mean + normals[pick_narrow] @ q.narrow.chol.T
    wide_mask = ~pick_narrow
    draws[wide_mask] = q.wide.mean + normals[wide_mask] @ q.wide.chol.T
    return draws


def _difference_is_pd(a_inv_weight: float, Sigma: np.ndarray, S: np.ndarray) -> bool:
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if Sigma.shape != S.shape:
        raise ValueError(f"matrix shapes differ: {Sigma.shape} vs {S.shape}")
    diff = a_inv_weight * np.linalg.inv(Sigma) - np.linalg.inv(S)
    return is_positive_definite(0.5 * (diff + diff.T))


def finite_variance_condition(Sigma: np.ndarray, S: np.ndarray) -> bool:
    """True iff ``2 Sigma^{-1} - S^{-1}`` is positive definite.

    Under this condition a Gaussian proposal with covariance ``S`` yields
    square-integrable unnormalized weights against the joint density whose
    latent prior has covariance ``Sigma``.
    """
    return _difference_is_pd(2.0, Sigma, S)


def bounded_weight_condition(Sigma: np.ndarray, S: np.ndarray) -> bool:
    """True iff ``Sigma^{-1} - S^{-1}`` is positive definite (bounded weights)."""
    return _difference_is_pd(1.0, Sigma, S)
