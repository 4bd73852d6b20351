"""Composite-likelihood EM over species blocks.

The latent space is sampled block by block: for each block only the
corresponding sub-model (the block's regression columns and covariance
submatrix) is involved, so importance sampling happens in dimension k rather
than p.  Regression columns still have a closed Newton update (block
estimates of E[exp Z] are pooled across the blocks containing the species);
the covariance has no closed-form update and is raised by guarded gradient
ascent on its part of the objective.

The asymptotic variance comes from the Godambe sandwich built out of
per-site, per-block score estimates embedded into the full parameter vector.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .blocks import BlockDesign, block_param_positions
from .full_em import (
    FitConfig,
    FitResult,
    _invert_information,
    _state_from_init,
    _stop_check,
    e_step_site,
)
from .importance import SiteMoments, quadrature_moments_and_evidence
from .initialization import InitState, init_vem_lite
from .model import Dataset, ModelParams
from .newton import newton_poisson_species
from .params_vector import n_params, pack_params
from .streams import substream

SIGMA_MAX_INNER_STEPS = 200
SIGMA_GRAD_TOL = 1e-6  # times n_sites, on the free-coordinate infinity norm


@dataclass
class GodambeMatrices:
    """Sandwich information pieces: ``G = H J^{-1} H``, variance ``G^{-1}``."""

    H: np.ndarray
    J: np.ndarray
    G: np.ndarray
    variance: np.ndarray
    dim_hg: float   # tr(H G^{-1})
    dim_jh: float   # tr(J H^{-1})
    pseudo_inverse: bool


@dataclass
class CompositeFitResult(FitResult):
    design: BlockDesign = None
    godambe: GodambeMatrices = None
    cl_value: float = None
    block_scores: np.ndarray = field(repr=False, default=None)  # (n, C, block dim)
    sigma_step_converged: bool = True


def restrict_init(init: InitState, block) -> InitState:
    idx = np.asarray(block, dtype=int)
    return InitState(
        params0=init.params0.restrict(idx),
        site_means=init.site_means[:, idx],
        site_vars=init.site_vars[:, idx],
    )


def composite_e_step(
    params: ModelParams,
    data: Dataset,
    design: BlockDesign,
    b: int,
    site: int,
    proposal,
    n_particles: int,
    rng: np.random.Generator,
    block_params: ModelParams = None,
    block_data: Dataset = None,
) -> tuple[SiteMoments | None, float, float]:
    """Importance-sampled E-step on one block's latent coordinates.

    The target is the joint density of the block sub-model; moments come back
    in block-local order.  Same degenerate-sample policy as the full E-step.
    """
    blk = design.block_array(b)
    if block_params is None:
        block_params = params.restrict(blk)
    if block_data is None:
        block_data = data.restrict_species(blk)
    return e_step_site(block_params, block_data, site, proposal, n_particles, rng)


def m_step_beta_composite(
    j: int,
    data: Dataset,
    design: BlockDesign,
    block_exp_means: list,
    beta_init: np.ndarray,
) -> np.ndarray:
    """Newton update of one species' coefficients from pooled block moments.

    Differentiating the composite objective puts the total block weight of
    the species on both the count term and the exponential term, so the
    update solves the same concave problem as the full fit with the
    weight-summed conditional expectation of exp(Z).
    """
    members = design.membership[j]
    if not members:
        raise ValueError(f"species {j} belongs to no block")
    total_weight = 0.0
    pooled = np.zeros(data.n_sites)
    for b in members:
        local = design.blocks[b].index(j)
        lam = design.weights[b]
        pooled += lam * block_exp_means[b][:, local]
        total_weight += lam
    y = data.counts[:, j].astype(float)
    return newton_poisson_species(
        data.covariates,
        total_weight * y,
        data.offsets[:, j],
        pooled,
        beta_init,
        species=data.species_names[j],
        tol_scale=total_weight * float(np.sum(y)),
    )


def _sigma_objective(Sigma, design, block_second_sums, n_sites) -> float:
    """Covariance part of the composite objective (drops constants)."""
    total = 0.0
    for b, blk in enumerate(design.blocks):
        idx = np.asarray(blk)
        sub = Sigma[np.ix_(idx, idx)]
        chol = np.linalg.cholesky(sub)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        inv_sub = np.linalg.inv(sub)
        total += design.weights[b] * (
            -0.5 * n_sites * logdet - 0.5 * np.sum(inv_sub * block_second_sums[b])
        )
    return float(total)


def sigma_gradient_matrix(Sigma, design, block_second_sums, n_sites) -> np.ndarray:
    """Symmetric matrix M with free-coordinate gradient (2 - delta)/2 * M_jk."""
    p = Sigma.shape[0]
    M = np.zeros((p, p))
    for b, blk in enumerate(design.blocks):
        idx = np.asarray(blk)
        sub = Sigma[np.ix_(idx, idx)]
        omega = np.linalg.inv(sub)
        inner = omega @ block_second_sums[b] @ omega - n_sites * omega
        M[np.ix_(idx, idx)] += design.weights[b] * inner
    return 0.5 * (M + M.T)


def _free_grad_norm(M: np.ndarray) -> float:
    off = np.abs(M - np.diag(np.diag(M))).max() if M.shape[0] > 1 else 0.0
    return max(off, np.abs(np.diag(M)).max() / 2.0)


def m_step_sigma_composite(
    design: BlockDesign,
    block_second_sums: list,
    sigma_init: np.ndarray,
    n_sites: int,
    max_inner: int = SIGMA_MAX_INNER_STEPS,
) -> tuple[np.ndarray, bool]:
    """Gradient ascent on the covariance part of the composite objective.

    Free coordinates are the lower triangle with symmetric completion.  Each
    step starts at ``1/(n C)`` and halves until the candidate is PD and the
    objective does not decrease.  Returns ``(Sigma, converged)``; a False
    flag means the gradient tolerance was not met within ``max_inner`` steps
    (the best iterate is still returned).
    """
    Sigma = np.array(sigma_init, dtype=float)
    step0 = 1.0 / (n_sites * design.n_blocks)
    value = _sigma_objective(Sigma, design, block_second_sums, n_sites)
    for _ in range(max_inner):
        M = sigma_gradient_matrix(Sigma, design, block_second_sums, n_sites)
        if _free_grad_norm(M) < SIGMA_GRAD_TOL * n_sites:
            return Sigma, True
        direction = M - 0.5 * np.diag(np.diag(M))
        # directional derivative per unit step, in free coordinates
        gain_rate = float(
            np.sum(np.tril(M, -1) ** 2) + 0.25 * np.sum(np.diag(M) ** 2)
        )
        resolution = 1e-13 * (1.0 + abs(value))
        step = step0
        stalled = False
        for _ in range(60):
            if step * gain_rate < resolution:
                # Remaining improvement is below objective evaluation
                # precision: converged for all practical purposes.
                return Sigma, True
            candidate = Sigma + step * direction
            try:
                np.linalg.cholesky(candidate)
            except np.linalg.LinAlgError:
                step *= 0.5
                continue
            new_value = _sigma_objective(candidate, design, block_second_sums, n_sites)
            if new_value >= value:
                break
            step *= 0.5
        else:
            stalled = True
        if stalled:
            # No admissible ascent step: stop at the current iterate.
            warnings.warn("covariance ascent stalled before tolerance", stacklevel=2)
            return Sigma, False
        Sigma, value = candidate, new_value
    M = sigma_gradient_matrix(Sigma, design, block_second_sums, n_sites)
    if _free_grad_norm(M) < SIGMA_GRAD_TOL * n_sites:
        return Sigma, True
    warnings.warn(
        f"covariance ascent did not reach tolerance in {max_inner} steps",
        stacklevel=2,
    )
    return Sigma, False


def godambe_estimate(
    block_scores: np.ndarray, design: BlockDesign, d: int
) -> GodambeMatrices:
    """Sandwich matrices from per-(site, block) embedded score estimates.

    ``block_scores`` has shape (n, C, d k + k(k+1)/2), block-local packed
    order.  ``J`` is the average outer product of the per-site weighted score
    sums, ``H`` the weighted average of per-block outer products; the
    variance is ``G^{-1}`` with ``G = H J^{-1} H`` (pseudo-inverse fallback is
    flagged).
    """
    n, C, _ = block_scores.shape
    p = design.n_species
    D = n_params(d, p)
    positions = [block_param_positions(blk, p, d) for blk in design.blocks]
    full_scores = np.zeros((n, D))
    H = np.zeros((D, D))
    for b in range(C):
        lam = design.weights[b]
        pos = positions[b]
        sb = block_scores[:, b, :]
        full_scores[:, pos] += lam * sb
        H[np.ix_(pos, pos)] += lam * (sb.T @ sb) / n
    J = full_scores.T @ full_scores / n
    H = 0.5 * (H + H.T)
    J = 0.5 * (J + J.T)
    pseudo = False
    try:
        JinvH = np.linalg.solve(J, H)
        G = H @ JinvH
    except np.linalg.LinAlgError:
        pseudo = True
        G = H @ np.linalg.pinv(J) @ H
    G = 0.5 * (G + G.T)
    variance, var_pseudo = _invert_information(G)
    pseudo = pseudo or var_pseudo
    dim_hg = float(np.trace(H @ variance))
    try:
        dim_jh = float(np.trace(np.linalg.solve(H, J)))
    except np.linalg.LinAlgError:
        pseudo = True
        dim_jh = float(np.trace(np.linalg.pinv(H) @ J))
    return GodambeMatrices(
        H=H, J=J, G=G, variance=variance,
        dim_hg=dim_hg, dim_jh=dim_jh, pseudo_inverse=pseudo,
    )


def fit_composite(
    data: Dataset,
    config: FitConfig = None,
    design: BlockDesign = None,
    init: InitState = None,
    n_jobs: int = 1,
    e_step: str = "is",
) -> CompositeFitResult:
    """Run the composite EM loop on a frozen block design.

    ``design`` defaults to pairwise blocks.  ``e_step="quadrature"`` runs
    exact E-steps (blocks of at most two species) and reports the exact
    composite log-likelihood in the objective trace.  Deterministic given
    ``(data, config, design)``.
    """
    from .blocks import build_block_design

    config = config or FitConfig()
    if design is None:
        design = build_block_design(
            data.n_species, 2, rng=substream(config.master_seed, 2**20)
        )
    if design.n_species != data.n_species:
        raise ValueError(
            f"design covers {design.n_species} species, data has {data.n_species}"
        )
    if e_step not in ("is", "quadrature"):
        raise ValueError("e_step must be 'is' or 'quadrature'")
    if e_step == "quadrature" and design.block_size > 2:
        raise ValueError("quadrature E-steps support blocks of at most 2 species")
    if init is None:
        init = init_vem_lite(data)

    n, p = data.counts.shape
    d = data.n_covariates
    C = design.n_blocks
    k = design.block_size
    blocks = [design.block_array(b) for b in range(C)]
    states = [_state_from_init(restrict_init(init, blk)) for blk in blocks]
    state_covs = [
        np.stack([np.diag(v) for v in init.site_vars[:, blk]]) for blk in blocks
    ]
    lgamma_rows = [
        engine.poisson_lgamma_rows(data.counts[:, blk]) for blk in blocks
    ]

    B = init.params0.B.copy()
    Sigma = init.params0.Sigma.copy()
    objective_trace = []
    ess_trace = []
    degenerate_events = []
    history = [pack_params(ModelParams(B=B, Sigma=Sigma))]
    converged = False
    sigma_ok = True  # convergence flag of the most recent covariance step
    iterations_run = 0

    def quadrature_sweep(block_params, blk, b):
        outs = []
        bd = data.restrict_species(blk)
        for i in range(n):
            outs.append(quadrature_moments_and_evidence(
                block_params, bd.counts[i], bd.covariates[i], bd.offsets[i]
            ))
        return engine.BlockSweepResult(
            means=np.stack([o[0].mean for o in outs]),
            seconds=np.stack([o[0].second_moment for o in outs]),
            exp_means=np.stack([o[0].exp_mean for o in outs]),
            ess=np.ones(n),
            log_evidence=np.array([o[1] for o in outs]),
            degenerate=np.zeros(n, dtype=bool),
        )

    def sweep_all(h, n_particles):
        params = ModelParams(B=B, Sigma=Sigma)
        eta0_full = engine.linear_predictor(data.offsets, data.covariates, B)
        new_states = []
        for b, blk in enumerate(blocks):
            Sigma_b = Sigma[np.ix_(blk, blk)]
            if e_step == "quadrature":
                sweep = quadrature_sweep(params.restrict(blk), blk, b)
            else:
                sweep = engine.sweep_block(
                    data.counts[:, blk], eta0_full[:, blk], lgamma_rows[b],
                    Sigma_b, states[b].means, state_covs[b],
                    config.alpha, n_particles, config.master_seed, b, h,
                    prev=states[b], n_jobs=n_jobs,
                )
            degenerate_events.extend(
                (h, int(i), b) for i in np.flatnonzero(sweep.degenerate)
            )
            new_states.append(sweep)
        return new_states

    for h in range(config.n_iter_max):
        n_particles = config.particles_at(h)
        states = sweep_all(h, n_particles)
        all_ess = np.concatenate([s.ess for s in states])
        ess_trace.append((float(all_ess.min()), float(np.median(all_ess))))
        objective_trace.append(
            float(sum(design.weights[b] * states[b].log_evidence.sum() for b in range(C)))
        )

        block_exp_means = [s.exp_means for s in states]
        for j in range(p):
            B[:, j] = m_step_beta_composite(j, data, design, block_exp_means, B[:, j])
        block_second_sums = [s.seconds.sum(axis=0) for s in states]
        # partial maximization early on is fine (generalized EM); only the
        # final M-step's convergence matters for the fitted point
        Sigma, sigma_ok = m_step_sigma_composite(design, block_second_sums, Sigma, n)
        state_covs = [
            s.seconds - np.einsum("ni,nj->nij", s.means, s.means) for s in states
        ]

        history.append(pack_params(ModelParams(B=B, Sigma=Sigma)))
        iterations_run = h + 1
        if _stop_check(history, iterations_run, config):
            converged = True
            break

    params = ModelParams(B=B, Sigma=Sigma)
    # Score pass at the fitted parameters with the final proposals; also
    # yields the composite log-likelihood estimate (mean unnormalized weight).
    final_states = sweep_all(iterations_run, config.particles_at(iterations_run))
    eta0_full = engine.linear_predictor(data.offsets, data.covariates, B)
    local_dim = d * k + k * (k + 1) // 2
    block_scores = np.zeros((n, C, local_dim))
    for b, blk in enumerate(blocks):
        block_scores[:, b, :] = engine.batch_scores(
            data.counts[:, blk].astype(float), data.covariates,
            eta0_full[:, blk], final_states[b], Sigma[np.ix_(blk, blk)],
        )
    cl_value = float(
        sum(design.weights[b] * final_states[b].log_evidence.sum() for b in range(C))
    )
    godambe = godambe_estimate(block_scores, design, d)
    std_errors = np.sqrt(np.maximum(np.diag(godambe.variance), 0.0) / n)

    return CompositeFitResult(
        params=params,
        variance=godambe.variance,
        std_errors=std_errors,
        objective_trace=np.asarray(objective_trace),
        ess_trace=np.asarray(ess_trace),
        iterations_run=iterations_run,
        converged=converged,
        config=config,
        n_sites=n,
        variance_pseudo_inverse=godambe.pseudo_inverse,
        degenerate_events=degenerate_events,
        design=design,
        godambe=godambe,
        cl_value=cl_value,
        block_scores=block_scores,
        sigma_step_converged=sigma_ok,
    )
