"""Full-likelihood EM with importance-sampled E-steps.

Each iteration draws, for every site, particles from a per-site mixture
proposal, forms self-normalized weights against the joint density, and turns
the weighted moments into closed-form (covariance) and Newton (regression)
M-step updates.  The proposal is refreshed from the estimated conditional
moments; the wide mixture component tracks the current covariance estimate,
which is what keeps the weights well behaved.

Beyond ten or so species the sampling space is too large for importance
sampling to stay efficient; the composite-likelihood variant exists for that
regime.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .gaussian import MixtureProposal, MvnParams, make_spd, mixture_logpdf, sample_mixture
from .importance import (
    DegenerateSampleError,
    SiteMoments,
    estimate_moments,
    quadrature_moments_and_evidence,
    weighted_sample,
)
from .initialization import InitState, init_vem_lite
from .model import Dataset, ModelParams, log_joint_site
from .newton import newton_poisson_species
from .params_vector import pack_params, site_score
from .streams import substream

# A sample whose effective particle count falls below this is treated as
# degenerate: the site keeps its previous moments for that iteration.
MIN_EFFECTIVE_PARTICLES = engine.MIN_EFFECTIVE_PARTICLES

FULL_LIKELIHOOD_SPECIES_WARN = 10


@dataclass(frozen=True)
class FitConfig:
    """Knobs of the sampling EM loops.

    ``particle_growth="linear"`` uses ``(h + 1) * n_particles_initial``
    particles at iteration ``h``; ``"constant"`` keeps the initial count.
    The loop stops once every parameter moved by less than ``stop_tol``
    (relative) over the last ``stop_lag`` iterations.
    """

    n_iter_max: int = 1000
    n_particles_initial: int = 200
    particle_growth: str = "linear"
    alpha: float = 0.9
    stop_lag: int = 50
    stop_tol: float = 1e-3
    master_seed: int = 0

    def __post_init__(self):
        if self.n_iter_max < 1:
            raise ValueError("n_iter_max must be >= 1")
        if self.n_particles_initial < 2:
            raise ValueError("n_particles_initial must be >= 2")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.stop_lag < 1:
            raise ValueError("stop_lag must be >= 1")
        if self.stop_tol <= 0:
            raise ValueError("stop_tol must be > 0")
        if self.master_seed < 0:
            raise ValueError("master_seed must be >= 0")
        if self.particle_growth not in ("linear", "constant"):
            raise ValueError("particle_growth must be 'linear' or 'constant'")

    def particles_at(self, iteration: int) -> int:
        if self.particle_growth == "linear":
            return (iteration + 1) * self.n_particles_initial
        return self.n_particles_initial

    def to_dict(self) -> dict:
        return {
            "n_iter_max": self.n_iter_max,
            "n_particles_initial": self.n_particles_initial,
            "particle_growth": self.particle_growth,
            "alpha": self.alpha,
            "stop_lag": self.stop_lag,
            "stop_tol": self.stop_tol,
            "master_seed": self.master_seed,
        }


@dataclass
class FitResult:
    """Estimates, asymptotic variance and diagnostics of one EM run.

    ``variance`` is the inverse information on the per-observation scale, so
    standard errors are ``sqrt(diag(variance) / n_sites)``.
    """

    params: ModelParams
    variance: np.ndarray
    std_errors: np.ndarray
    objective_trace: np.ndarray
    ess_trace: np.ndarray          # (iterations, 2): min and median per iteration
    iterations_run: int
    converged: bool
    config: FitConfig
    n_sites: int
    site_means: np.ndarray = field(repr=False, default=None)
    site_covs: np.ndarray = field(repr=False, default=None)
    variance_pseudo_inverse: bool = False
    degenerate_events: list = field(default_factory=list)
    mean_score: np.ndarray = field(repr=False, default=None)


def initial_site_moments(init: InitState) -> list[SiteMoments]:
    out = []
    for i in range(init.site_means.shape[0]):
        m = init.site_means[i]
        s = init.site_vars[i]
        out.append(
            SiteMoments(
                mean=m.copy(),
                second_moment=np.diag(s) + np.outer(m, m),
                exp_mean=np.exp(m + 0.5 * s),
            )
        )
    return out


def site_proposal(moments: SiteMoments, Sigma: np.ndarray, alpha: float) -> MixtureProposal:
    """Mixture proposal refreshed from a site's estimated conditional moments."""
    mean = moments.mean
    narrow = MvnParams(mean=mean, cov=make_spd(moments.cov))
    wide = MvnParams(mean=mean, cov=Sigma)
    return MixtureProposal(alpha=alpha, narrow=narrow, wide=wide)


def e_step_site(
    params: ModelParams,
    data: Dataset,
    site: int,
    proposal: MixtureProposal,
    n_particles: int,
    rng: np.random.Generator,
) -> tuple[SiteMoments | None, float, float]:
    """One importance-sampled E-step.

    Returns ``(moments, ess, log_evidence)``; ``moments`` is None when the
    sample degenerated (all-zero weights or fewer than two effective
    particles), in which case the caller keeps its previous moments.
    """
    draws = sample_mixture(proposal, n_particles, rng)
    log_target = log_joint_site(params, data, site, draws)
    log_prop = mixture_logpdf(proposal, draws)
    try:
        sample = weighted_sample(draws, log_target, log_prop)
    except DegenerateSampleError:
        return None, 0.0, float("-inf")
    if sample.ess * n_particles < MIN_EFFECTIVE_PARTICLES:
        return None, sample.ess, sample.log_evidence
    return estimate_moments(sample), sample.ess, sample.log_evidence


def _e_step_quadrature(params, data, site) -> tuple[SiteMoments, float, float]:
    moments, log_evidence = quadrature_moments_and_evidence(
        params, data.counts[site], data.covariates[site], data.offsets[site]
    )
    return moments, 1.0, log_evidence


def m_step_sigma(site_moments: list[SiteMoments]) -> np.ndarray:
    """Closed-form covariance update: mean conditional second moment."""
    if not site_moments:
        raise ValueError("need at least one site")
    total = sum(m.second_moment for m in site_moments)
    return make_spd(total / len(site_moments))


def m_step_beta(
    j: int,
    data: Dataset,
    exp_means: np.ndarray,
    beta_init: np.ndarray,
) -> np.ndarray:
    """Exact Newton maximization of the per-species regression objective."""
    return newton_poisson_species(
        data.covariates,
        data.counts[:, j].astype(float),
        data.offsets[:, j],
        np.asarray(exp_means, dtype=float),
        beta_init,
        species=data.species_names[j],
    )


def _state_from_init(init: InitState):
    means = init.site_means.copy()
    covs = np.stack([np.diag(v) for v in init.site_vars])
    seconds = covs + np.einsum("ni,nj->nij", means, means)
    exp_means = np.exp(means + 0.5 * init.site_vars)
    return engine.BlockSweepResult(
        means=means,
        seconds=seconds,
        exp_means=exp_means,
        ess=np.zeros(means.shape[0]),
        log_evidence=np.full(means.shape[0], -np.inf),
        degenerate=np.zeros(means.shape[0], dtype=bool),
    )


def _stop_check(history, iteration, config) -> bool:
    if iteration < config.stop_lag:
        return False
    current = history[iteration]
    past = history[iteration - config.stop_lag]
    delta = np.max(np.abs(current - past) / (1.0 + np.abs(past)))
    return delta < config.stop_tol


def _invert_information(info: np.ndarray) -> tuple[np.ndarray, bool]:
    info = 0.5 * (info + info.T)
    try:
        variance = np.linalg.inv(info)
        if not np.all(np.isfinite(variance)):
            raise np.linalg.LinAlgError
        return 0.5 * (variance + variance.T), False
    except np.linalg.LinAlgError:
        warnings.warn("information matrix is singular; using pseudo-inverse", stacklevel=3)
        variance = np.linalg.pinv(info)
        return 0.5 * (variance + variance.T), True


def fit_full(
    data: Dataset,
    config: FitConfig = None,
    init: InitState = None,
    n_jobs: int = 1,
    e_step: str = "is",
    variance_particles: int = None,
) -> FitResult:
    """Run the importance-sampling EM loop to the stopping rule.

    ``e_step="quadrature"`` replaces the sampler with exact tensor-grid
    moments (only valid up to two species; used to isolate EM behaviour from
    Monte Carlo noise).  Deterministic given ``(data, config)``.
    """
    config = config or FitConfig()
    if e_step not in ("is", "quadrature"):
        raise ValueError("e_step must be 'is' or 'quadrature'")
    if e_step == "quadrature" and data.n_species > 2:
        raise ValueError("quadrature E-steps support at most 2 species")
    if data.n_species > FULL_LIKELIHOOD_SPECIES_WARN:
        warnings.warn(
            f"full-likelihood importance sampling degrades beyond "
            f"{FULL_LIKELIHOOD_SPECIES_WARN} species (p={data.n_species}); "
            "consider the composite fit",
            stacklevel=2,
        )
    if init is None:
        init = init_vem_lite(data)
    n, p = data.counts.shape
    B = init.params0.B.copy()
    Sigma = init.params0.Sigma.copy()
    state = _state_from_init(init)
    state_covs = np.stack([np.diag(v) for v in init.site_vars])
    lgamma_rows = engine.poisson_lgamma_rows(data.counts)
    objective_trace = []
    ess_trace = []
    degenerate_events = []
    history = [pack_params(ModelParams(B=B, Sigma=Sigma))]
    converged = False
    iterations_run = 0

    for h in range(config.n_iter_max):
        params = ModelParams(B=B, Sigma=Sigma)
        n_particles = config.particles_at(h)

        if e_step == "quadrature":
            results = [_e_step_quadrature(params, data, i) for i in range(n)]
            state = engine.BlockSweepResult(
                means=np.stack([r[0].mean for r in results]),
                seconds=np.stack([r[0].second_moment for r in results]),
                exp_means=np.stack([r[0].exp_mean for r in results]),
                ess=np.array([r[1] for r in results]),
                log_evidence=np.array([r[2] for r in results]),
                degenerate=np.zeros(n, dtype=bool),
            )
        else:
            eta0 = engine.linear_predictor(data.offsets, data.covariates, B)
            state = engine.sweep_block(
                data.counts, eta0, lgamma_rows, Sigma,
                state.means, state_covs,
                config.alpha, n_particles, config.master_seed, 0, h,
                prev=state, n_jobs=n_jobs,
            )
        degenerate_events.extend((h, int(i)) for i in np.flatnonzero(state.degenerate))
        ess_trace.append((float(state.ess.min()), float(np.median(state.ess))))
        objective_trace.append(float(state.log_evidence.sum()))
        state_covs = state.seconds - np.einsum("ni,nj->nij", state.means, state.means)

        Sigma = make_spd(state.seconds.mean(axis=0))
        for j in range(p):
            B[:, j] = m_step_beta(j, data, state.exp_means[:, j], B[:, j])

        history.append(pack_params(ModelParams(B=B, Sigma=Sigma)))
        iterations_run = h + 1
        if _stop_check(history, iterations_run, config):
            converged = True
            break

    params = ModelParams(B=B, Sigma=Sigma)
    site_means = state.means.copy()
    site_covs = np.stack([make_spd(c) for c in state_covs])

    if e_step == "quadrature":
        score_moments = [_e_step_quadrature(params, data, i)[0] for i in range(n)]
        scores = np.stack(
            [site_score(params, data, i, score_moments[i]) for i in range(n)]
        )
        info = scores.T @ scores / n
        mean_score = scores.mean(axis=0)
    else:
        info, mean_score = fisher_estimate(
            data,
            params,
            site_means,
            site_covs,
            alpha=config.alpha,
            n_particles=variance_particles or config.particles_at(iterations_run),
            master_seed=config.master_seed,
            pass_index=iterations_run,
            n_jobs=n_jobs,
        )

    variance, pseudo = _invert_information(info)
    std_errors = np.sqrt(np.maximum(np.diag(variance), 0.0) / n)

    return FitResult(
        params=params,
        variance=variance,
        std_errors=std_errors,
        objective_trace=np.asarray(objective_trace),
        ess_trace=np.asarray(ess_trace),
        iterations_run=iterations_run,
        converged=converged,
        config=config,
        n_sites=n,
        site_means=site_means,
        site_covs=site_covs,
        variance_pseudo_inverse=pseudo,
        degenerate_events=degenerate_events,
        mean_score=mean_score,
    )


def fisher_estimate(
    data: Dataset,
    params: ModelParams,
    site_means: np.ndarray,
    site_covs: np.ndarray,
    alpha: float,
    n_particles: int,
    master_seed: int,
    pass_index: int,
    n_jobs: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Score-based plug-in estimate of the observed information.

    One fresh importance-sampling pass with the final proposals estimates the
    conditional expectation of the complete-data score per site (the marginal
    score, by Louis' identity); the information estimate is the average outer
    product.  Returns ``(information, mean_score)``; the mean score should be
    near zero at the fitted parameters.  Site ``i`` draws from the stream
    keyed ``(master_seed, i, 0, pass_index)``.
    """
    n = data.n_sites
    eta0 = engine.linear_predictor(data.offsets, data.covariates, params.B)
    lgamma_rows = engine.poisson_lgamma_rows(data.counts)
    sweep = engine.sweep_block(
        data.counts, eta0, lgamma_rows, params.Sigma,
        np.asarray(site_means, dtype=float), np.asarray(site_covs, dtype=float),
        alpha, n_particles, master_seed, 0, pass_index,
        prev=None, n_jobs=n_jobs,
    )
    scores = engine.batch_scores(
        data.counts.astype(float), data.covariates, eta0, sweep, params.Sigma
    )
    return scores.T @ scores / n, scores.mean(axis=0)
