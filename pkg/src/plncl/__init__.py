"""Importance-sampling EM and composite-likelihood inference for the
multivariate Poisson log-normal model."""

from .blocks import (
    BlockDesign,
    build_block_design,
    count_bounds,
    embed_matrix,
    embed_param_vector,
    extract_matrix,
    extract_param_vector,
    full_design,
    load_blocks,
    save_blocks,
    singleton_design,
)
from .composite_em import (
    CompositeFitResult,
    GodambeMatrices,
    fit_composite,
    godambe_estimate,
    m_step_beta_composite,
    m_step_sigma_composite,
)
from .estimators import PoissonLogNormalRegression
from .full_em import (
    FitConfig,
    FitResult,
    e_step_site,
    fisher_estimate,
    fit_full,
    m_step_beta,
    m_step_sigma,
)
from .gaussian import (
    MixtureProposal,
    MvnParams,
    bounded_weight_condition,
    finite_variance_condition,
    mixture_logpdf,
    mvn_logpdf,
    sample_mixture,
)
from .importance import (
    DegenerateSampleError,
    SiteMoments,
    WeightedSample,
    compute_weights,
    estimate_moments,
    quadrature_log_evidence,
    quadrature_oracle,
)
from .initialization import InitState, init_moment, init_vem_lite
from .model import Dataset, LatentMatrix, ModelParams, complete_log_lik, log_joint_site, sample_pln
from .newton import NonConvergenceError
from .simstudy import StudyConfig, StudyReport, ks_test, random_truth, run_study
from .stats import (
    ModelScore,
    TestReport,
    all_subset_masks,
    cl_bic,
    select_model,
    standardized_estimate,
    wald_report,
)

__version__ = "0.1.0"

__all__ = [
    "BlockDesign",
    "CompositeFitResult",
    "Dataset",
    "DegenerateSampleError",
    "FitConfig",
    "FitResult",
    "GodambeMatrices",
    "InitState",
    "LatentMatrix",
    "MixtureProposal",
    "ModelParams",
    "ModelScore",
    "MvnParams",
    "NonConvergenceError",
    "PoissonLogNormalRegression",
    "SiteMoments",
    "StudyConfig",
    "StudyReport",
    "TestReport",
    "WeightedSample",
    "all_subset_masks",
    "bounded_weight_condition",
    "build_block_design",
    "cl_bic",
    "complete_log_lik",
    "compute_weights",
    "count_bounds",
    "e_step_site",
    "embed_matrix",
    "embed_param_vector",
    "estimate_moments",
    "extract_matrix",
    "extract_param_vector",
    "finite_variance_condition",
    "fisher_estimate",
    "fit_composite",
    "fit_full",
    "full_design",
    "godambe_estimate",
    "init_moment",
    "init_vem_lite",
    "ks_test",
    "load_blocks",
    "log_joint_site",
    "m_step_beta",
    "m_step_beta_composite",
    "m_step_sigma",
    "m_step_sigma_composite",
    "mixture_logpdf",
    "mvn_logpdf",
    "quadrature_log_evidence",
    "quadrature_oracle",
    "random_truth",
    "run_study",
    "sample_mixture",
    "sample_pln",
    "save_blocks",
    "select_model",
    "singleton_design",
    "standardized_estimate",
    "wald_report",
    "__version__",
]
