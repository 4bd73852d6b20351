"""Replicated simulation studies: normality of standardized estimates,
confidence-interval coverage, and sampling diagnostics.

Each replicate simulates a dataset from fixed true parameters, fits it, and
standardizes every regression estimate by its reported standard error.  If
the inference machinery is calibrated, those standardized values are draws
from a standard normal across replicates; a one-sample Kolmogorov-Smirnov
test quantifies the fit per coefficient.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .blocks import build_block_design
from .composite_em import fit_composite
from .full_em import FitConfig, fit_full
from .model import ModelParams, sample_pln
from .stats import normal_cdf, normal_quantile, standardized_estimate
from .streams import substream

KS_SERIES_TERMS = 100


def ks_test(sample: np.ndarray) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov test against the standard normal.

    The p-value uses the asymptotic Kolmogorov series truncated at
    ``KS_SERIES_TERMS`` terms (values of sqrt(M) D below 0.02 round to
    p = 1, where the series is not usable).
    """
    x = np.sort(np.asarray(sample, dtype=float))
    if x.size < 2:
        raise ValueError("need at least two observations")
    if not np.all(np.isfinite(x)):
        raise ValueError("sample contains non-finite values")
    m = x.size
    cdf = normal_cdf(x)
    upper = np.max(cdf - np.arange(m) / m)
    lower = np.max(np.arange(1, m + 1) / m - cdf)
    statistic = float(max(upper, lower))
    lam = math.sqrt(m) * statistic
    if lam < 0.02:
        return statistic, 1.0
    terms = np.arange(1, KS_SERIES_TERMS + 1)
    series = 2.0 * np.sum((-1.0) ** (terms - 1) * np.exp(-2.0 * terms**2 * lam**2))
    return statistic, float(min(max(series, 0.0), 1.0))


def random_truth(p: int, d: int, rng: np.random.Generator) -> ModelParams:
    """Documented truth generator for studies.

    Regression entries are i.i.d. uniform(-1, 1) scaled by 0.5; the latent
    covariance is a random correlation matrix (normalized Wishart with p + 2
    degrees of freedom, rescaled to unit diagonal).
    """
    B = 0.5 * rng.uniform(-1.0, 1.0, size=(d, p))
    G = rng.standard_normal((p + 2, p))
    W = G.T @ G
    scale = 1.0 / np.sqrt(np.diag(W))
    Sigma = W * np.outer(scale, scale)
    return ModelParams(B=B, Sigma=0.5 * (Sigma + Sigma.T))


def study_covariates(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Fixed design: intercept plus standardized continuous covariates."""
    X = np.ones((n, d))
    if d > 1:
        X[:, 1:] = rng.standard_normal((n, d - 1))
    return X


@dataclass(frozen=True)
class StudyConfig:
    n_sites: int
    n_species: int
    n_covariates: int
    n_replicates: int
    truth: ModelParams
    fit_config: FitConfig
    block_sizes: tuple = ()      # composite fits to run; () means none
    run_full: bool = False
    master_seed: int = 0
    ci_level: float = 0.95

    def __post_init__(self):
        if self.n_replicates < 2:
            raise ValueError("need at least two replicates")
        if self.truth.B.shape != (self.n_covariates, self.n_species):
            raise ValueError("truth dimensions do not match the study config")
        if not self.block_sizes and not self.run_full:
            raise ValueError("nothing to run: no block sizes and run_full=False")


@dataclass
class StudyReport:
    """Aggregated study outputs, keyed by method name ('full' or 'cl<k>')."""

    methods: list
    coef_names: list
    estimates: dict            # method -> (M, d*p) array of beta estimates
    std_errors: dict           # method -> (M, d*p)
    standardized: dict         # method -> (M, d*p)
    ks_statistics: dict        # method -> (d*p,)
    ks_p_values: dict          # method -> (d*p,)
    coverage: dict             # method -> (d*p,) CI coverage rates
    ess_final_median: dict     # method -> (M,) final-iteration median ESS
    failures: dict             # method -> list of (replicate, message)
    wall_clock: dict           # method -> (M,) seconds per replicate
    n_replicates: int
    ci_level: float

    def to_dict(self) -> dict:
        def arr(d):
            return {k: np.asarray(v).tolist() for k, v in d.items()}
        return {
            "methods": self.methods,
            "coef_names": self.coef_names,
            "n_replicates": self.n_replicates,
            "ci_level": self.ci_level,
            "ks_statistics": arr(self.ks_statistics),
            "ks_p_values": arr(self.ks_p_values),
            "coverage": arr(self.coverage),
            "ess_final_median": arr(self.ess_final_median),
            "estimates": arr(self.estimates),
            "std_errors": arr(self.std_errors),
            "failures": {k: list(v) for k, v in self.failures.items()},
            "wall_clock": arr(self.wall_clock),
        }


def _one_replicate(cfg: StudyConfig, X, designs, replicate: int) -> dict:
    rng = substream(cfg.master_seed, replicate, 1)
    data, _ = sample_pln(cfg.truth, X, rng=rng)
    fit_args = cfg.fit_config.to_dict()
    fit_args["master_seed"] = cfg.fit_config.master_seed + 7919 * replicate + 1
    fit_cfg = FitConfig(**fit_args)
    out = {}
    methods = (["full"] if cfg.run_full else []) + [f"cl{k}" for k in cfg.block_sizes]
    for method in methods:
        start = time.perf_counter()
        try:
            if method == "full":
                fit = fit_full(data, fit_cfg)
            else:
                fit = fit_composite(data, fit_cfg, design=designs[method])
            d, p = cfg.truth.B.shape
            est = fit.params.B.T.ravel()
            se = fit.std_errors[: d * p]
            out[method] = {
                "estimates": est,
                "std_errors": se,
                "ess_median": float(fit.ess_trace[-1, 1]),
                "seconds": time.perf_counter() - start,
            }
        except Exception as exc:  # noqa: BLE001 - replicate failures are recorded
            out[method] = {"error": str(exc), "seconds": time.perf_counter() - start}
    return out


def run_study(cfg: StudyConfig, n_jobs: int = 1) -> StudyReport:
    """Run the replicated study; deterministic given the master seed.

    Replicates may run in parallel (each has its own derived seed and the
    aggregation is in replicate order).  A method must succeed on at least
    80% of replicates for its aggregates to be reported; failures are listed
    either way.
    """
    d, p = cfg.truth.B.shape
    X = study_covariates(cfg.n_sites, d, substream(cfg.master_seed, 0))
    designs = {
        f"cl{k}": build_block_design(p, k, rng=substream(cfg.master_seed, 0, k))
        for k in cfg.block_sizes
    }
    methods = (["full"] if cfg.run_full else []) + [f"cl{k}" for k in cfg.block_sizes]

    if n_jobs == 1:
        rows = [_one_replicate(cfg, X, designs, m) for m in range(cfg.n_replicates)]
    else:
        rows = Parallel(n_jobs=n_jobs)(
            delayed(_one_replicate)(cfg, X, designs, m)
            for m in range(cfg.n_replicates)
        )

    truth_vec = cfg.truth.B.T.ravel()
    coef_names = [
        f"beta[x{l + 1},sp{j + 1}]" for j in range(p) for l in range(d)
    ]
    crit = normal_quantile(0.5 + cfg.ci_level / 2.0)
    estimates, std_errors, standardized = {}, {}, {}
    ks_stats, ks_pvals, coverage = {}, {}, {}
    ess_median, failures, wall = {}, {}, {}
    for method in methods:
        ok = [m for m in range(cfg.n_replicates) if "error" not in rows[m][method]]
        failures[method] = [
            (m, rows[m][method]["error"])
            for m in range(cfg.n_replicates)
            if "error" in rows[m][method]
        ]
        wall[method] = np.array(
            [rows[m][method]["seconds"] for m in range(cfg.n_replicates)]
        )
        if len(ok) < 0.8 * cfg.n_replicates:
            estimates[method] = np.empty((0, d * p))
            std_errors[method] = np.empty((0, d * p))
            standardized[method] = np.empty((0, d * p))
            ks_stats[method] = np.full(d * p, np.nan)
            ks_pvals[method] = np.full(d * p, np.nan)
            coverage[method] = np.full(d * p, np.nan)
            ess_median[method] = np.full(cfg.n_replicates, np.nan)
            continue
        est = np.stack([rows[m][method]["estimates"] for m in ok])
        se = np.stack([rows[m][method]["std_errors"] for m in ok])
        std = np.empty_like(est)
        for c in range(d * p):
            for r in range(est.shape[0]):
                std[r, c] = standardized_estimate(est[r, c], truth_vec[c], se[r, c] ** 2)
        stats = np.array([ks_test(std[:, c]) for c in range(d * p)])
        covered = (np.abs(std) <= crit).mean(axis=0)
        estimates[method] = est
        std_errors[method] = se
        standardized[method] = std
        ks_stats[method] = stats[:, 0]
        ks_pvals[method] = stats[:, 1]
        coverage[method] = covered
        ess_median[method] = np.array(
            [
                rows[m][method].get("ess_median", np.nan)
                for m in range(cfg.n_replicates)
            ]
        )
    return StudyReport(
        methods=methods,
        coef_names=coef_names,
        estimates=estimates,
        std_errors=std_errors,
        standardized=standardized,
        ks_statistics=ks_stats,
        ks_p_values=ks_pvals,
        coverage=coverage,
        ess_final_median=ess_median,
        failures=failures,
        wall_clock=wall,
        n_replicates=cfg.n_replicates,
        ci_level=cfg.ci_level,
    )
