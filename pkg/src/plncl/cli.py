"""Command-line front end: simulate, fit, blocks, select, simstudy.

Every command writes a ``manifest.json`` carrying the exact configuration,
content digests of the inputs, the seed, and the library version, which is
enough to reproduce the run bit for bit.

Exit codes: 0 success, 2 input error, 3 fit hit the iteration cap without
meeting the stopping rule (outputs are still written), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__
from .blocks import build_block_design, count_bounds, format_blocks, load_blocks, save_blocks
from .composite_em import fit_composite
from .full_em import FitConfig, fit_full
from .importance import DegenerateSampleError
from .model import Dataset, ModelParams, sample_pln
from .newton import NonConvergenceError
from .simstudy import StudyConfig, random_truth, run_study
from .stats import all_subset_masks, select_model, wald_report
from .streams import substream
from .validation import add_intercept

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3
EXIT_NUMERIC = 4


class InputError(Exception):
    """User-input problem; maps to exit code 2."""


# ---------------------------------------------------------------------------
# CSV and JSON plumbing
# ---------------------------------------------------------------------------

def _read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    if not os.path.exists(path):
        raise InputError(f"{path}: file not found")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise InputError(f"{path}: expected a header line and at least one data row")
    header = [h.strip() for h in rows[0]]
    width = len(header)
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise InputError(
                f"{path}:{lineno}: expected {width} columns, found {len(row)}"
            )
    return header, rows[1:]


def read_counts_csv(path: str) -> tuple[list[str], np.ndarray]:
    header, rows = _read_csv(path)
    out = np.empty((len(rows), len(header)), dtype=np.int64)
    for r, row in enumerate(rows):
        for c, tok in enumerate(row):
            tok = tok.strip()
            try:
                value = int(tok)
            except ValueError:
                raise InputError(
                    f"{path}:{r + 2}: column {c + 1} ({header[c]}): "
                    f"{tok!r} is not an integer count"
                ) from None
            if value < 0:
                raise InputError(
                    f"{path}:{r + 2}: column {c + 1} ({header[c]}): negative count {value}"
                )
            out[r, c] = value
    return header, out


def read_real_csv(path: str) -> tuple[list[str], np.ndarray]:
    header, rows = _read_csv(path)
    out = np.empty((len(rows), len(header)))
    for r, row in enumerate(rows):
        for c, tok in enumerate(row):
            try:
                value = float(tok.strip())
            except ValueError:
                raise InputError(
                    f"{path}:{r + 2}: column {c + 1} ({header[c]}): "
                    f"{tok!r} is not a number"
                ) from None
            if not np.isfinite(value):
                raise InputError(
                    f"{path}:{r + 2}: column {c + 1} ({header[c]}): non-finite value"
                )
            out[r, c] = value
    return header, out


def write_csv(path: str, header: list[str], matrix: np.ndarray, fmt: str = "%.17g"):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in np.atleast_2d(matrix):
            writer.writerow(
                [str(int(v)) if fmt == "int" else fmt % v for v in row]
            )


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_json(path: str, payload: dict):
    payload = dict(payload)
    payload.setdefault("schema_version", SCHEMA_VERSION)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out_dir, command, config, input_paths, seed, started):
    manifest = {
        "command": command,
        "config": config,
        "inputs": {p: _digest(p) for p in input_paths},
        "seed": seed,
        "library_version": __version__,
        "git_describe": _git_describe(),
        "wall_clock_seconds": time.time() - started,
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)


def _resolve_seed(args) -> int:
    env = os.environ.get("PLN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"PLN_SEED={env!r} is not an integer") from None
    return args.seed


def _ensure_outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Shared fit plumbing
# ---------------------------------------------------------------------------

def _add_fit_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--alpha", type=float, default=0.9,
                        help="mixture proportion of the narrow proposal component")
    parser.add_argument("--particles", type=int, default=200,
                        help="initial particles per site and block")
    parser.add_argument("--growth", choices=["linear", "constant"], default="linear")
    parser.add_argument("--max-iter", type=int, default=1000)
    parser.add_argument("--lag", type=int, default=50,
                        help="stopping-rule lag in iterations")
    parser.add_argument("--tol", type=float, default=1e-3,
                        help="relative parameter drift tolerance over the lag window")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)


def _fit_config(args, seed) -> FitConfig:
    return FitConfig(
        n_iter_max=args.max_iter,
        n_particles_initial=args.particles,
        particle_growth=args.growth,
        alpha=args.alpha,
        stop_lag=args.lag,
        stop_tol=args.tol,
        master_seed=seed,
    )


def _load_dataset(args) -> tuple[Dataset, list[str]]:
    species, counts = read_counts_csv(args.counts)
    covar_names, X = read_real_csv(args.covariates)
    if X.shape[0] != counts.shape[0]:
        raise InputError(
            f"{args.covariates}: {X.shape[0]} rows but {args.counts} has "
            f"{counts.shape[0]}"
        )
    if not args.no_intercept:
        X, covar_names = add_intercept(X, covar_names)
    offsets = None
    inputs = [args.counts, args.covariates]
    if args.offsets:
        off_names, offsets = read_real_csv(args.offsets)
        if offsets.shape != counts.shape:
            raise InputError(
                f"{args.offsets}: shape {offsets.shape} does not match counts "
                f"shape {counts.shape}"
            )
        inputs.append(args.offsets)
    data = Dataset(
        counts=counts, covariates=X, offsets=offsets,
        species_names=species, covariate_names=covar_names,
    )
    return data, inputs


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    if not os.path.exists(args.params):
        raise InputError(f"{args.params}: file not found")
    with open(args.params) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.params}: invalid JSON ({exc})") from None
    try:
        params = ModelParams(B=np.asarray(spec["B"], dtype=float),
                             Sigma=np.asarray(spec["Sigma"], dtype=float))
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{args.params}: {exc}") from None
    inputs = [args.params]
    if args.covariates:
        covar_names, X = read_real_csv(args.covariates)
        inputs.append(args.covariates)
    else:
        X = np.ones((args.n, params.n_covariates))
        if params.n_covariates > 1:
            X[:, 1:] = substream(seed, 0).standard_normal(
                (args.n, params.n_covariates - 1)
            )
        covar_names = ["intercept"] + [f"x{l + 1}" for l in range(params.n_covariates - 1)]
    offsets = None
    if args.offsets:
        _, offsets = read_real_csv(args.offsets)
        inputs.append(args.offsets)
    species = spec.get("species_names") or [f"sp{j + 1}" for j in range(params.n_species)]
    data, latent = sample_pln(
        params, X, offsets=offsets, rng=substream(seed, 1),
        species_names=species, covariate_names=covar_names,
    )
    out = _ensure_outdir(args.out)
    write_csv(os.path.join(out, "counts.csv"), species, data.counts, fmt="int")
    write_csv(os.path.join(out, "latent.csv"), species, latent.Z)
    write_csv(os.path.join(out, "covariates.csv"), covar_names, X)
    write_manifest(out, "simulate", {"params_file": args.params, "n": int(X.shape[0])},
                   inputs, seed, started)
    return EXIT_OK


def _report_payload(result, report, data) -> dict:
    return {
        "species_names": data.species_names,
        "covariate_names": data.covariate_names,
        "B": result.params.B.tolist(),
        "Sigma": result.params.Sigma.tolist(),
        "std_errors": np.asarray(result.std_errors).tolist(),
        "converged": bool(result.converged),
        "iterations_run": int(result.iterations_run),
        "tests": report.to_dict(),
    }


def _signif_csv(path: str, matrix: np.ndarray, row_names, col_names):
    symbols = {1.0: "+", -1.0: "-", 0.0: ""}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + list(col_names))
        for name, row in zip(row_names, matrix):
            writer.writerow([name] + [symbols[np.sign(v)] for v in row])


def cmd_fit(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    data, inputs = _load_dataset(args)
    config = _fit_config(args, seed)
    out = _ensure_outdir(args.out)

    if args.likelihood == "composite":
        if args.blocks:
            design = load_blocks(args.blocks)
            if design.n_species != data.n_species:
                raise InputError(
                    f"{args.blocks}: design is for {design.n_species} species, "
                    f"data has {data.n_species}"
                )
            inputs.append(args.blocks)
        else:
            if args.block_size is None:
                raise InputError("composite likelihood needs --block-size or --blocks")
            design = build_block_design(
                data.n_species, args.block_size, rng=substream(seed, 2**20)
            )
        result = fit_composite(data, config, design=design, n_jobs=args.threads)
        save_blocks(design, os.path.join(out, "blocks.txt"))
    else:
        result = fit_full(data, config, n_jobs=args.threads)

    report = wald_report(result, data, level=args.level)
    payload = _report_payload(result, report, data)
    if args.likelihood == "composite":
        payload["cl_value"] = float(result.cl_value)
        payload["dim_estimate"] = float(result.godambe.dim_hg)
    _write_json(os.path.join(out, "estimates.json"), payload)
    _write_json(
        os.path.join(out, "diagnostics.json"),
        {
            "objective_trace": result.objective_trace.tolist(),
            "ess_trace_min": result.ess_trace[:, 0].tolist(),
            "ess_trace_median": result.ess_trace[:, 1].tolist(),
            "degenerate_events": [list(e) for e in result.degenerate_events],
            "variance_pseudo_inverse": bool(result.variance_pseudo_inverse),
        },
    )
    _signif_csv(
        os.path.join(out, "significance_beta.csv"),
        report.significance_matrix("beta"),
        data.covariate_names, data.species_names,
    )
    _signif_csv(
        os.path.join(out, "significance_sigma.csv"),
        report.significance_matrix("sigma"),
        data.species_names, data.species_names,
    )
    write_manifest(
        out, "fit",
        {"likelihood": args.likelihood, "block_size": args.block_size,
         "level": args.level, "no_intercept": args.no_intercept,
         **config.to_dict()},
        inputs, seed, started,
    )
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_blocks(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    if args.k < 2 or args.k > args.p:
        raise InputError(f"need 2 <= k <= p, got k={args.k}, p={args.p}")
    design = build_block_design(args.p, args.k, rng=substream(seed, 2**20))
    lower, upper = count_bounds(args.p, args.k)
    print(f"p={args.p} k={args.k}: C={design.n_blocks} blocks "
          f"(bounds: {lower} <= C <= {upper})")
    if args.out:
        out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
        os.makedirs(out_dir, exist_ok=True)
        save_blocks(design, args.out)
        write_manifest(out_dir, "blocks",
                       {"p": args.p, "k": args.k, "blocks_file": args.out},
                       [], seed, started)
    else:
        sys.stdout.write(format_blocks(design))
    return EXIT_OK


def _parse_subsets(text: str, names: list[str], d_user: int) -> list[tuple]:
    masks = []
    for group in text.split(";"):
        group = group.strip()
        chosen = set()
        if group not in ("", "none"):
            for tok in group.split(","):
                tok = tok.strip()
                if tok in names:
                    chosen.add(names.index(tok))
                else:
                    try:
                        idx = int(tok) - 1
                    except ValueError:
                        raise InputError(
                            f"unknown covariate {tok!r} in --covariate-sets"
                        ) from None
                    if not 0 <= idx < d_user:
                        raise InputError(f"covariate index {tok} out of range")
                    chosen.add(idx)
        masks.append((True,) + tuple(i in chosen for i in range(d_user)))
    return masks


def cmd_select(args) -> int:
    started = time.time()
    seed = _resolve_seed(args)
    data, inputs = _load_dataset(args)
    d_user = data.n_covariates - 1
    user_names = data.covariate_names[1:]
    if args.all_subsets:
        masks = all_subset_masks(data.n_covariates)
    elif args.covariate_sets:
        masks = _parse_subsets(args.covariate_sets, user_names, d_user)
    else:
        raise InputError("need --all-subsets or --covariate-sets")
    config = _fit_config(args, seed)

    def design_builder(_data):
        if args.blocks:
            return load_blocks(args.blocks)
        return build_block_design(
            data.n_species, args.block_size or 2, rng=substream(seed, 2**20)
        )

    scores = select_model(data, masks, config, design_builder, n_jobs=args.threads)
    out = _ensure_outdir(args.out)
    rows = []
    for rank, sc in enumerate(scores, start=1):
        kept = [data.covariate_names[i] for i, b in enumerate(sc.model_id) if b]
        rows.append({
            "rank": rank,
            "mask": "".join("1" if b else "0" for b in sc.model_id),
            "covariates": "+".join(kept),
            "cl_value": sc.cl_value,
            "dim_estimate": sc.dim_estimate,
            "bic": sc.bic,
            "flagged": sc.flagged,
            "error": sc.error,
        })
    _write_json(os.path.join(out, "selection.json"), {"models": rows})
    with open(os.path.join(out, "selection.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out, "select",
                   {"n_models": len(masks), **config.to_dict()},
                   inputs, seed, started)
    return EXIT_OK


def cmd_simstudy(args) -> int:
    started = time.time()
    if not os.path.exists(args.config):
        raise InputError(f"{args.config}: file not found")
    with open(args.config) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: invalid JSON ({exc})") from None
    try:
        seed = int(os.environ.get("PLN_SEED", raw.get("seed", 0)))
        fit_raw = raw.get("fit", {})
        fit_cfg = FitConfig(
            n_iter_max=fit_raw.get("max_iter", 200),
            n_particles_initial=fit_raw.get("particles", 100),
            particle_growth=fit_raw.get("growth", "linear"),
            alpha=fit_raw.get("alpha", 0.9),
            stop_lag=fit_raw.get("lag", 30),
            stop_tol=fit_raw.get("tol", 1e-3),
            master_seed=seed,
        )
        truth = random_truth(
            raw["n_species"], raw["n_covariates"], substream(seed, 99)
        )
        cfg = StudyConfig(
            n_sites=raw["n_sites"],
            n_species=raw["n_species"],
            n_covariates=raw["n_covariates"],
            n_replicates=raw["n_replicates"],
            truth=truth,
            fit_config=fit_cfg,
            block_sizes=tuple(raw.get("block_sizes", [])),
            run_full=bool(raw.get("run_full", False)),
            master_seed=seed,
            ci_level=raw.get("ci_level", 0.95),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{args.config}: {exc}") from None
    report = run_study(cfg, n_jobs=args.threads)
    out = _ensure_outdir(args.out)
    _write_json(os.path.join(out, "study.json"), report.to_dict())
    with open(os.path.join(out, "estimates.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "replicate", "coefficient", "estimate", "std_error"])
        for method in report.methods:
            est = report.estimates[method]
            se = report.std_errors[method]
            for r in range(est.shape[0]):
                for c, name in enumerate(report.coef_names):
                    writer.writerow([method, r, name, "%.17g" % est[r, c], "%.17g" % se[r, c]])
    write_manifest(out, "simstudy", raw, [args.config], seed, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plncl",
        description="Poisson log-normal inference by sampling EM "
                    "(full and composite likelihood)",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw counts from given parameters")
    sim.add_argument("--params", required=True, help="JSON file with B and Sigma")
    sim.add_argument("--covariates", help="covariates CSV (default: random design)")
    sim.add_argument("--offsets", help="offsets CSV")
    sim.add_argument("--n", type=int, default=100, help="sites when no covariates file")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(handler=cmd_simulate)

    fit = sub.add_parser("fit", help="fit the model to counts and covariates")
    fit.add_argument("--counts", required=True)
    fit.add_argument("--covariates", required=True)
    fit.add_argument("--offsets")
    fit.add_argument("--likelihood", choices=["full", "composite"], default="composite")
    fit.add_argument("--block-size", type=int, default=None)
    fit.add_argument("--blocks", help="blocks file (overrides --block-size)")
    fit.add_argument("--no-intercept", action="store_true",
                     help="use the covariates file as-is")
    fit.add_argument("--level", type=float, default=0.95)
    _add_fit_flags(fit)
    fit.add_argument("--out", required=True)
    fit.set_defaults(handler=cmd_fit)

    blk = sub.add_parser("blocks", help="build a species block design")
    blk.add_argument("--p", type=int, required=True)
    blk.add_argument("--k", type=int, required=True)
    blk.add_argument("--seed", type=int, default=0)
    blk.add_argument("--out")
    blk.set_defaults(handler=cmd_blocks)

    sel = sub.add_parser("select", help="rank covariate subsets by composite BIC")
    sel.add_argument("--counts", required=True)
    sel.add_argument("--covariates", required=True)
    sel.add_argument("--offsets")
    sel.add_argument("--no-intercept", action="store_true",
                     help="use the covariates file as-is")
    sel.add_argument("--all-subsets", action="store_true")
    sel.add_argument("--covariate-sets",
                     help="semicolon-separated groups of covariate names or "
                          "1-based indices; intercept always included")
    sel.add_argument("--block-size", type=int, default=2)
    sel.add_argument("--blocks")
    _add_fit_flags(sel)
    sel.add_argument("--out", required=True)
    sel.set_defaults(handler=cmd_select)

    study = sub.add_parser("simstudy", help="run a replicated simulation study")
    study.add_argument("--config", required=True, help="study config JSON")
    study.add_argument("--threads", type=int, default=1)
    study.add_argument("--out", required=True)
    study.set_defaults(handler=cmd_simstudy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NonConvergenceError, DegenerateSampleError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
