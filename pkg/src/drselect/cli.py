"""Command-line driver: fit first stages, estimate effects, run coverage studies.

Exit codes: 0 success, 2 data or configuration error, 3 numerical warning
(reports are still written), 64 usage error.  Structured reports are JSON,
simulation output is CSV; every report embeds a manifest with the resolved
arguments, input digests, seed, and tool version, and `--from-manifest`
replays a previous run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .data import DataError, expand_features, load_csv, parse_expansion_config, standardize
from .diagnostics import sparse_eig
from .effects import (
    EffectsError,
    ci_functional,
    estimate_mu,
    estimate_tau,
    normal_quantile,
    parse_contrast,
    trim_overlap,
    variance_mu,
    variance_tau,
)
from .penalty import PenaltyConfig
from .pipeline import PipelineSettings, fit_nuisances, forced_indices
from .refit import RefitError
from .simulate import DgpConfig, coverage_study, default_threads
from .solver import SolverConfig

EXIT_OK = 0
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(command: str, args: argparse.Namespace, argv, inputs: dict) -> dict:
    settings = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return {
        "command": command,
        "argv": list(argv),
        "settings": settings,
        "input_digests": {k: _sha256(v) for k, v in inputs.items() if v},
        "seed": settings.get("seed"),
        "artifacts": [settings.get("out")],
        "tool_version": __version__,
        "schema_version": 1,
    }


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _penalty_config(args) -> PenaltyConfig:
    mode = {"formula": "formula", "iterative": "iterative", "cv": "cross_validation"}[
        args.lambda_mode
    ]
    grid = None
    if args.cv_grid:
        grid = tuple(float(g) for g in args.cv_grid.split(","))
    return PenaltyConfig(
        mode=mode,
        delta_d=args.delta_d,
        delta_y=args.delta_y,
        u_max=args.u_max,
        cv_folds=args.cv_folds,
        cv_grid=grid,
        seed=args.seed,
    )


def _load_design(args):
    ds = load_csv(args.data, args.outcome, args.treatment)
    if args.expand:
        with open(args.expand, "r", encoding="utf-8") as fh:
            spec = parse_expansion_config(fh.read())
        dm = expand_features(ds, spec)
    else:
        dm = standardize(
            np.column_stack([np.ones(ds.n), ds.x_raw]),
            intercept_col=0,
            provenance=["intercept", *ds.column_names],
        )
    return ds, dm


def _settings(args, dm) -> PipelineSettings:
    forced = forced_indices(dm, args.force) if args.force else ()
    return PipelineSettings(
        penalty=_penalty_config(args),
        solver=SolverConfig(),
        floor=args.floor,
        forced=forced,
        use_union=args.union,
    )


def _fit_section(ds, dm, fit, refit, kkt, kind: str) -> dict:
    raw_coef = dm.to_raw_coefficients(refit.gamma if kind == "logistic" else refit.beta)
    selected_names = [dm.provenance[j] for j in sorted(fit.selected)]
    section = {
        "lambda": fit.lambda_d if kind == "logistic" else fit.lambda_y,
        "selected_columns": selected_names,
        "n_selected": len(fit.selected),
        "objective": fit.objective,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "kkt": {
            "max_active_direction_error": kkt.max_active_direction_error,
            "max_zero_excess": kkt.max_zero_excess,
            "max_unpenalized_grad": kkt.max_unpenalized_grad,
        },
        "refit_coefficients_raw": {
            dm.provenance[j]: [float(v) for v in raw_coef[j]]
            for j in range(dm.p)
            if np.any(raw_coef[j] != 0.0)
        },
    }
    if fit.selected:
        gram = dm.x_star.T @ dm.x_star / ds.n
        lo, hi = sparse_eig(gram, fit.selected)
        section["theory_diagnostics"] = {"phi_min": lo, "phi_max": hi}
    return section


def cmd_fit(args, argv) -> int:
    ds, dm = _load_design(args)
    settings = _settings(args, dm)
    pfit = fit_nuisances(ds, dm, settings)
    report = {
        "manifest": _manifest("fit", args, argv, {"data": args.data, "expand": args.expand}),
        "n": ds.n,
        "p": dm.p,
        "treatment_levels": ds.n_treatments + 1,
        "treatment_map": {str(k): v for k, v in ds.treatment_map.items()},
        "dropped_columns": list(dm.dropped),
        "logistic": _fit_section(ds, dm, pfit.logit_fit, pfit.logit_refit, pfit.kkt_logit, "logistic"),
        "linear": _fit_section(ds, dm, pfit.linear_fit, pfit.linear_refit, pfit.kkt_linear, "linear"),
        "theory_diagnostics": pfit.diagnostics,
    }
    _write_json(args.out, report)
    print(args.out)
    if not (pfit.logit_fit.converged and pfit.linear_fit.converged):
        print("warning: a first-stage fit did not converge", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_effects(args, argv) -> int:
    ds, dm = _load_design(args)
    settings = _settings(args, dm)
    pfit = fit_nuisances(ds, dm, settings)
    report = {
        "manifest": _manifest(f"effects-{args.estimand}", args, argv,
                              {"data": args.data, "expand": args.expand}),
        "estimand": args.estimand,
        "n": ds.n,
        "p": dm.p,
        "lambda_d": pfit.lambda_d,
        "lambda_y": pfit.lambda_y,
        "floor": settings.floor,
        "floor_applied": pfit.nuisances.floor_applied,
    }
    warn = not (pfit.logit_fit.converged and pfit.linear_fit.converged)

    if args.estimand == "ate":
        est = variance_mu(ds, pfit.nuisances, estimate_mu(ds, pfit.nuisances))
        report["mu_hat"] = [float(v) for v in est.mu_hat]
        report["variance"] = [[float(v) for v in row] for row in est.v]
        report["contrasts"] = []
        for expr in args.contrast or ["mu1-mu0"]:
            contrast = parse_contrast(expr, ds.n_treatments + 1)
            ci = ci_functional(est, contrast, alpha=args.alpha)
            report["contrasts"].append(
                {"expr": expr, "point": ci.point, "lower": ci.lower,
                 "upper": ci.upper, "se": ci.se, "alpha": args.alpha,
                 "degenerate": ci.degenerate}
            )
    else:  # att
        trim_report = {"applied": False}
        work_ds, work_nuis = ds, pfit.nuisances
        if args.trim:
            trimmed = trim_overlap(ds, pfit.nuisances, args.treated, floor=args.floor)
            trim_report = {
                "applied": True,
                "n_before": ds.n,
                "n_after": trimmed.dataset.n,
                "n_dropped": trimmed.n_dropped,
                "propensity_bounds": list(trimmed.bounds),
            }
            work_ds = trimmed.dataset
            dm_t = standardize(
                np.column_stack([np.ones(work_ds.n), work_ds.x_raw]),
                intercept_col=0,
                provenance=["intercept", *work_ds.column_names],
            ) if not args.expand else expand_features(
                work_ds, parse_expansion_config(open(args.expand, encoding="utf-8").read())
            )
            pfit2 = fit_nuisances(work_ds, dm_t, _settings(args, dm_t))
            work_nuis = pfit2.nuisances
            warn = warn or not (pfit2.logit_fit.converged and pfit2.linear_fit.converged)
        tot = variance_tau(work_ds, work_nuis, estimate_tau(work_ds, work_nuis))
        c = normal_quantile(1 - args.alpha / 2)
        report["tau_hat"] = [float(v) for v in tot.tau_hat]
        report["variance"] = [[float(v) for v in row] for row in tot.v_tau]
        report["intervals"] = [
            {"level": t + 1,
             "point": float(tot.tau_hat[t]),
             "lower": float(tot.tau_hat[t] - c * np.sqrt(tot.v_tau[t, t] / work_ds.n)),
             "upper": float(tot.tau_hat[t] + c * np.sqrt(tot.v_tau[t, t] / work_ds.n)),
             "alpha": args.alpha}
            for t in range(tot.tau_hat.shape[0])
        ]
        report["trim"] = trim_report
    _write_json(args.out, report)
    print(args.out)
    return EXIT_NUMERIC if warn else EXIT_OK


def cmd_coverage(args, argv) -> int:
    with open(args.grid, "r", encoding="utf-8") as fh:
        grid_spec = json.load(fh)
    if "cells" not in grid_spec or not grid_spec["cells"]:
        raise DataError("grid config must contain a nonempty 'cells' list")
    cells = []
    for i, cell in enumerate(grid_spec["cells"]):
        try:
            cells.append(
                DgpConfig(
                    n=int(cell["n"]), p=int(cell["p"]),
                    rho_beta=float(cell["rho_beta"]), rho_gamma=float(cell["rho_gamma"]),
                    alpha_beta=float(cell["alpha_beta"]), alpha_gamma=float(cell["alpha_gamma"]),
                    seed=int(cell.get("seed", args.seed + 1_000_000 * i)),
                )
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"grid cell {i}: {exc}") from None
    settings = PipelineSettings(penalty=_penalty_config(args))

    def progress(done, total):
        print(f"coverage: {done}/{total} replications", file=sys.stderr)

    report = coverage_study(
        cells, reps=args.reps, settings=settings,
        threads=args.threads, keep_records=False, progress=progress,
    )
    report.to_csv(args.out)
    _write_json(
        args.out + ".manifest.json",
        _manifest("coverage", args, argv, {"grid": args.grid}),
    )
    print(args.out)
    return EXIT_OK


def _add_common(p: _Parser, data: bool = True):
    if data:
        p.add_argument("--data", required=True, help="input CSV (UTF-8, header row)")
        p.add_argument("--outcome", required=True, help="outcome column name")
        p.add_argument("--treatment", required=True, help="treatment column name")
        p.add_argument("--expand", default=None,
                       help="feature-expansion config (base=, indicators=, interactions=, degree.<col>=)")
    p.add_argument("--lambda-mode", choices=("formula", "iterative", "cv"),
                   default="cv", dest="lambda_mode")
    p.add_argument("--delta-d", type=float, default=4.5, dest="delta_d")
    p.add_argument("--delta-y", type=float, default=5.0, dest="delta_y")
    p.add_argument("--u-max", type=float, default=None, dest="u_max",
                   help="outcome noise scale for formula mode")
    p.add_argument("--cv-folds", type=int, default=5, dest="cv_folds")
    p.add_argument("--cv-grid", default=None, dest="cv_grid",
                   help="comma-separated decreasing penalty grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--floor", type=float, default=1e-3,
                   help="propensity floor")
    p.add_argument("--force", action="append", default=[],
                   help="column name forced into both refits (repeatable)")
    p.add_argument("--union", action="store_true",
                   help="refit each model on the union of both selections")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker processes (default: DRSELECT_THREADS or {default_threads()})")
    p.add_argument("--out", required=True, help="output report path")


def build_parser() -> _Parser:
    parser = _Parser(prog="drselect",
                     description="doubly-robust treatment effects after data-driven selection")
    parser.add_argument("--version", action="version", version=f"drselect {__version__}")
    parser.add_argument("--from-manifest", default=None,
                        help="replay a previous run from its manifest JSON")
    sub = parser.add_subparsers(dest="command")

    p_fit = sub.add_parser("fit", help="fit both penalized first stages and refits")
    _add_common(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_eff = sub.add_parser("effects", help="doubly-robust effect estimates with intervals")
    p_eff.add_argument("estimand", choices=("ate", "att"))
    _add_common(p_eff)
    p_eff.add_argument("--contrast", action="append", default=None,
                       help="contrast over mu, e.g. mu1-mu0 (repeatable; ate only)")
    p_eff.add_argument("--alpha", type=float, default=0.05)
    p_eff.add_argument("--trim", action="store_true",
                       help="trim comparisons outside the treated propensity range (att)")
    p_eff.add_argument("--treated", type=int, default=1,
                       help="treated level for trimming (att)")
    p_eff.set_defaults(func=cmd_effects)

    p_cov = sub.add_parser("coverage", help="Monte Carlo coverage study over a DGP grid")
    p_cov.add_argument("--grid", required=True, help="JSON grid config with a 'cells' list")
    p_cov.add_argument("--reps", type=int, required=True)
    _add_common(p_cov, data=False)
    p_cov.set_defaults(func=cmd_coverage)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.from_manifest:
        try:
            with open(args.from_manifest, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
            replay = [a for a in manifest["argv"] if a != "--from-manifest"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            print(f"error: bad manifest: {exc}", file=sys.stderr)
            return EXIT_DATA
        return main(replay)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, argv)
    except (DataError, EffectsError, RefitError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
