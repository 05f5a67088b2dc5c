"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 numerical failure. Errors are
reported on stderr as a JSON object.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from functools import partial

import numpy as np

from ..covariance import (
    ControlEnsemble,
    CovarianceEstimate,
    linear_shrinkage,
    nonlinear_shrinkage,
    pool_gridbox_variance,
    sample_covariance,
    select_bandwidth,
    unpool_covariance,
)
from ..errors import NumericalError, RegFPError, ValidationError
from ..inference import calibrate_ci, normal_ci
from ..regression import FingerprintData, gls_fit, gtls_fit
from ..simulation import SimConfig, run_experiment, write_report
from . import io
from .manifest import RunManifest
from .preprocess import (
    GriddedSeries,
    PreprocessRules,
    annual_means,
    aggregate_boxes,
    center_reference,
    pentad_means,
    split_control,
    to_vector,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _report(EXIT_INVALID, "UsageError", message)
        raise SystemExit(EXIT_INVALID)


def _report(code, kind, message, **extra):
    payload = {"error": kind, "exit_code": code, "message": message, **extra}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


# -- shared helpers -----------------------------------------------------------

def _ensemble(path) -> ControlEnsemble:
    return ControlEnsemble(io.read_matrix(path), centered=False)


def _estimator(method, gamma, ensemble, folds, seed):
    """Return ``(estimator, info)`` for an ensemble-based covariance method."""
    if method in ("sample",):
        return sample_covariance, {}
    if method in ("linear", "M1"):
        return linear_shrinkage, {}
    info = {}
    if gamma is None:
        gamma, cv = select_bandwidth(ensemble, folds=folds, seed=seed)
        info = {"cv_grid": cv.grid, "cv_mean_scores": cv.mean_scores}
    return partial(nonlinear_shrinkage, gamma=gamma), info


def _covariance_meta(est: CovarianceEstimate, ensemble=None) -> dict:
    meta = {
        "method": est.method,
        "gamma": est.gamma,
        "c_ratio": est.c_ratio,
        "null_count": est.decomposition.null_count,
        "N": est.N,
    }
    if "sample_null_count" in est.params:
        meta["sample_null_count"] = est.params["sample_null_count"]
    if ensemble is not None:
        meta["n"] = ensemble.n
    if est.pooled:
        meta["pooled"] = est.pooled
    return meta


def _fit_inputs(args):
    X = io.read_matrix(args.x)
    data = FingerprintData(io.read_vector(args.y), X, args.sizes)
    if args.cov is not None:
        sigma = CovarianceEstimate.from_matrix(io.read_matrix(args.cov), method="custom")
        return data, sigma, None, None
    ens = _ensemble(args.ensemble)
    est, _ = _estimator(args.method, args.gamma, ens, args.folds, args.seed)
    return data, est(ens), est, ens


def _fit(args, data, sigma):
    if args.regression == "gls":
        return gls_fit(data.y, data.x_tilde, sigma)
    return gtls_fit(data, sigma)


# -- subcommands --------------------------------------------------------------

def cmd_preprocess(args, out):
    rules = PreprocessRules(
        min_months_per_year=args.min_months,
        max_missing_annuals_per_pentad=args.max_missing,
        block_years=args.block_years,
        reference=tuple(args.reference) if args.reference else None,
        aggregate=tuple(args.aggregate),
    )
    series = [
        GriddedSeries.from_array(io.read_matrix(p), args.resolution, args.start_year, args.grid)
        for p in args.input
    ]
    if args.mode == "control":
        mask = io.read_matrix(args.mask) != 0 if args.mask else None
        ens = split_control(series, rules, mask)
        return [
            io.write_matrix(os.path.join(out, "ensemble.csv"), ens.replicates),
            io.write_matrix(os.path.join(out, "columns.csv"), ens.columns[:, None]),
        ], rules
    if len(series) != 1:
        raise ValidationError("observations mode takes exactly one --input")
    s = series[0]
    if s.resolution == "monthly":
        s = annual_means(s, rules)
    if rules.reference is not None:
        s = center_reference(s, rules.reference)
    s = aggregate_boxes(pentad_means(s, rules), rules.aggregate)
    vec, miss = to_vector(s)
    vec[miss] = np.nan
    return [
        io.write_matrix(os.path.join(out, "pentads.csv"), s.to_array()),
        io.write_matrix(os.path.join(out, "observations.csv"), vec[:, None]),
    ], rules


def cmd_estimate_cov(args, out):
    ens = _ensemble(args.ensemble)
    scales = None
    if args.pool:
        S, T = args.pool
        ens, scales = pool_gridbox_variance(ens, S, T, args.layout)
    est_fn, info = _estimator(args.method, args.gamma, ens, args.folds, args.seed)
    est = est_fn(ens)
    if scales is not None:
        est = unpool_covariance(est, scales, S, T, args.layout)
    mpath = io.write_matrix(os.path.join(out, f"covariance.{args.format}"), est.matrix)
    jpath = io.write_json(os.path.join(out, "covariance.json"), {**_covariance_meta(est, ens), **info})
    return [mpath, jpath], {}


def cmd_select_bandwidth(args, out):
    ens = _ensemble(args.ensemble)
    gamma, cv = select_bandwidth(ens, folds=args.folds, grid=args.grid, seed=args.seed)
    payload = {
        "gamma": gamma,
        "grid": cv.grid,
        "mean_scores": cv.mean_scores,
        "fold_scores": cv.scores,
        "folds": args.folds,
        "seed": args.seed,
    }
    return [io.write_json(os.path.join(out, "bandwidth.json"), payload)], {}


def cmd_fit(args, out):
    data, sigma, _, _ = _fit_inputs(args)
    fit = _fit(args, data, sigma)
    ci = normal_ci(fit, args.level)
    payload = {
        "beta": fit.beta,
        "ci_lower": ci.lower,
        "ci_upper": ci.upper,
        "kind": ci.kind,
        "kappa": ci.kappa,
        "level": ci.level,
        **{k: v for k, v in fit.as_dict().items() if k != "beta"},
        "covariance": _covariance_meta(sigma),
    }
    return [io.write_json(os.path.join(out, "fit.json"), payload)], {}


def cmd_calibrate(args, out):
    data, sigma, est, ens = _fit_inputs(args)
    fit = gtls_fit(data, sigma)
    ci, res = calibrate_ci(
        data, sigma, fit, level=args.level, B=args.B, seed=args.seed,
        estimator=est, n_control=None if ens is None else ens.n,
    )
    payload = {
        "beta": fit.beta,
        "ci_lower": ci.lower,
        "ci_upper": ci.upper,
        "kind": ci.kind,
        "kappa": ci.kappa,
        "level": ci.level,
        "B": args.B,
        "seed": args.seed,
        "coverage": res.coverage,
        "coverage_trace": res.coverage_trace,
        "failures": res.failures,
    }
    return [io.write_json(os.path.join(out, "calibration.json"), payload)], {}


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        if str(path).endswith(".json"):
            return json.loads(raw)
        return tomllib.loads(raw.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from exc


def cmd_simulate(args, out):
    d = load_config(args.config) if args.config else {}
    if args.reps is not None:
        d["replicates"] = args.reps
    if args.seed_given:
        d["seed"] = args.seed
    config = SimConfig.from_dict(d)
    report = run_experiment(config, threads=args.threads, allow_unstable=args.allow_unstable)
    return write_report(report, out), config.to_dict()


# -- parser -------------------------------------------------------------------

def _common(parser, prefix=""):
    # the top-level copies use prefixed dests so subcommand defaults cannot mask them
    parser.add_argument("--seed", dest=prefix + "seed", type=int, default=None, help="RNG seed (default 0)")
    parser.add_argument("--threads", dest=prefix + "threads", type=int, default=None,
                        help="worker processes; 0 = auto (default 1)")
    parser.add_argument("--output-dir", dest=prefix + "output_dir", default=None,
                        help="directory for outputs (default .)")


def _fit_args(p):
    p.add_argument("--y", required=True, help="observation vector (CSV or DACCMAT1)")
    p.add_argument("--x", required=True, help="N x p fingerprint matrix")
    p.add_argument("--sizes", type=int, nargs="+", required=True, help="ensemble size per fingerprint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--cov", help="precomputed covariance matrix")
    src.add_argument("--ensemble", help="control runs, one per row")
    p.add_argument("--method", choices=["M1", "M2", "sample"], default="M2")
    p.add_argument("--gamma", type=float, help="nonlinear-shrinkage exponent; default is cross-validated")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--level", type=float, default=0.95)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regfp", description="Regularized optimal fingerprinting.")
    _common(parser, prefix="top_")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    _common(common)

    p = sub.add_parser("preprocess", parents=[common], help="gridded series to 5-year means")
    p.add_argument("--input", action="append", required=True, help="time x box CSV; repeat for control runs")
    p.add_argument("--mode", choices=["observations", "control"], default="observations")
    p.add_argument("--resolution", choices=["monthly", "annual"], default="monthly")
    p.add_argument("--start-year", type=int, default=0)
    p.add_argument("--grid", type=int, nargs=2, metavar=("NLAT", "NLON"))
    p.add_argument("--aggregate", type=int, nargs=2, default=(1, 1), metavar=("FLAT", "FLON"))
    p.add_argument("--reference", type=int, nargs=2, metavar=("Y0", "Y1"))
    p.add_argument("--mask", help="block-length missing pattern (nonzero = missing)")
    p.add_argument("--min-months", type=int, default=9)
    p.add_argument("--max-missing", type=int, default=2)
    p.add_argument("--block-years", type=int, default=60)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("estimate-cov", parents=[common], help="shrinkage covariance from control runs")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--method", choices=["sample", "linear", "nonlinear"], default="nonlinear")
    p.add_argument("--gamma", type=float)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--pool", type=int, nargs=2, metavar=("S", "T"), help="pool variances within grid boxes")
    p.add_argument("--layout", choices=["box-major", "time-major"], default="box-major")
    p.add_argument("--format", choices=["bin", "csv"], default="bin")
    p.set_defaults(func=cmd_estimate_cov)

    p = sub.add_parser("select-bandwidth", parents=[common], help="cross-validate the shrinkage exponent")
    p.add_argument("--ensemble", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--grid", type=float, nargs="+")
    p.set_defaults(func=cmd_select_bandwidth)

    p = sub.add_parser("fit", parents=[common], help="scaling factors with normal intervals")
    _fit_args(p)
    p.add_argument("--regression", choices=["gtls", "gls"], default="gtls")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("calibrate", parents=[common], help="bootstrap-calibrated intervals")
    _fit_args(p)
    p.add_argument("-B", "--reps", dest="B", type=int, default=1000)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo experiment")
    p.add_argument("--config", help="TOML or JSON file with SimConfig keys")
    p.add_argument("--reps", type=int)
    p.add_argument("--allow-unstable", action="store_true")
    p.set_defaults(func=cmd_simulate)
    return parser


def _input_paths(args) -> list:
    paths = []
    for name in ("ensemble", "cov", "y", "x", "mask", "config"):
        v = getattr(args, name, None)
        if v:
            paths.append(v)
    return paths + list(getattr(args, "input", None) or [])


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for name, default in (("seed", None), ("threads", 1), ("output_dir", ".")):
        if getattr(args, name) is None:
            top = getattr(args, "top_" + name)
            setattr(args, name, default if top is None else top)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    if args.threads < 0:
        _report(EXIT_INVALID, "InvalidInput", "--threads must be >= 0")
        return EXIT_INVALID
    out = args.output_dir
    try:
        os.makedirs(out, exist_ok=True)
        outputs, rules = args.func(args, out)
        manifest = RunManifest(command=args.command, seed=args.seed)
        manifest.add_inputs(_input_paths(args))
        manifest.add_outputs(outputs)
        manifest.rules = rules if isinstance(rules, dict) else vars(rules)
        manifest.write(out)
    except ValidationError as exc:
        _report(EXIT_INVALID, type(exc).__name__, str(exc))
        return EXIT_INVALID
    except NumericalError as exc:
        extra = {"trace": exc.trace} if getattr(exc, "trace", None) else {}
        _report(EXIT_NUMERICAL, type(exc).__name__, str(exc), **extra)
        return EXIT_NUMERICAL
    except RegFPError as exc:
        _report(EXIT_NUMERICAL, type(exc).__name__, str(exc))
        return EXIT_NUMERICAL
    except OSError as exc:
        _report(EXIT_INVALID, type(exc).__name__, str(exc))
        return EXIT_INVALID
    return EXIT_OK


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
