"""Batch command-line interface.

Subcommands: ``fit`` (full two-step pipeline on a CSV panel), ``ape``
(point/bounds average partial effects with intervals), ``mc`` (simulation
presets), and ``equivalence-check`` (exact CF = 2SLS identity on linear
fixtures).  All floating output uses 17 significant digits; all randomness
derives from ``--seed``; ``--threads`` (or PANELCF_THREADS) only changes
scheduling, never results.  Errors exit nonzero with one JSON object on
stderr: {"code", "module", "message"}.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import mc
from ._parallel import resolve_threads
from .control_functions import (compute_control_functions,
                                export_control_functions)
from .effects import ape_bounds, ape_point
from .errors import ConfigError, PanelCFError
from .estimators import ControlFunctionProbit
from .inference import attach_inference, bootstrap_two_step, percentile_ci
from .panel import fmt, load_panel_csv, read_schema
from .reduced_form import fit_stepwise
from .second_stage import fit_linear_cf, fit_linear_cf_within, pooled_2sls

PRESETS = ("table1", "table2", "fig2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panelcf", description=__doc__)
    parser.add_argument("--config", help="JSON file with default option values "
                                         "(explicit flags win)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--output-dir", default=".")

    p_fit = sub.add_parser("fit", help="reduced form + control functions + "
                                       "second stage + covariance")
    common(p_fit)
    p_fit.add_argument("--input", required=True)
    p_fit.add_argument("--schema", default=None)
    p_fit.add_argument("--method", choices=("probit", "gee"), default="probit")
    p_fit.add_argument("--no-rf-intercept", action="store_true")
    p_fit.add_argument("--design-intercept", action="store_true")
    p_fit.add_argument("--bootstrap", type=int, default=0,
                       help="replace the analytic covariance with B bootstrap replicates")

    p_ape = sub.add_parser("ape", help="average partial effects with intervals")
    common(p_ape)
    p_ape.add_argument("--input", required=True)
    p_ape.add_argument("--schema", default=None)
    p_ape.add_argument("--method", choices=("probit", "gee"), default="probit")
    p_ape.add_argument("--no-rf-intercept", action="store_true")
    p_ape.add_argument("--design-intercept", action="store_true")
    p_ape.add_argument("--x-bar", action="append", required=True,
                       help="evaluation point, ';'-separated coordinates; repeatable")
    p_ape.add_argument("--k", type=int, default=0, help="coordinate to perturb")
    p_ape.add_argument("--delta", type=float, default=0.05)
    p_ape.add_argument("--p-bar", type=float, default=0.975)
    p_ape.add_argument("--mode", choices=("point", "bounds", "auto"), default="auto")
    p_ape.add_argument("--level", type=float, default=0.95)
    p_ape.add_argument("--bootstrap", type=int, default=0,
                       help="use B bootstrap replicates for percentile CIs of point APEs")

    p_mc = sub.add_parser("mc", help="Monte Carlo experiments")
    common(p_mc)
    p_mc.add_argument("--preset", choices=PRESETS, required=True)
    p_mc.add_argument("--n", type=int, default=1000)
    p_mc.add_argument("--m", type=int, default=200)
    p_mc.add_argument("--estimators", default="crecf,pw,cre,cl",
                      help="comma-separated subset of " + ",".join(mc.KNOWN_ESTIMATORS))

    p_eq = sub.add_parser("equivalence-check",
                          help="CF regression = pooled 2SLS identity on linear fixtures")
    common(p_eq)
    p_eq.add_argument("--k-fixtures", type=int, default=20)
    p_eq.add_argument("--tol", type=float, default=1e-8)
    p_eq.add_argument("--within", action="store_true",
                      help="also check the within-transform variant against FE2SLS")
    p_eq.add_argument("--negative-control", action="store_true",
                      help="use a deliberately mismatched instrument set "
                           "(the identity must then fail)")
    return parser


def apply_config(parser: argparse.ArgumentParser, argv: list) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                defaults = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}", module="cli_frontend")
        if not isinstance(defaults, dict):
            raise ConfigError("config file must hold a JSON object", module="cli_frontend")
        explicit = {a.split("=")[0].lstrip("-").replace("-", "_")
                    for a in argv if a.startswith("--")}
        for key, value in defaults.items():
            dest = key.replace("-", "_")
            if hasattr(args, dest) and dest not in explicit:
                setattr(args, dest, value)
    return args


def _write_csv(path: str, header: list, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fit_model(args) -> ControlFunctionProbit:
    schema = read_schema(args.schema) if args.schema else None
    data = load_panel_csv(args.input, schema=schema)
    model = ControlFunctionProbit(method=args.method,
                                  rf_intercept=not args.no_rf_intercept,
                                  design_intercept=args.design_intercept)
    return model.fit(data)


def _coef_names(model: ControlFunctionProbit) -> list:
    data = model.data_
    names = [f"x{j + 1}" for j in range(data.d_x)]
    names += [f"w{j + 1}" for j in range(data.d_w)]
    names += [f"alpha_hat_{j + 1}" for j in range(data.d_x)]
    names += [f"eps_hat_{j + 1}" for j in range(data.d_x)]
    return names


def cmd_fit(args) -> int:
    model = _fit_model(args)
    rf = model.reduced_form_
    out = args.output_dir
    os.makedirs(out, exist_ok=True)

    rows = []
    p = rf.params
    mats = [("pi", p.pi), ("pi_bar", p.pi_bar), ("sigma_eps", p.sigma_eps),
            ("lambda_alpha", p.lambda_alpha)]
    if p.intercept is not None:
        mats.append(("intercept", p.intercept.reshape(-1, 1)))
    for name, mat in mats:
        for i, row in enumerate(np.atleast_2d(mat)):
            for j, v in enumerate(row):
                rows.append([name, i, j, fmt(v)])
    rows.append(["loglik", "", "", fmt(rf.loglik)])
    rows.append(["n_iter", "", "", str(rf.n_iter)])
    rows.append(["converged", "", "", str(int(rf.converged))])
    _write_csv(os.path.join(out, "reduced_form.csv"),
               ["parameter", "row", "col", "value"], rows)

    cov = model.covariance_
    if args.bootstrap:
        cov = bootstrap_two_step(model.data_, B=args.bootstrap, seed=args.seed,
                                 method=args.method,
                                 rf_intercept=not args.no_rf_intercept,
                                 threads=resolve_threads(args.threads))
    fitted = model.second_stage_
    naive_se = np.sqrt(np.diag(fitted.naive_cov))
    corrected_se = cov.se
    names = _coef_names(model)
    rows = [[name, fmt(c), fmt(ns), fmt(cs), fmt(c / cs if cs > 0 else np.nan)]
            for name, c, ns, cs in zip(names, fitted.theta, naive_se, corrected_se)]
    rows.append(["rho_work", fmt(fitted.rho_work), "", "", ""])
    rows.append(["method", fitted.method, "", "", ""])
    rows.append(["converged", str(int(fitted.converged)), "", "", ""])
    _write_csv(os.path.join(out, "second_stage.csv"),
               ["name", "coef", "naive_se", "corrected_se", "z"], rows)

    rows = [[names[i]] + [fmt(v) for v in cov.cov_theta2[i]]
            for i in range(len(names))]
    _write_csv(os.path.join(out, "covariance.csv"), ["name"] + names, rows)
    export_control_functions(model.data_, model.control_functions_,
                             os.path.join(out, "control_functions.csv"))

    zstats = model.exogeneity_zstats()
    print("exogeneity z-stats: phi_alpha "
          + " ".join(fmt(v) for v in zstats["phi_alpha"])
          + " ; phi_eps " + " ".join(fmt(v) for v in zstats["phi_eps"]))
    return 0


def cmd_ape(args) -> int:
    model = _fit_model(args)
    out = args.output_dir
    os.makedirs(out, exist_ok=True)
    boot = None
    if args.bootstrap:
        points = []
        for spec in args.x_bar:
            xb = np.array([float(v) for v in spec.split(";")])
            points.append((xb, args.k, args.delta))
        boot = bootstrap_two_step(model.data_, B=args.bootstrap, seed=args.seed,
                                  method=args.method,
                                  rf_intercept=not args.no_rf_intercept,
                                  ape_points=tuple(points),
                                  threads=resolve_threads(args.threads))
    rows = []
    for i, spec in enumerate(args.x_bar):
        x_bar = np.array([float(v) for v in spec.split(";")])
        try:
            est = _single_ape(model, x_bar, args)
        except PanelCFError as exc:
            rows.append([spec, args.k, fmt(args.delta), "nan", "nan", "nan",
                         "nan", "nan"])
            print(f"x_bar={spec}: {exc}", file=sys.stderr)
            continue
        ci = est.ci if est.ci is not None else (np.nan, np.nan)
        if boot is not None and est.kind == "point" and boot.ape_draws is not None:
            ci = percentile_ci(boot.ape_draws[:, i], level=args.level)
        rows.append([spec, args.k, fmt(args.delta), fmt(est.psi_l), fmt(est.psi_u),
                     fmt(est.p_xbar), fmt(ci[0]), fmt(ci[1])])
    _write_csv(os.path.join(out, "ape.csv"),
               ["x_bar", "k", "delta", "psi_l", "psi_u", "p_xbar",
                "ci_low", "ci_high"], rows)
    return 0


def _single_ape(model: ControlFunctionProbit, x_bar, args):
    fit, cf, data = model.second_stage_, model.control_functions_, model.data_
    mode = args.mode
    if mode in ("bounds", "auto"):
        est = ape_bounds(fit, cf, data, x_bar, args.k, args.delta, p_bar=args.p_bar)
        if mode == "auto" and max(est.p_xbar, est.p_xbar_delta) <= 0.001:
            est = ape_point(fit, cf, x_bar, args.k, args.delta, data=data)
    else:
        est = ape_point(fit, cf, x_bar, args.k, args.delta, data=data)
    if model.covariance_ is not None:
        est = attach_inference(est, fit, model.covariance_, cf, data=data,
                               level=args.level)
    return est


def cmd_mc(args) -> int:
    out = args.output_dir
    os.makedirs(out, exist_ok=True)
    threads = resolve_threads(args.threads)
    if args.preset == "fig2":
        cells = mc.cf_misspec_experiment(args.n, args.m, args.seed, threads=threads)
        summary_rows = []
        draw_rows = []
        for (inst, cf_kind), biases in cells.items():
            summary_rows.append([inst, cf_kind, fmt(biases.mean()),
                                 fmt(biases.std(ddof=1)), len(biases)])
            for r, b in enumerate(biases):
                draw_rows.append([r, inst, cf_kind, fmt(b)])
        _write_csv(os.path.join(out, "mc_summary.csv"),
                   ["instrument", "cf", "mean_bias", "sd_bias", "m"], summary_rows)
        _write_csv(os.path.join(out, "mc_draws.csv"),
                   ["rep", "instrument", "cf", "bias"], draw_rows)
        return 0
    dgp = (mc.dgp_table1 if args.preset == "table1" else mc.dgp_table2)(args.n)
    estimators = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
    if args.preset == "table2":
        estimators = tuple(e for e in estimators if e not in ("pw", "pw_v"))
    result = mc.run_experiment(dgp, estimators, args.m, args.seed, threads=threads)
    summary = result.summary()
    rows = []
    for k in range(len(result.deltas)):
        rows.append([args.preset, "true", k, fmt(summary["true"]["mean"][k]),
                     "", "", result.m_requested])
        for name in estimators:
            s = summary[name]
            rows.append([args.preset, name, k, fmt(s["mean"][k]), fmt(s["rmse"][k]),
                         fmt(s["bias"][k]), s["m"]])
    _write_csv(os.path.join(out, "mc_summary.csv"),
               ["preset", "estimator", "k", "mean", "rmse", "bias", "m"], rows)
    draw_rows = []
    for r in range(result.m_requested):
        for k in range(len(result.deltas)):
            draw_rows.append([r, "true", k, fmt(result.true_apes[r, k])])
            for name in estimators:
                draw_rows.append([r, name, k, fmt(result.estimates[name][r, k])])
    _write_csv(os.path.join(out, "mc_draws.csv"),
               ["rep", "estimator", "k", "value"], draw_rows)
    return 0


def cmd_equivalence(args) -> int:
    out = args.output_dir
    os.makedirs(out, exist_ok=True)
    rows = []
    worst = 0.0
    children = np.random.SeedSequence(args.seed).spawn(args.k_fixtures)
    for i in range(args.k_fixtures):
        data, y = mc.generate_linear_fixture(children[i])
        rf = fit_stepwise(data, intercept=False)
        cf = compute_control_functions(data, rf.params)
        if args.negative_control:
            gap = _mismatched_gap(data, y, cf, rf.params)
        else:
            lin = fit_linear_cf(y, data, cf, rf.params)
            gap = lin.max_abs_gap
        if args.within:
            w_cf, w_iv = fit_linear_cf_within(y, data, cf)
            gap = max(gap, float(np.abs(w_cf - w_iv).max()))
        worst = max(worst, gap)
        rows.append([i, fmt(gap), int(gap < args.tol)])
    passed = worst < args.tol
    _write_csv(os.path.join(out, "equivalence.csv"),
               ["fixture", "max_abs_gap", "pass"], rows)
    print(f"max |phi_cf - phi_iv| over {args.k_fixtures} fixtures: {fmt(worst)} "
          f"-> {'PASS' if passed else 'FAIL'} (tol {args.tol:g})")
    return 0


def _mismatched_gap(data, y, cf, rf_params) -> float:
    """Negative control: the within-instrument rows are permuted across
    observations, which keeps the instrument count but breaks the identity."""
    n, T, m = data.n_units, data.periods, data.d_x
    lin = fit_linear_cf(y, data, cf, rf_params)
    zbar_rep = np.repeat(data.z_bar[:, None, :], T, axis=1).reshape(n * T, data.d_z)
    z_dot = data.Z.reshape(n * T, data.d_z) - zbar_rep
    perm = np.random.default_rng(0).permutation(n * T)
    proxy = zbar_rep @ rf_params.pi_bar.T
    coef = pooled_2sls(np.asarray(y, dtype=float).ravel(),
                       np.hstack([data.X.reshape(n * T, m), proxy]),
                       np.hstack([z_dot[perm], zbar_rep]))
    return float(np.abs(lin.phi_cf - coef[:m]).max())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = apply_config(parser, list(sys.argv[1:] if argv is None else argv))
        handlers = {"fit": cmd_fit, "ape": cmd_ape, "mc": cmd_mc,
                    "equivalence-check": cmd_equivalence}
        return handlers[args.command](args)
    except PanelCFError as exc:
        print(json.dumps(exc.payload()), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - defensive
        print(json.dumps({"code": "internal", "module": "cli_frontend",
                          "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
