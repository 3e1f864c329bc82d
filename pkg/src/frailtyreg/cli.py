"""Command-line front end.

Exit codes: 0 on success, 1 for usage or input errors, 2 when a fit fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .baseline import SolverError
from .data import DataError, Dataset, load_long_csv, load_wide_csv
from .fitting import FitOptions, FitResult, UnfittableError, fit, fit_cox
from .inference import (BootstrapError, BootstrapRun, bootstrap, kaplan_meier, marginal_survival, predict_survival,
                        score_test_gamma, simultaneous_band, wald_table, write_curve_csv, write_wald_csv)
from .simulate import TruthSpec, generate, run_scenario
from .transforms import FrailtyFamily

EXIT_OK, EXIT_USAGE, EXIT_FIT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_data(path, tau=None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    header = [h.strip() for h in header]
    if header[:4] == ["id", "start", "stop", "status"]:
        return load_long_csv(path, tau)
    return load_wide_csv(path, tau)


def _family(args) -> FrailtyFamily:
    if args.alpha is not None and args.family != "igg":
        raise UsageError("--alpha is only valid with --family igg")
    if args.family == "igg" and args.alpha is None:
        raise UsageError("--family igg requires --alpha")
    return FrailtyFamily.from_name(args.family, args.alpha)


def _options(args) -> FitOptions:
    lo, hi = args.gamma_min, args.gamma_max
    if args.gamma_fixed is not None:
        lo = hi = args.gamma_fixed
    mode = {"free": "free", "nonneg-cox-fallback": "nonneg_gamma_with_cox_fallback"}[args.constraint]
    try:
        return FitOptions(gamma_bounds=(lo, hi), mh_steps=args.mh_steps, seed=args.seed, constraint_mode=mode,
                          allow_negative_gamma=args.allow_negative_gamma)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _grid(spec: str | None, tau: float) -> np.ndarray:
    if spec is None:
        return np.linspace(0.0, tau, 101)
    parts = [p for p in spec.split(",") if p.strip()]
    try:
        if len(parts) == 1 and "." not in parts[0]:
            m = int(parts[0])
            if m < 2:
                raise UsageError("--grid count must be at least 2")
            return np.linspace(0.0, tau, m)
        grid = np.array([float(p) for p in parts])
    except ValueError:
        raise UsageError(f"cannot parse --grid {spec!r}") from None
    if np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise UsageError("--grid times must be increasing and nonnegative")
    return grid


def _vector(spec: str, d: int) -> np.ndarray:
    try:
        z = np.array([float(v) for v in spec.split(",")])
    except ValueError:
        raise UsageError(f"cannot parse covariate vector {spec!r}") from None
    if len(z) != d:
        raise UsageError(f"--z needs {d} values, got {len(z)}")
    return z


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _group_masks(data: Dataset, column: str | None):
    if column is None:
        return {"all": np.ones(data.n, dtype=bool)}
    if column not in data.covariate_names:
        raise UsageError(f"unknown covariate {column!r}")
    z = data.covariates_at(0.0)[:, data.covariate_names.index(column)]
    return {f"{column}={v:g}": z == v for v in np.unique(z)}


def _fit_from_args(args, data):
    if args.fit:
        return FitResult.from_json(args.fit)
    return fit(data, _family(args), _options(args))


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    data = _read_data(args.input, args.tau)
    res = fit(data, _family(args), _options(args))
    out = _out(args)
    res.to_json(out / "fit.json")
    res.A_hat.to_csv(out / "baseline.csv")
    print(f"gamma = {res.gamma:.6g}")
    for name, b in zip(res.covariate_names, res.beta):
        print(f"beta[{name}] = {b:.6g}")
    print(f"loglik = {res.loglik:.10g}  (converged={res.converged}, evaluations={res.n_evaluations})")
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    data = _read_data(args.input, args.tau)
    family = _family(args)
    opts = _options(args)
    base = FitResult.from_json(args.fit) if args.fit else fit(data, family, opts)
    if args.fit:
        family = base.family
    run = bootstrap(data, family, opts, args.B, args.weights, args.seed, base_fit=base, jobs=args.jobs)
    out = _out(args)
    run.to_json(out / "bootstrap.json")
    rows = wald_table(run)
    write_wald_csv(rows, out / "wald.csv")
    for r in rows:
        print(f"{r.covariate:>12s} {r.parameter:>6s} {r.model:>4s} {r.estimate:10.4f} {r.se:10.4f} {r.z:8.3f}")
    if run.failures:
        print(f"{len(run.failures)} of {run.B} replicates failed", file=sys.stderr)
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.bootstrap:
        run = BootstrapRun.from_json(args.bootstrap)
        fitted = run.base_fit
    elif args.fit:
        run, fitted = None, FitResult.from_json(args.fit)
    else:
        raise UsageError("predict needs --fit or --bootstrap")
    z = _vector(args.z, len(fitted.beta))
    tau = float(fitted.A_hat.times[-1]) if args.tau is None else args.tau
    grid = _grid(args.grid, tau)
    out = _out(args)
    if run is not None:
        band = simultaneous_band(run, z, grid, args.level)
        band.to_csv(out / "predict.csv")
        print(f"critical value {band.critical_value:.4f} at level {args.level}")
    else:
        write_curve_csv(out / "predict.csv", grid, predict_survival(fitted, None, z, grid))
    return EXIT_OK


def cmd_km(args) -> int:
    data = _read_data(args.input, args.tau)
    out = _out(args)
    with open(out / "km.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "time", "survival", "greenwood_var"])
        for label, mask in _group_masks(data, args.group).items():
            km = kaplan_meier(data, mask)
            for t, s, v in zip(km.time, km.survival, km.variance):
                w.writerow([label, repr(float(t)), repr(float(s)), repr(float(v))])
    return EXIT_OK


def cmd_marginal(args) -> int:
    data = _read_data(args.input, args.tau)
    fitted = _fit_from_args(args, data)
    cox = fit_cox(data, _options(args))
    grid = _grid(args.grid, data.tau)
    out = _out(args)
    with open(out / "marginal.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "model", "time", "survival"])
        for label, mask in _group_masks(data, args.group).items():
            curves = {"frailty": marginal_survival(fitted, None, data, mask, grid),
                      "cox": marginal_survival(cox, None, data, mask, grid)}
            km = kaplan_meier(data, mask)
            for model, c in curves.items():
                for t, s in zip(c.time, c.survival):
                    w.writerow([label, model, repr(float(t)), repr(float(s))])
            for t in grid:
                w.writerow([label, "kaplan_meier", repr(float(t)), repr(float(km(t)))])
    return EXIT_OK


def cmd_score_test(args) -> int:
    data = _read_data(args.input, args.tau)
    res = score_test_gamma(data, _options(args), args.B, args.seed, args.weights, check=True)
    out = _out(args)
    with open(out / "score_test.json", "w") as fh:
        json.dump({"statistic": res.statistic, "p_value": res.p_value, "B_used": res.B_used,
                   "finite_difference": res.fd_check}, fh, indent=2)
    print(f"score statistic {res.statistic:.6g}, bootstrap p-value {res.p_value:.4f} (B={res.B_used})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    with open(args.scenario) as fh:
        spec = json.load(fh)
    out = _out(args)
    if args.seed is not None:
        spec["seed"] = args.seed
    if spec.get("study") == "generate":
        truth = TruthSpec.from_dict(spec.get("truth", {}))
        data = generate(truth, int(spec["n"]), spec.get("seed", 0))
        data.to_wide_csv(out / "data.csv")
        print(f"wrote {data.n} subjects ({data.n_events} events) to {out / 'data.csv'}")
        return EXIT_OK
    result = run_scenario(spec)
    stem = result.name
    result.to_json(out / f"{stem}.json")
    result.summary_csv(out / f"{stem}_summary.csv")
    print(json.dumps(result.summary, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="frailtyreg", description="Proportional hazards frailty regression by profile likelihood.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_flags(sp):
        sp.add_argument("--family", choices=["gamma", "ig", "igg", "lognormal"], default="gamma")
        sp.add_argument("--alpha", type=float, default=None, help="IGG index (igg family only)")
        sp.add_argument("--gamma-min", type=float, default=0.0)
        sp.add_argument("--gamma-max", type=float, default=10.0)
        sp.add_argument("--gamma-fixed", type=float, default=None, help="freeze gamma (0 gives the Cox model)")
        sp.add_argument("--allow-negative-gamma", action="store_true")
        sp.add_argument("--constraint", choices=["free", "nonneg-cox-fallback"], default="free")
        sp.add_argument("--mh-steps", type=int, default=2000)
        sp.add_argument("--seed", type=int, default=0)

    def data_flags(sp, required=True):
        sp.add_argument("--input", required=required,
                        help="wide (time,status,...) or long (id,start,stop,status,...) csv")
        sp.add_argument("--tau", type=float, default=None)
        sp.add_argument("--out", default=".")

    sp = sub.add_parser("fit", help="fit a frailty (or Cox) model")
    data_flags(sp)
    model_flags(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("bootstrap", help="weighted bootstrap and Wald table")
    data_flags(sp)
    model_flags(sp)
    sp.add_argument("--fit", help="reuse a fit.json instead of refitting")
    sp.add_argument("--B", type=int, default=200)
    sp.add_argument("--weights", choices=["dirichlet", "multinomial"], default="dirichlet")
    sp.add_argument("--jobs", type=int, default=0, help="worker processes (0 = all cores)")
    sp.set_defaults(func=cmd_bootstrap)

    sp = sub.add_parser("predict", help="covariate-specific survival with a simultaneous band")
    sp.add_argument("--fit")
    sp.add_argument("--bootstrap")
    sp.add_argument("--z", required=True, help="comma-separated covariate vector")
    sp.add_argument("--grid", help="number of equally spaced times on [0, tau] or a comma list")
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--tau", type=float, default=None)
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("km", help="Kaplan-Meier curves")
    data_flags(sp)
    sp.add_argument("--group", help="covariate defining groups")
    sp.set_defaults(func=cmd_km)

    sp = sub.add_parser("marginal", help="model-based marginal survival by group, with Cox and Kaplan-Meier")
    data_flags(sp)
    model_flags(sp)
    sp.add_argument("--fit")
    sp.add_argument("--group")
    sp.add_argument("--grid")
    sp.set_defaults(func=cmd_marginal)

    sp = sub.add_parser("score-test", help="bootstrap score test of gamma = 0")
    data_flags(sp)
    model_flags(sp)
    sp.add_argument("--B", type=int, default=200)
    sp.add_argument("--weights", choices=["dirichlet", "multinomial"], default="dirichlet")
    sp.set_defaults(func=cmd_score_test)

    sp = sub.add_parser("simulate", help="run a simulation scenario from a JSON file")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if hasattr(args, "weights"):
        args.weights = {"dirichlet": "dirichlet_exponential"}.get(args.weights, args.weights)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UnfittableError, SolverError, BootstrapError, ArithmeticError) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
