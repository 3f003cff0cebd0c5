"""Command-line front end.

Release commands (``estimate``, ``interval``) read a ``y,w`` CSV and print a
JSON record; table commands (``feasibility``, ``mse-curve``, ``simulate``)
print long-format CSV. Every output echoes the resolved configuration and
seed. Errors go to stderr as a JSON object; exit code 2 marks invalid input
or configuration, 3 a domain error raised while computing.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from typing import Optional

import numpy as np

from .algorithms import DiscrepancySignPolicy, dp_confidence_interval, dp_regularized_estimate
from .core import Bounds, DomainError, SurveySample, ValidationError, optimal_lambda
from .mechanisms import PrivacyBudget, RandomSource
from .simulate import (
    ExperimentConfig,
    PopulationSpec,
    run_coverage_experiment,
    run_feasibility_grid,
    run_lambda_distribution,
    run_mse_curves,
)

EXIT_OK, EXIT_VALIDATION, EXIT_DOMAIN = 0, 2, 3
SEED_ENV = "DPSURVEY_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- ingestion ---------------------------------------------------------


def ingest_csv(path: str, bounds: Bounds, pop_size: float, clip: bool = False):
    """Read a ``y,w`` CSV into a validated sample.

    Data rows are numbered from 1. Without ``clip`` any out-of-bounds row is
    an error naming the rows; with ``clip`` values are clamped to the bounds.
    Returns ``(sample, n_clipped)``.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise ValidationError("missing header row y,w")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in ("y", "w") if c not in header]
    if missing:
        raise ValidationError(f"missing column(s): {', '.join(missing)}")
    iy, iw = header.index("y"), header.index("w")

    ys, ws, bad = [], [], []
    for k, row in enumerate((r for r in rows[1:] if any(c.strip() for c in r)), start=1):
        try:
            y, w = float(row[iy]), float(row[iw])
        except (ValueError, IndexError):
            raise ValidationError(f"row {k}: non-numeric or missing field") from None
        if not (math.isfinite(y) and math.isfinite(w)):
            raise ValidationError(f"row {k}: non-finite value")
        if not (bounds.l_y <= y <= bounds.u_y and bounds.l_w <= w <= bounds.u_w):
            bad.append(k)
        ys.append(y)
        ws.append(w)
    if not ys:
        raise ValidationError("no records")

    n_clipped = 0
    if bad:
        if not clip:
            shown = ", ".join(str(k) for k in bad[:20]) + (" ..." if len(bad) > 20 else "")
            raise ValidationError(f"values outside the declared bounds in row(s) {shown}")
        n_clipped = len(bad)
        ys = np.clip(ys, bounds.l_y, bounds.u_y)
        ws = np.clip(ws, bounds.l_w, bounds.u_w)
    return SurveySample(ys, ws, pop_size, bounds), n_clipped


# --- output ------------------------------------------------------------


def _json(obj) -> str:
    """JSON with floats written to 17 significant digits; NaN and infinities become null."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_json(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format(x, ".17g") if math.isfinite(x) else "null"
    return json.dumps(str(obj))


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (dict, list, tuple)):
        return _json(v)
    return "" if v is None else str(v)


def _csv(rows, echo: Optional[dict] = None) -> str:
    buf = io.StringIO()
    if echo is not None:
        buf.write(f"# config: {_json(echo)}\n")
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})
    return buf.getvalue()


def _emit_record(record: dict, fmt: str) -> str:
    if fmt == "csv":
        return _csv([record])
    return _json(record) + "\n"


def _emit_table(rows: list, echo: dict, fmt: str) -> str:
    if fmt == "json":
        return _json({"config_echo": echo, "rows": rows}) + "\n"
    return _csv(rows, echo)


# --- argument handling -------------------------------------------------


def _float_list(text: str):
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_common(p, table: bool):
    p.add_argument("--config", help="flat key=value file; keys are flag names without dashes; flags win")
    p.add_argument("--seed", type=int, help=f"master seed (fallback: ${SEED_ENV}; otherwise drawn and echoed)")
    p.add_argument("--format", choices=("json", "csv"), default="csv" if table else "json")


def _add_release_args(p, interval: bool):
    p.add_argument("--input", help="CSV file with header y,w")
    p.add_argument("--pop-size", type=float, help="population size N")
    p.add_argument("--ly", type=float, default=0.0)
    p.add_argument("--uy", type=float)
    p.add_argument("--lw", type=float, default=1.0)
    p.add_argument("--uw", type=float)
    p.add_argument("--rho1", type=float, help="zCDP budget for selecting lambda")
    p.add_argument("--rho2", type=float, help="zCDP budget for the mean release")
    if interval:
        p.add_argument("--rho3", type=float, help="zCDP budget for the variance release")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--alpha-v", type=float, default=0.05)
    p.add_argument("--sign", default="unknown", help="pos, neg, unknown or dp:<rho>")
    p.add_argument("--clip", action="store_true", help="clamp out-of-bounds rows instead of rejecting them")
    p.add_argument("--unsafe-debug", action="store_true", help="also print confidential intermediates; output is NOT private")
    _add_common(p, table=False)


def _add_population_args(p):
    p.add_argument("--model", choices=("psid", "binary", "bounded"), default="psid")
    p.add_argument("--pop-size", type=int, default=100_000)
    p.add_argument("--expected-n", type=float, default=1_000.0)
    p.add_argument("--uw", type=float, default=500.0)
    p.add_argument("--beta", type=float, default=0.5, help="selection elasticity (psid: starting value)")
    p.add_argument("--target-corr", type=float, default=0.0)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--uy", type=float, default=1.0, help="response bound for the bounded model")
    p.add_argument("--variable", help="response variable (psid: inc3, pov, bern)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpsurvey", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("estimate", help="private point estimate; JSON keys lambda_hat, theta_dp, noise_sd, plugin_adjusted, rho_spent, seed, config_echo")
    _add_release_args(p, interval=False)

    p = sub.add_parser("interval", help="private confidence interval; adds v_dp, lower, upper, alpha, alpha_v")
    _add_release_args(p, interval=True)

    p = sub.add_parser("feasibility", help="minimum feasible discrepancy; columns N,n,ratio,u_w,rho,u_y,min_awd")
    p.add_argument("--pop-sizes", type=_float_list, default=(1.29e8,))
    p.add_argument("--ns", type=_float_list, default=(1e3, 1e4))
    p.add_argument("--ratios", type=_float_list, default=(10.0, 100.0, 1e3, 1e4), help="u_w / (N/n)")
    p.add_argument("--rhos", type=_float_list, default=(1e-3, 1e-2, 1e-1, 1.0))
    p.add_argument("--uy", type=float, default=1.0)
    _add_common(p, table=True)

    p = sub.add_parser("mse-curve", help="DP MSE over lambda; columns variable,rho2,lambda,mse,noise_to_signal,relative,lambda_star")
    _add_population_args(p)
    p.add_argument("--rho2s", type=_float_list, default=(1e-3, 1e-2, 1e-1))
    p.add_argument("--lambda-points", type=int, default=101)
    _add_common(p, table=True)

    p = sub.add_parser(
        "simulate",
        help="coverage: variable,rho1,rho2,rho3,alpha,alpha_v,replicates,coverage,coverage_pop,"
        "nondp_coverage,nondp_coverage_pop,mean_width_ratio,rejected_samples,rho_spent; "
        "lambda: variable,rho1,rho2,lambda_star,mean_lambda,q05..q95,awd,mean_dminus,median_dminus,rho_spent",
    )
    _add_population_args(p)
    p.add_argument("--experiment", choices=("coverage", "lambda"), default="coverage")
    p.add_argument("--rho1s", type=_float_list, default=(1e-3, 1e-2, 1e-1))
    p.add_argument("--rho2s", type=_float_list, default=(1e-3, 1e-2, 1e-1))
    p.add_argument("--rho3s", type=_float_list, default=(1e-3, 1e-2, 1e-1))
    p.add_argument("--alphas", type=_float_list, default=(0.05,))
    p.add_argument("--alpha-vs", type=_float_list, default=(0.05,))
    p.add_argument("--replicates", type=int, default=1000)
    _add_common(p, table=True)
    return parser


def _read_config(path: str) -> dict:
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    for k, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"config line {k}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.lstrip("-")] = value
    return values


def _apply_config(subparser: argparse.ArgumentParser, values: dict) -> None:
    actions = {a.option_strings[0].lstrip("-"): a for a in subparser._actions if a.option_strings}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise ValidationError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[action.dest] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ValidationError(f"config key {key!r}: {exc}") from None
        if action.choices and value not in action.choices:
            raise ValidationError(f"config key {key!r}: must be one of {list(action.choices)}")
        defaults[action.dest] = value
    subparser.set_defaults(**defaults)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a command is required: estimate, interval, feasibility, mse-curve or simulate")
    if args.config:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(subparser, _read_config(args.config))
        args = parser.parse_args(argv)
    return args


def _resolve_seed(args) -> int:
    if args.seed is not None:
        seed = args.seed
    elif os.environ.get(SEED_ENV, "").strip():
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ValidationError(f"{SEED_ENV} must be an integer") from None
    else:
        seed = int(np.random.SeedSequence().entropy % 2**63)
    if seed < 0:
        raise ValidationError("seed must be non-negative")
    return seed


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise ValidationError(f"missing required setting(s): {flags}")


def _echo(args, seed: int, skip=("config", "command")) -> dict:
    echo = {"command": args.command}
    for k, v in sorted(vars(args).items()):
        if k not in skip:
            echo[k] = list(v) if isinstance(v, tuple) else v
    echo["seed"] = seed
    return echo


# --- commands ----------------------------------------------------------


def _load_release_inputs(args):
    _require(args, "input", "pop_size", "uy", "uw", "rho1", "rho2")
    bounds = Bounds(args.ly, args.uy, args.lw, args.uw)
    try:
        policy = DiscrepancySignPolicy.parse(args.sign)
    except DomainError as exc:
        raise ValidationError(str(exc)) from None
    sample, n_clipped = ingest_csv(args.input, bounds, args.pop_size, clip=args.clip)
    if n_clipped:
        # operator-facing diagnostic; not part of the release
        print(_json({"warning": {"clipped_rows": n_clipped}}), file=sys.stderr)
    return sample, policy


def _debug_fields(sample: SurveySample, rho2: float) -> dict:
    canon = sample.canonical()
    summary = canon.summary()
    star = optimal_lambda(summary, canon.bounds, canon.pop_size, canon.n, rho2).lambda_star
    return {
        "theta_w": summary.theta_w + sample.bounds.l_y,
        "theta_0": summary.theta_0 + sample.bounds.l_y,
        "awd": summary.awd,
        "lambda_star": star,
        "n": sample.n,
    }


def cmd_estimate(args) -> str:
    seed = _resolve_seed(args)
    sample, policy = _load_release_inputs(args)
    rel = dp_regularized_estimate(sample, args.rho1, args.rho2, RandomSource(seed), policy)
    record = {
        "lambda_hat": rel.lambda_hat,
        "theta_dp": rel.theta_dp,
        "noise_sd": rel.noise_sd,
    }
    if rel.plugin_adjusted is not None:
        record["plugin_adjusted"] = rel.plugin_adjusted
    record.update(rho_spent=rel.rho_spent, seed=seed, config_echo=_echo(args, seed))
    if args.unsafe_debug:
        record["debug"] = _debug_fields(sample, args.rho2)
        record["dp"] = False
    return _emit_record(record, args.format)


def cmd_interval(args) -> str:
    seed = _resolve_seed(args)
    _require(args, "rho3")
    sample, policy = _load_release_inputs(args)
    budget = PrivacyBudget(args.rho1, args.rho2, args.rho3)
    ci = dp_confidence_interval(sample, budget, args.alpha, args.alpha_v, RandomSource(seed), policy)
    rel = ci.release
    record = {"lambda_hat": rel.lambda_hat, "theta_dp": rel.theta_dp, "noise_sd": rel.noise_sd}
    if rel.plugin_adjusted is not None:
        record["plugin_adjusted"] = rel.plugin_adjusted
    record.update(
        v_dp=ci.v_dp,
        lower=ci.lower,
        upper=ci.upper,
        alpha=ci.alpha,
        alpha_v=ci.alpha_v,
        rho_spent=ci.rho_spent,
        seed=seed,
        config_echo=_echo(args, seed),
    )
    if args.unsafe_debug:
        record["debug"] = _debug_fields(sample, args.rho2)
        record["dp"] = False
    return _emit_record(record, args.format)


def cmd_feasibility(args) -> str:
    rows = run_feasibility_grid(args.pop_sizes, args.ns, args.ratios, args.rhos, args.uy)
    seed = args.seed if args.seed is not None else 0
    echo = _echo(args, seed)
    echo["rho_spent"] = 0.0
    return _emit_table(rows, echo, args.format)


def _population_spec(args) -> PopulationSpec:
    if args.model == "psid":
        return PopulationSpec.psid_like(pop_size=args.pop_size, expected_n=args.expected_n, u_w=args.uw, beta=args.beta)
    return PopulationSpec(
        pop_size=args.pop_size,
        expected_n=args.expected_n,
        u_w=args.uw,
        response=args.model,
        beta=args.beta,
        target_corr=args.target_corr,
        p=args.p,
        u_y=args.uy,
    )


def cmd_mse_curve(args) -> str:
    seed = _resolve_seed(args)
    config = ExperimentConfig(
        population=_population_spec(args),
        rho2s=args.rho2s,
        master_seed=seed,
        variable=args.variable,
        lambda_grid_points=args.lambda_points,
    )
    rows = run_mse_curves(config)
    echo = _echo(args, seed)
    echo["rho_spent"] = 0.0
    return _emit_table(rows, echo, args.format)


def cmd_simulate(args) -> str:
    seed = _resolve_seed(args)
    config = ExperimentConfig(
        population=_population_spec(args),
        rho1s=args.rho1s,
        rho2s=args.rho2s,
        rho3s=args.rho3s,
        alphas=args.alphas,
        alpha_vs=args.alpha_vs,
        replicates=args.replicates,
        master_seed=seed,
        variable=args.variable,
    )
    if args.experiment == "coverage":
        rows = run_coverage_experiment(config)
        for row in rows:
            row["rho_spent"] = PrivacyBudget(row["rho1"], row["rho2"], row["rho3"]).total()
    else:
        rows = run_lambda_distribution(config).rows
        for row in rows:
            row["rho_spent"] = row["rho1"]
    return _emit_table(rows, _echo(args, seed), args.format)


COMMANDS = {
    "estimate": cmd_estimate,
    "interval": cmd_interval,
    "feasibility": cmd_feasibility,
    "mse-curve": cmd_mse_curve,
    "simulate": cmd_simulate,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(_json({"error": {"type": kind, "message": message, "exit_code": code}}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        out = COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("UsageError", str(exc), EXIT_VALIDATION)
    except ValidationError as exc:
        return _fail("ValidationError", str(exc), EXIT_VALIDATION)
    except (DomainError, ArithmeticError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_DOMAIN)
    sys.stdout.write(out)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
