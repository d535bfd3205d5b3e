"""Command-line interface.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
Errors are also written to stderr as a JSON object.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

import numpy as np

from . import estimands as est
from . import panel as pnl
from .exceptions import NumericalError, StaggeredError, ValidationError
from .inference import PRESETS, Plan, _to_jsonable, balance_test, event_study, infer
from .montecarlo import load_config, run_mc


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_data_args(p):
    p.add_argument("input", help="long-format panel CSV (unit,period,first_treated,outcome[,cluster,stratum])")
    p.add_argument("--cluster-col", default=None, help="cluster column; assignment is collapsed to clusters")
    p.add_argument("--stratum-col", default=None, help="stratum column; permutations stay within strata")
    p.add_argument("--exclude-units", metavar="FILE", default=None, help="file with one unit id per line to drop")
    p.add_argument("--aggregate-time", metavar="K", type=int, default=None, help="average blocks of K periods")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: STAGGERED_THREADS or CPU count)")
    p.add_argument("--output", "-o", default=None, help="write the report here instead of stdout")


def _add_model_args(p, estimand=True):
    if estimand:
        p.add_argument("--estimand", default="simple",
                       choices=list(est.ESTIMAND_KINDS) + ["custom"])
        p.add_argument("--lag", type=int, default=None, help="lag for --estimand event_study")
        p.add_argument("--t", dest="t_label", type=int, default=None, help="period label for time / att_tg")
        p.add_argument("--g", dest="g_label", type=int, default=None, help="cohort label for group / att_tg")
        p.add_argument("--estimand-file", default=None, help="CSV t,g,g_prime,weight for --estimand custom")
    p.add_argument("--comparison", default="auto", choices=list(est.COMPARISONS))
    p.add_argument("--adjustment", default="cs_scalar", choices=list(est.ADJUSTMENT_KINDS) + ["custom"])
    p.add_argument("--adjustment-file", default=None, help="CSV [row,]t,g,g_prime,weight for --adjustment custom")
    p.add_argument("--preset", default="plugin", choices=list(PRESETS))
    p.add_argument("--alpha", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="staggered", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="point estimate, standard errors and interval (JSON)")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--frt-draws", type=int, default=0, help="randomization test draws (0 = skip)")

    p = sub.add_parser("frt", help="studentized randomization test (JSON)")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--frt-draws", type=int, default=500)

    p = sub.add_parser("event-study", help="event-study estimates with sup-t band (CSV)")
    _add_data_args(p)
    _add_model_args(p, estimand=False)
    p.add_argument("--lags", type=_int_list, default=[0])
    p.add_argument("--leads", type=_int_list, default=[])
    p.add_argument("--frt-draws", type=int, default=0)

    p = sub.add_parser("balance", help="pre-treatment balance tests (JSON)")
    _add_data_args(p)
    p.add_argument("--adjustment", default="all_pairs", choices=["all_pairs", "cs_scalar", "custom"])
    p.add_argument("--adjustment-file", default=None)
    p.add_argument("--estimand", default="simple", choices=list(est.ESTIMAND_KINDS))
    p.add_argument("--lag", type=int, default=None)
    p.add_argument("--comparison", default="auto", choices=list(est.COMPARISONS))
    p.add_argument("--frt-draws", type=int, default=500)

    p = sub.add_parser("simulate", help="Monte Carlo run from a key=value spec file (CSV)")
    p.add_argument("spec", help="spec file")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--frt-draws", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--output", "-o", default=None)
    return parser


def _load(args):
    exclude = pnl.read_unit_list(args.exclude_units) if args.exclude_units else None
    panel = pnl.load_panel(
        args.input,
        cluster_col=args.cluster_col or "cluster",
        stratum_col=args.stratum_col or "stratum",
        exclude_units=exclude,
    )
    if panel.cluster_id is not None:
        panel = pnl.collapse_clusters(panel)
    if args.aggregate_time:
        panel = pnl.aggregate_time(panel, args.aggregate_time)
    return panel


def _plan(args, panel):
    t = panel.period_index(args.t_label) if getattr(args, "t_label", None) is not None else None
    g = float(panel.period_index(args.g_label)) if getattr(args, "g_label", None) is not None else None
    estimand = getattr(args, "estimand", "simple")
    if args.adjustment == "custom" and not args.adjustment_file:
        raise ValidationError("--adjustment custom needs --adjustment-file")
    if estimand == "custom" and not args.estimand_file:
        raise ValidationError("--estimand custom needs --estimand-file")
    if estimand != "custom" and args.adjustment != "custom":
        return Plan(estimand=estimand, lag=args.lag, t=t, g=g, comparison=args.comparison,
                    adjustment=args.adjustment, preset=args.preset)
    base = Plan(estimand="simple" if estimand == "custom" else estimand, lag=args.lag, t=t, g=g,
                comparison=args.comparison,
                adjustment="cs_scalar" if args.adjustment == "custom" else args.adjustment,
                preset="plugin" if args.preset == "plugin" else "dim")

    def build(p):
        w = est.load_custom_estimand(p, args.estimand_file) if estimand == "custom" else base.weights(p)
        if args.adjustment == "custom":
            adj = est.load_custom_adjustment(p, args.adjustment_file)
        else:
            adj = est.build_adjustment(args.adjustment, w, p)
        if args.preset == "plugin":
            return w, adj, "plugin"
        if args.preset == "dim":
            return w, adj, np.zeros((adj.dim, w.n_components))
        if adj.preset_beta is None:
            raise ValidationError(f"preset {args.preset!r} is not defined for a custom adjustment")
        return w, adj, np.array(adj.preset_beta)

    return build


def _dump(obj) -> str:
    return json.dumps(_to_jsonable(obj), indent=2, allow_nan=False) + "\n"


def _write(text, path):
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_estimate(args) -> int:
    panel = _load(args)
    res = infer(panel, _plan(args, panel), alpha=args.alpha, frt_draws=args.frt_draws,
                seed=args.seed, threads=args.threads)
    _write(_dump(res.to_dict()), args.output)
    return 0


def cmd_event_study(args) -> int:
    panel = _load(args)
    res = event_study(panel, args.lags, args.leads, comparison=args.comparison, adjustment=args.adjustment,
                      preset=args.preset, alpha=args.alpha, frt_draws=args.frt_draws, seed=args.seed,
                      threads=args.threads)
    _write(res.to_frame().to_csv(index=False, float_format="%.17g", lineterminator="\n"), args.output)
    return 0


def cmd_balance(args) -> int:
    panel = _load(args)
    if args.adjustment == "custom":
        if not args.adjustment_file:
            raise ValidationError("--adjustment custom needs --adjustment-file")
        adj = est.load_custom_adjustment(panel, args.adjustment_file)
    else:
        w = est.build_estimand(args.estimand, panel, lag=args.lag, comparison=args.comparison)
        adj = est.build_adjustment(args.adjustment, w, panel)
    res = balance_test(panel, adj, draws=args.frt_draws, seed=args.seed, threads=args.threads)
    _write(_dump(res.to_dict()), args.output)
    return 0


def cmd_simulate(args) -> int:
    spec, cfg = load_config(args.spec)
    over = {k: v for k, v in (("reps", args.reps), ("seed", args.seed), ("frt_draws", args.frt_draws),
                              ("threads", args.threads)) if v is not None}
    if over:
        cfg = type(cfg)(**{**cfg.__dict__, **over})
    if args.seed is not None:
        spec = type(spec)(**{**spec.__dict__, "seed": args.seed})
    res = run_mc(spec, cfg)
    _write(res.to_csv(lineterminator="\n"), args.output)
    return 0


COMMANDS = {
    "estimate": cmd_estimate,
    "frt": cmd_estimate,
    "event-study": cmd_event_study,
    "balance": cmd_balance,
    "simulate": cmd_simulate,
}


def _fail(kind, exc, code):
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            code = COMMANDS[args.command](args)
        for w in caught:
            sys.stderr.write(f"warning: {w.message}\n")
        return code
    except ValidationError as exc:
        return _fail("validation", exc, 2)
    except NumericalError as exc:
        return _fail("numerical", exc, 3)
    except StaggeredError as exc:
        return _fail("error", exc, 2)
    except (OSError, UnicodeDecodeError) as exc:
        return _fail("validation", exc, 2)


if __name__ == "__main__":
    sys.exit(main())
