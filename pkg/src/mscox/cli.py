"""Command-line interface: ``mscox <subcommand> ...``.

Exit codes are 0 on success, 2 for invalid input and 3 for numerical
failures (including a non-converged fit without ``--allow-partial``).
Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from .bench import run_benchmark
from .cumhaz import msfit_generic, patient_rows
from .dataset import (
    REQUIRED_COLUMNS,
    PriorGrouping,
    TransitionStructure,
    expand_covariates,
    load_long_csv,
    write_long_csv,
)
from .empbayes import fit_to_dict, load_fit, save_fit
from .exceptions import MultiStateError, NumericalError, ValidationError
from .occupancy import discretize_kernels, probtrans_aj, probtrans_direct, probtrans_fft
from .resample import MODELS, TARGETS, Pipeline, bootstrap, loo_predictions
from .simulate import STRUCTURES, SimSpec, full_grid, named_structure, run_study, \
    simulate_cohort, summarize_study

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


class NotConvergedExit(NumericalError):
    """A fit did not converge and partial results were not allowed."""


def _scale(value: str) -> str:
    v = value.replace("-", "_")
    if v not in ("clock_reset", "clock_forward"):
        raise argparse.ArgumentTypeError("scale must be clock-reset or clock-forward")
    return v


def _positive_int(value: str) -> int:
    v = int(value)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _existing(value: str) -> Path:
    p = Path(value)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"file not found: {value}")
    return p


def _load_data(args):
    structure = TransitionStructure.from_json(args.structure)
    data = load_long_csv(args.data, structure)
    if args.expand and data.covariates:
        data = expand_covariates(data)
    grouping = PriorGrouping.from_json(args.groups) if args.groups else None
    return data, grouping


def _pipeline(args, grouping) -> Pipeline:
    return Pipeline(args.model, args.scale, grouping, K=args.K, t_max=args.t_max,
                    method=getattr(args, "method", None))


def _patient_values(path) -> dict:
    frame = pd.read_csv(path)
    if frame.empty:
        raise ValidationError("patient file has no rows")
    row = frame.iloc[0]
    return {c: float(row[c]) for c in frame.columns if c not in REQUIRED_COLUMNS}


def _patient_frame(fit, path) -> pd.DataFrame:
    """Patient CSV as model rows: either one row per transition or one row of values."""
    frame = pd.read_csv(path)
    if "trans" in frame.columns:
        if "strata" not in frame.columns:
            frame["strata"] = frame["trans"].map(fit.trans_strata_)
        return frame
    return patient_rows(fit, _patient_values(path))


def _check_converged(fit, args):
    if not fit.converged_ and not args.allow_partial:
        raise NotConvergedExit("fit did not converge; rerun with --allow-partial to keep it")


def _out(path, default) -> Path:
    p = Path(path) if path else Path(default)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args):
    data, grouping = _load_data(args)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = Pipeline(args.model, args.scale, grouping).fit(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_fit(fit, out / "fit.json")
    d = fit_to_dict(fit)
    pd.DataFrame({"column": list(d["beta"]), "beta": list(d["beta"].values()),
                  "group": [d.get("group_of", {}).get(c, "") for c in d["beta"]]}
                 ).to_csv(out / "coefficients.csv", index=False)
    _check_converged(fit, args)


def cmd_msfit(args):
    fit = load_fit(args.fit)
    bundle = msfit_generic(fit, _patient_frame(fit, args.patient))
    bundle.to_csv(_out(args.out, "cumhaz.csv"))


def cmd_probtrans(args):
    fit = load_fit(args.fit)
    if args.method == "aj" and fit.scale_ == "clock_reset":
        raise ValidationError("--method aj needs a clock-forward fit")
    if args.method != "aj" and fit.scale_ != "clock_reset":
        raise ValidationError(f"--method {args.method} needs a clock-reset fit")
    bundle = msfit_generic(fit, _patient_frame(fit, args.patient))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if args.method == "aj":
            grid = probtrans_aj(bundle, args.initial_state, K=args.K, t_max=args.t_max)
        else:
            kernels = discretize_kernels(bundle, args.K, args.t_max)
            est = probtrans_fft if args.method == "fft" else probtrans_direct
            grid = est(kernels, args.initial_state)
    grid.to_csv(_out(args.out, "occupancy.csv"))
    if args.plot_dir:
        plot = Path(args.plot_dir)
        plot.mkdir(parents=True, exist_ok=True)
        for s in range(1, grid.probs.shape[0] + 1):
            pd.DataFrame({"time": grid.times, "probability": grid.state(s)}).to_csv(
                plot / f"state_{s}.csv", index=False)


def cmd_boot(args):
    data, grouping = _load_data(args)
    res = bootstrap(data, _patient_values(args.patient), _pipeline(args, grouping),
                    targets=args.targets, B=args.B, level=args.level, seed=args.seed,
                    n_jobs=args.threads)
    res.to_frame().to_csv(_out(args.out, "intervals.csv"), index=False)
    print(json.dumps({"B": res.B, "n_failed": res.n_failed, "level": res.level}))


def cmd_loo(args):
    data, grouping = _load_data(args)
    ids = [int(i) for i in args.ids.split(",")] if args.ids else None
    res = loo_predictions(data, _pipeline(args, grouping), ids, n_jobs=args.threads)
    order = res.order_by_survival(args.order_time) if res.grids else []
    parts = []
    for rank, pid in enumerate(order, 1):
        f = res.grids[pid].to_frame()
        f.insert(0, "rank", rank)
        f.insert(0, "id", pid)
        parts.append(f)
    table = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame()
    table.to_csv(_out(args.out, "loo.csv"), index=False)
    print(json.dumps({"n_ok": len(res.grids),
                      "failures": {str(k): v for k, v in res.failures.items()}}))


def cmd_simulate(args):
    structure = named_structure(args.structure_name)
    spec = SimSpec(structure, args.n, args.p, rates=args.rate, c_admin=args.c_admin,
                   censor_rate=args.censor_rate, seed=args.seed)
    data = simulate_cohort(spec)
    out = _out(args.out, "cohort.csv")
    write_long_csv(data, out)
    structure.to_json(out.with_name(out.stem + "_structure.json"))


def _parse_grid(text):
    if text == "full":
        return full_grid()
    grid = []
    for item in text.split(","):
        G, n, p = item.split(":")
        if G not in STRUCTURES:
            raise ValidationError(f"unknown structure {G!r}")
        grid.append((G, int(n), int(p)))
    return grid


def cmd_study(args):
    table = run_study(_parse_grid(args.grid), replicates=args.replicates, seed=args.seed,
                      K=args.K, c_admin=args.c_admin, n_jobs=args.threads)
    out = _out(args.out, "study.csv")
    table.to_csv(out, index=False)
    summarize_study(table).to_csv(out.with_name(out.stem + "_summary.csv"), index=False)


def cmd_bench(args):
    rows = run_benchmark(K=args.K, reference_paths=args.reference_paths, seed=args.seed,
                         repeats=args.repeats)
    _out(args.out, "bench.json").write_text(json.dumps(rows, indent=2))


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _data_args(p):
    p.add_argument("--data", type=_existing, required=True, help="long-format CSV")
    p.add_argument("--structure", type=_existing, required=True, help="structure JSON")
    p.add_argument("--groups", type=_existing, help="prior grouping JSON")
    p.add_argument("--scale", type=_scale, default="clock_reset")
    p.add_argument("--model", choices=MODELS, default="eb_cox")
    p.add_argument("--no-expand", dest="expand", action="store_false",
                   help="do not replicate covariates per transition")


def _grid_args(p, K=1000):
    p.add_argument("--K", type=_positive_int, default=K, help="grid intervals")
    p.add_argument("--t-max", type=float, default=None, help="grid horizon")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mscox", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=_positive_int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit a multi-state Cox model")
    _data_args(p)
    p.add_argument("--allow-partial", action="store_true")
    p.add_argument("--out", default="fit_out", help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("msfit", parents=[common], help="cumulative hazards of one patient")
    p.add_argument("--fit", type=_existing, required=True)
    p.add_argument("--patient", type=_existing, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_msfit)

    p = sub.add_parser("probtrans", parents=[common], help="state occupation probabilities")
    p.add_argument("--fit", type=_existing, required=True)
    p.add_argument("--patient", type=_existing, required=True)
    p.add_argument("--method", choices=("fft", "direct", "aj"), default="fft")
    p.add_argument("--initial-state", type=int, default=None)
    _grid_args(p, K=10_000)
    p.add_argument("--plot-dir", help="write one time/probability CSV per state")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probtrans)

    p = sub.add_parser("boot", parents=[common], help="bootstrap intervals")
    _data_args(p)
    p.add_argument("--patient", type=_existing, required=True)
    p.add_argument("--targets", nargs="+", choices=TARGETS, default=list(TARGETS))
    p.add_argument("--B", type=_positive_int, default=200)
    p.add_argument("--level", type=float, default=0.95)
    _grid_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_boot)

    p = sub.add_parser("loo", parents=[common], help="leave-one-out occupancy")
    _data_args(p)
    p.add_argument("--ids", help="comma-separated patient ids (default: all)")
    p.add_argument("--order-time", type=float, default=5.0,
                   help="rank patients by survival at this time")
    _grid_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("simulate", parents=[common], help="simulate a clock-reset cohort")
    p.add_argument("--structure-name", choices=list(STRUCTURES), default="linear")
    p.add_argument("--n", type=_positive_int, default=100)
    p.add_argument("--p", type=int, default=10)
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--c-admin", type=float)
    p.add_argument("--censor-rate", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", parents=[common], help="estimator-performance study")
    p.add_argument("--grid", default="linear:100:10,linear:100:40,"
                   "competing_risks:100:10,competing_risks:100:40",
                   help='comma-separated G:n:p triples, or "full" for the complete grid')
    p.add_argument("--replicates", type=_positive_int, default=50)
    p.add_argument("--K", type=_positive_int, default=7000)
    p.add_argument("--c-admin", type=float, default=10.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("bench", parents=[common], help="FFT versus path sampling")
    p.add_argument("--K", type=_positive_int, default=10_000)
    p.add_argument("--reference-paths", type=_positive_int, default=100_000)
    p.add_argument("--repeats", type=_positive_int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def _fail(exc, code):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    np.seterr(all="ignore")
    try:
        args.func(args)
    except (ValidationError, FileNotFoundError, KeyError, ValueError) as exc:
        return _fail(exc, EXIT_VALIDATION)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        return _fail(exc, EXIT_NUMERICAL)
    except MultiStateError as exc:
        return _fail(exc, EXIT_VALIDATION)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
