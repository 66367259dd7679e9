"""Command-line interface: ``skewmix {synth,fit,predict,eval,cv}``.

Exit codes: 0 success, 2 input error, 3 numerical error, 4 a fit did not
converge and ``--strict`` was given.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .dataio import (
    HUInterval,
    SynthSpec,
    concat_tables,
    default_truth,
    labels_path,
    load_table,
    planted_cohort,
    save_labels,
    save_table,
    synth_generate,
    two_regime_truth,
)
from .errors import InputError, NumericalError, SkewMixError
from .mixture import FitConfig, MixtureModel, fit
from .modelio import load_model, save_model
from .predictor import (
    PartitionedModel,
    PartitionSpec,
    predict_partitioned,
    predict_volume,
    select_k,
    train_partitioned,
)

EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_CONVERGENCE = 4

VARIANT_FLAGS = {"sgmm": "skew", "gmm": "gaussian"}
# name -> (variant, partitioned)
CV_MODELS = {
    "sgmm": ("skew", True),
    "gmm": ("gaussian", True),
    "sgmm-full": ("skew", False),
    "gmm*": ("gaussian", False),
}


class NotConverged(SkewMixError):
    pass


def _int_list(text):
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("K values must be positive")
    return vals


def _interval(text):
    try:
        return HUInterval.parse(text)
    except InputError as err:
        raise argparse.ArgumentTypeError(str(err))


def _add_fit_options(p):
    g = p.add_argument_group("fitting")
    k = g.add_mutually_exclusive_group()
    k.add_argument("--k", type=int, default=None, help="number of components (default 3)")
    k.add_argument("--k-grid", type=_int_list, default=None,
                   help="comma-separated K values, chosen by held-out CT mean squared error")
    g.add_argument("--k-part", type=int, default=None,
                   help="components of the tissue models (default: same as --k)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--restarts", type=int, default=1)
    g.add_argument("--tol", type=float, default=5e-5, help="max |delta gamma| stopping tolerance")
    g.add_argument("--param-tol", type=float, default=1e-5,
                   help="whitened parameter-step tolerance; 0 disables it")
    g.add_argument("--max-iter", type=int, default=1000)
    g.add_argument("--ridge", type=float, default=1e-6)
    g.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $SKEWMIX_THREADS or 1)")
    g.add_argument("--strict", action="store_true",
                   help="exit with code 4 if any fit stops at --max-iter")
    g.add_argument("--train-nonbone", type=_interval, default=None, metavar="INTERVAL",
                   help='non-bone training interval, e.g. "(-1024,200)"')
    g.add_argument("--train-bone", type=_interval, default=None, metavar="INTERVAL",
                   help='bone training interval, e.g. "(100,3071]"')
    g.add_argument("--threshold", type=float, default=None,
                   help="routing threshold on the stage-1 prediction (HU)")


def _add_table_options(p):
    p.add_argument("--clamp", action="store_true", help="clamp CT into [-1024, 3071]")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="skewmix",
        description="Skew-normal mixture models for CT prediction from MR.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample synthetic voxel tables from a planted model")
    p.add_argument("--out", required=True, type=Path,
                   help="output CSV; with --heads > 1, a directory of head CSVs")
    p.add_argument("--n", type=int, default=10000, help="voxels per table")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--d", type=int, default=5, help="dimension: 1 CT + (d-1) MR channels")
    p.add_argument("--variant", choices=sorted(VARIANT_FLAGS), default="sgmm")
    p.add_argument("--truth", type=Path, default=None, help="mixture model file to sample from")
    p.add_argument("--two-regime", action="store_true",
                   help="use the planted soft-tissue/bone truth model")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("fit", help="fit a mixture or a partitioned model")
    p.add_argument("--input", required=True, nargs="+", type=Path, help="training CSV tables")
    p.add_argument("--out", required=True, type=Path, help="model file")
    p.add_argument("--variant", choices=sorted(VARIANT_FLAGS), default="sgmm")
    p.add_argument("--partitioned", action="store_true",
                   help="fit full, non-bone and bone models for two-stage prediction")
    p.add_argument("--trace", type=Path, default=None, help="write the EM trace (TSV)")
    _add_fit_options(p)
    _add_table_options(p)

    p = sub.add_parser("predict", help="predict CT for the voxels of a table")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="CSV with columns ct,pred[,route]")
    p.add_argument("--threads", type=int, default=None)
    _add_table_options(p)

    p = sub.add_parser("eval", help="predict and evaluate against the table's CT")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--window", type=float, default=20.0)
    p.add_argument("--threads", type=int, default=None)
    _add_table_options(p)

    p = sub.add_parser("cv", help="leave-one-head-out cross-validation")
    p.add_argument("--input", required=True, nargs="+", type=Path, help="one CSV per head")
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--models", default="sgmm",
                   help=f"comma-separated subset of {','.join(CV_MODELS)}; the first is the "
                        "reference for the rank test")
    p.add_argument("--window", type=float, default=20.0)
    _add_fit_options(p)
    _add_table_options(p)
    return parser


def _fit_config(args, variant, K):
    return FitConfig(
        K=K,
        variant=variant,
        max_iter=args.max_iter,
        stop_tol=args.tol,
        param_tol=args.param_tol or None,
        restarts=args.restarts,
        seed=args.seed,
        ridge=args.ridge,
        threads=args.threads,
    )


def _partition_spec(args):
    base = PartitionSpec()
    return PartitionSpec(
        args.train_nonbone or base.train_nonbone,
        args.train_bone or base.train_bone,
        base.predict_threshold if args.threshold is None else args.threshold,
    )


def _load_tables(paths, args):
    return [load_table(p, clamp=args.clamp) for p in paths]


def _check_converged(models, strict, out):
    bad = [name for name, m in models if not m.fit_info.get("converged", True)]
    for name in bad:
        print(f"warning: {name} model stopped at max_iter without converging", file=out)
    if bad and strict:
        raise NotConverged(f"not converged: {', '.join(bad)}")


def _summarize(name, model, out):
    info = model.fit_info
    print(
        f"{name}: K={model.K} d={model.d} variant={model.variant} "
        f"iterations={info.get('iterations', '?')} converged={info.get('converged', '?')} "
        f"final_delta={info.get('final_delta', float('nan')):.3g} "
        f"loglik={info.get('loglik', float('nan')):.6f}",
        file=out,
    )


def _choose_k(args, data, variant):
    if args.k_grid is None:
        return args.k or 3
    cfg = _fit_config(args, variant, args.k_grid[0])
    best, scores = select_k(data, args.k_grid, cfg, seed=args.seed)
    for K, mse in scores.items():
        print(f"K={K}: held-out MSE {mse:.4f}")
    print(f"selected K={best}")
    return best


def cmd_synth(args):
    if args.n < 1:
        raise InputError("--n must be >= 1")
    if args.heads < 1:
        raise InputError("--heads must be >= 1")
    if args.truth is not None:
        truth = load_model(args.truth)
        if not isinstance(truth, MixtureModel):
            raise InputError("--truth must hold a single mixture model")
    elif args.two_regime:
        truth = two_regime_truth(max(1, args.d - 1))
    else:
        truth = default_truth(args.k, args.d, args.seed, VARIANT_FLAGS[args.variant])
    if args.heads == 1:
        table, labels = synth_generate(SynthSpec(truth, args.n, args.seed), args.out.stem)
        save_table(args.out, table)
        save_labels(labels_path(args.out), labels)
        print(f"wrote {table.n} rows to {args.out}")
        return 0
    args.out.mkdir(parents=True, exist_ok=True)
    for table in planted_cohort(args.heads, args.n, args.seed, truth):
        path = args.out / f"{table.patient_id}.csv"
        save_table(path, table)
        print(f"wrote {table.n} rows to {path}")
    return 0


def cmd_fit(args):
    tables = _load_tables(args.input, args)
    train = concat_tables(tables, "train") if len(tables) > 1 else tables[0]
    variant = VARIANT_FLAGS[args.variant]
    K = _choose_k(args, train.data, variant)
    cfg = _fit_config(args, variant, K)
    if args.partitioned:
        cfg_part = replace(cfg, K=args.k_part or K)
        model = train_partitioned(train, _partition_spec(args), cfg, cfg_part)
        named = [("full", model.full), ("nonbone", model.nonbone), ("bone", model.bone)]
        trace = None
    else:
        model, trace = fit(train.data, cfg)
        named = [("model", model)]
    for name, m in named:
        _summarize(name, m, sys.stdout)
    save_model(args.out, model)
    if args.trace is not None and trace is not None:
        args.trace.write_text(trace.to_text(), encoding="utf-8")
    print(f"wrote {args.out}")
    _check_converged(named, args.strict, sys.stderr)
    return 0


def _predict(model, mr, threads):
    if isinstance(model, PartitionedModel):
        return predict_partitioned(mr, model, threads, return_routing=True)
    return predict_volume(mr, model, threads), None


def cmd_predict(args):
    model = load_model(args.model)
    table = load_table(args.input, clamp=args.clamp)
    if table.d != model.d:
        raise InputError(f"table has {table.d - 1} MR channels, model expects {model.d - 1}")
    pred, route = _predict(model, table.mr, args.threads)
    with args.out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ct", "pred"] + (["route"] if route is not None else []))
        for i in range(table.n):
            row = [f"{table.ct[i]:.10g}", repr(float(pred[i]))]
            if route is not None:
                row.append("bone" if route[i] else "nonbone")
            w.writerow(row)
    print(f"wrote {table.n} predictions to {args.out}")
    return 0


def _print_report(report, out=sys.stdout):
    for name in ev.EvalReport.METRICS:
        print(f"  {name:15s} {report.metric(name):10.3f}", file=out)


def _write_fold(out_dir, prefix, report):
    ev.write_report(out_dir / f"{prefix}_report.csv", report)
    ev.write_residual_curve(out_dir / f"{prefix}_residuals.csv", report.residual_curve)
    ev.write_bland_altman(out_dir / f"{prefix}_bland_altman.csv", report.bland_altman)


def cmd_eval(args):
    model = load_model(args.model)
    table = load_table(args.input, clamp=args.clamp)
    if table.d != model.d:
        raise InputError(f"table has {table.d - 1} MR channels, model expects {model.d - 1}")
    pred, _ = _predict(model, table.mr, args.threads)
    report = ev.evaluate_prediction(pred, table.ct, table.patient_id, args.window)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_fold(args.out_dir, table.patient_id or "eval", report)
    print(f"{table.patient_id}: n={report.n}")
    _print_report(report)
    return 0


def cmd_cv(args):
    names = [m.strip() for m in args.models.split(",") if m.strip()]
    unknown = [m for m in names if m not in CV_MODELS]
    if unknown or not names:
        raise InputError(f"unknown models {unknown}; choose from {','.join(CV_MODELS)}")
    if len(set(names)) != len(names):
        raise InputError("duplicate model names in --models")
    tables = _load_tables(args.input, args)
    if len(tables) < 2:
        raise InputError("cv needs at least two input tables")
    for i, t in enumerate(tables):
        if not t.patient_id:
            object.__setattr__(t, "patient_id", f"head{i + 1}")
    if len({t.patient_id for t in tables}) != len(tables):
        for i, t in enumerate(tables):
            object.__setattr__(t, "patient_id", f"{t.patient_id}#{i + 1}")
    spec = _partition_spec(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for name in names:
        variant, partitioned = CV_MODELS[name]
        K = _choose_k(args, concat_tables(tables).data, variant)
        cfg = _fit_config(args, variant, K)
        cfg_part = replace(cfg, K=args.k_part or K)
        safe = name.replace("*", "star")

        def on_fold(i, report, pred, safe=safe):
            _write_fold(args.out_dir, f"{safe}_fold{i + 1}", report)
            print(f"{name} fold {i + 1} ({report.head}): bone MAE {report.mae_bone:.3f}")

        results[name] = ev.loocv(
            tables, spec, cfg, cfg_part,
            method="partitioned" if partitioned else "full",
            window=args.window, on_fold=on_fold,
        )
    for metric in ev.EvalReport.METRICS:
        rows = ev.summary_grid(results, metric)
        ev.write_grid(args.out_dir / f"summary_{metric}.csv", rows)
        print()
        print(ev.format_grid(rows, title=metric))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "cv": cmd_cv,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NotConverged as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
