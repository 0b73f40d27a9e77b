"""Command-line interface: ``cmliv simulate | estimate | mc-table | estimands``.

Exit status: 0 success, 2 usage or configuration error, 3 data error,
4 when every requested estimator is weakly identified.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from cmliv.config import dgp_from_kv, experiment_from_kv, read_kv
from cmliv.core import IvDataset, is_binary, make_fold_plan, validate_dataset
from cmliv.dgp import DgpConfig, draw_sample, estimands, mc_estimand_oracle, preset
from cmliv.errors import (
    CmlivError,
    ConfigParseError,
    DatasetError,
    InvalidConfigurationError,
    UnsupportedInstrumentError,
    WeakIdentificationError,
)
from cmliv.estimators import ESTIMATORS, VarianceOptions, estimate, fit_nuisances
from cmliv.harness import emit_table, run_experiment
from cmliv.learners import RegressorSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_WEAK = 0, 2, 3, 4


class _UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# CSV I/O

def format_float(v: float) -> str:
    """Shortest decimal that round-trips the binary64 value exactly."""
    return repr(float(v))


def write_dataset(ds: IvDataset, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    header = ["y", "d", "z1"] + [f"x_{j + 1}" for j in range(ds.k)]
    if ds.weight is not None:
        header.append("weight")
    if ds.cluster is not None:
        header.append("cluster")
    w.writerow(header)
    for i in range(ds.n):
        row = [format_float(ds.y[i]), format_float(ds.d[i]), format_float(ds.z1[i])]
        row += [format_float(v) for v in ds.x[i]]
        if ds.weight is not None:
            row.append(format_float(ds.weight[i]))
        if ds.cluster is not None:
            row.append(str(int(ds.cluster[i])))
        w.writerow(row)


def read_dataset(path: str, weights_col: Optional[str] = None,
                 cluster_col: Optional[str] = None) -> IvDataset:
    """Load a CSV with columns ``y, d, z1, x_1..x_k`` and optional weight/cluster.

    Errors name the offending row (1-based, header is row 1) and column.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise DatasetError(f"{path}: cannot read: {err.strerror}") from None
    except UnicodeDecodeError:
        raise DatasetError(f"{path}: not valid UTF-8") from None
    if not rows:
        raise DatasetError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    col = {name: j for j, name in enumerate(header)}
    for name in ("y", "d", "z1"):
        if name not in col:
            raise DatasetError(f"{path}: missing required column {name!r}")
    xcols = []
    while f"x_{len(xcols) + 1}" in col:
        xcols.append(f"x_{len(xcols) + 1}")
    if not xcols:
        raise DatasetError(f"{path}: need at least one covariate column x_1")
    wcol = weights_col or ("weight" if "weight" in col else None)
    ccol = cluster_col or ("cluster" if "cluster" in col else None)
    for name in (wcol, ccol):
        if name is not None and name not in col:
            raise DatasetError(f"{path}: missing column {name!r}")

    numeric = ["y", "d", "z1"] + xcols + ([wcol] if wcol else [])
    body = rows[1:]
    if not body:
        raise DatasetError(f"{path}: no data rows")
    values = {name: np.empty(len(body)) for name in numeric}
    labels = []
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {line} has {len(row)} fields, header has {len(header)}")
        for name in numeric:
            cell = row[col[name]].strip()
            try:
                values[name][i] = float(cell)
            except ValueError:
                raise DatasetError(f"{path}: row {line}, column {name!r}: "
                                   f"not a number: {cell!r}") from None
            if not math.isfinite(values[name][i]):
                raise DatasetError(f"{path}: row {line}, column {name!r}: non-finite value")
        if ccol:
            labels.append(row[col[ccol]].strip())
    cluster = None
    if ccol:
        _, cluster = np.unique(np.array(labels), return_inverse=True)
    ds = IvDataset(y=values["y"], d=values["d"], z1=values["z1"],
                   x=np.column_stack([values[c] for c in xcols]),
                   weight=values[wcol] if wcol else None, cluster=cluster)
    report = validate_dataset(ds)
    if not report.ok:
        raise DatasetError(f"{path}: " + "; ".join(report.problems))
    return ds


# ---------------------------------------------------------------------------
# commands

def _dgp(args) -> DgpConfig:
    if args.config:
        return dgp_from_kv(read_kv(args.config), args.config)
    return preset(args.preset or "dgp1")


def _open_out(path: Optional[str]):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", newline="", encoding="utf-8"), True


def cmd_simulate(args) -> int:
    if args.n is None or args.n < 1:
        raise _UsageError("--n must be a positive integer")
    ds = draw_sample(_dgp(args), args.n, args.seed)
    stream, close = _open_out(args.out)
    try:
        write_dataset(ds, stream)
    finally:
        if close:
            stream.close()
    return EXIT_OK


def _estimator_list(text: Optional[str]) -> list[str]:
    ids = [s.strip() for s in (text or "cml").split(",") if s.strip()]
    for e in ids:
        if e not in ESTIMATORS:
            raise _UsageError(f"unknown estimator {e!r}; choose from {', '.join(ESTIMATORS)}")
    return list(dict.fromkeys(ids))


def cmd_estimate(args) -> int:
    ids = _estimator_list(args.estimators)
    vopts = VarianceOptions(mode=args.variance)
    ds = read_dataset(args.input, args.weights_col, args.cluster_col)
    if vopts.mode == "cluster-robust" and ds.cluster is None:
        raise _UsageError("--variance cluster needs a cluster column")
    if args.learner == "oracle":
        spec = RegressorSpec(kind="oracle", dgp=_dgp(args), seed=args.seed)
    else:
        spec = RegressorSpec(kind=args.learner, seed=args.seed)
    plan = make_fold_plan(ds.n, args.folds, args.seed)

    results, errors = {}, {}
    eligible = []
    for e in ids:
        if e == "cs" and not is_binary(ds.z1):
            errors[e] = ("unsupported-instrument", "the cs estimator needs a binary z1")
        else:
            eligible.append(e)
    nf = fit_nuisances(ds, plan, spec, eligible) if eligible else None
    for e in eligible:
        try:
            results[e] = estimate(ds, nf, e, vopts)
        except WeakIdentificationError as err:
            errors[e] = ("weak-identification", str(err))
        except UnsupportedInstrumentError as err:
            errors[e] = ("unsupported-instrument", str(err))

    print(f"{'estimator':<10}{'theta':>14}{'std_error':>14}{'ci_lower':>14}{'ci_upper':>14}"
          f"{'denominator':>14}")
    for e in ids:
        if e in results:
            r = results[e]
            print(f"{e:<10}{r.theta:>14.6g}{r.std_error:>14.6g}{r.ci_lower:>14.6g}"
                  f"{r.ci_upper:>14.6g}{r.denominator:>14.6g}")
        else:
            print(f"{e:<10}  {errors[e][0]}: {errors[e][1]}")

    if args.out:
        stream, close = _open_out(args.out)
        try:
            for e in ids:
                if e in results:
                    rec = dict(results[e].as_record(), status="ok", learner=spec.label)
                else:
                    rec = {"estimator": e, "status": errors[e][0], "message": errors[e][1]}
                stream.write(json.dumps(rec) + "\n")
        finally:
            if close:
                stream.close()

    if results:
        return EXIT_OK
    if any(kind == "weak-identification" for kind, _ in errors.values()):
        return EXIT_WEAK
    return EXIT_DATA


def cmd_mc_table(args) -> int:
    if not args.config:
        raise _UsageError("mc-table needs --config")
    overrides = dict(reps=args.reps, folds=args.folds, master_seed=args.seed,
                     workers=args.workers, estimand_source=args.estimand_source)
    if args.learner:
        overrides["learners"] = [s.strip() for s in args.learner.split(",")]
    if args.estimators:
        overrides["estimators"] = _estimator_list(args.estimators)
    if args.n is not None:
        overrides["sample_sizes"] = [args.n]
    if args.untrimmed:
        overrides["trim"] = False
    cfg = experiment_from_kv(read_kv(args.config), args.config, **overrides)
    if args.variance:
        cfg = replace(cfg, variance=VarianceOptions(mode=args.variance))
    tbl = run_experiment(cfg)
    stream, close = _open_out(args.out)
    try:
        stream.write(emit_table(tbl, args.format))
    finally:
        if close:
            stream.close()
    total = len(tbl.records)
    failed = sum(r.failed for r in tbl.records)
    print(f"replications: {cfg.reps} per cell; estimator runs: {total}; "
          f"weak-identification failures: {failed}", file=sys.stderr)
    return EXIT_OK


def _fmt_opt(v) -> str:
    return "undefined" if v is None else f"{v:.10g}"


def cmd_estimands(args) -> int:
    cfg = _dgp(args)
    mode = args.mode
    if mode == "oracle":
        est = mc_estimand_oracle(cfg, n_oracle=args.n or 1_000_000, seed=args.seed)
    else:
        est = estimands(cfg, mode)
    print(f"dgp        {cfg.name}")
    print(f"source     {est.source}")
    for label, v, se in (("tau_late", est.tau_late, est.se_tau_late),
                         ("theta0", est.theta0, est.se_theta0),
                         ("theta_dml", est.theta_dml, est.se_theta_dml)):
        extra = "" if se is None else f"  (se {se:.3g})"
        print(f"{label:<10} {_fmt_opt(v)}{extra}")
    if est.theta0_moment is not None:
        print(f"{'theta0_mr':<10} {_fmt_opt(est.theta0_moment)}  (se {est.se_theta0_moment:.3g})")
    if est.dml_near_zero:
        print(f"warning: DML estimand denominator is near zero ({est.dml_denominator:.3e}, "
              f"{est.dml_weight_ratio:.2e} of its absolute weight mass); theta_dml is "
              f"numerically unstable", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmliv", description="Debiased IV estimation and simulation.")
    sub = p.add_subparsers(dest="command", required=True)

    def dgp_flags(sp):
        sp.add_argument("--preset", help="DGP preset: dgp1, dgp2, dgp3 or dgp4")
        sp.add_argument("--config", help="key=value file with DGP parameters (optional 'preset' base)")

    s = sub.add_parser("simulate", help="draw a sample from a DGP and write it as CSV")
    dgp_flags(s)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="run estimators on a CSV dataset")
    e.add_argument("input")
    e.add_argument("--estimators", default="cml", help="comma-separated subset of " + ",".join(ESTIMATORS))
    e.add_argument("--learner", default="random-forest",
                   choices=["random-forest", "rf", "ridge-expanded", "ridge", "knn", "oracle"])
    e.add_argument("--folds", type=int, default=4)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--variance", choices=["iid", "cluster"], default="iid")
    e.add_argument("--weights-col")
    e.add_argument("--cluster-col")
    e.add_argument("--out", help="write one JSON record per estimator to this file")
    dgp_flags(e)
    e.set_defaults(func=cmd_estimate)

    m = sub.add_parser("mc-table", help="Monte Carlo MSE decomposition from an experiment config")
    m.add_argument("--config", required=True)
    m.add_argument("--out")
    m.add_argument("--format", choices=["csv", "markdown"], default="csv")
    m.add_argument("--reps", type=int)
    m.add_argument("--n", type=int)
    m.add_argument("--folds", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--learner")
    m.add_argument("--estimators")
    m.add_argument("--variance", choices=["iid", "cluster"])
    m.add_argument("--workers", type=int)
    m.add_argument("--estimand-source", choices=["closed-form", "exact"])
    m.add_argument("--untrimmed", action="store_true",
                   help="keep weakly identified replications in the summaries")
    m.set_defaults(func=cmd_mc_table)

    t = sub.add_parser("estimands", help="print tau_late, theta0 and theta_dml for a DGP")
    dgp_flags(t)
    t.add_argument("--mode", choices=["closed-form", "oracle", "exact"], default="closed-form")
    t.add_argument("--n", type=int, help="simulation size in oracle mode (default 10^6)")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_estimands)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (_UsageError, InvalidConfigurationError, ConfigParseError) as err:
        print(f"cmliv: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as err:
        print(f"cmliv: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (CmlivError, OSError) as err:
        print(f"cmliv: error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
