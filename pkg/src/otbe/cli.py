"""Command-line front end.

Exit codes: 0 success, 2 usage/schema/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .barycenter import categorical_dispersion, multi_correlation
from .errors import ClassTooSmall, ConvergenceFailure, OTBEError, SingularCovariance
from .extractor import ExtractorConfig, feature_moments, fit, transform
from .heads import (
    fit_centroid_classifier,
    fit_linear_head,
    predict,
    predict_class,
)
from .io import load_model, numeric_columns, read_csv, save_model, write_csv, write_json, write_report
from .matstats import ClassMoments, empirical_moments
from .simlab import (
    DEFAULT_GAMMA_GRID,
    DEFAULT_GRID_VALUES,
    DEFAULT_LAMBDA_GRID,
    SemSpec,
    ShiftConfig,
    lambda_curve_experiment,
    lambda_star_experiment,
    population_shift_experiment,
    sample,
    sem_to_moments,
)

log = logging.getLogger("otbe")

ROLES = ("outcome", "outcome_class", "confounder", "context", "feature", "ignore")
PREFIX_ROLES = {"y_": "outcome", "z_": "confounder", "s_": "context", "x_": "feature"}
ROLE_BLOCK = {"outcome": "Y", "confounder": "Z", "context": "S", "feature": "X"}
CONTEXTS = {"s": ("S",), "z": ("Z",), "both": ("Z", "S")}


class UsageError(Exception):
    """Bad flags, schema or config; exit code 2."""


# -- schema ------------------------------------------------------------------------


def resolve_schema(header, schema_path=None, task="regression") -> dict[str, str]:
    """Map each column to a role, from a schema file or y_/z_/s_/x_ prefixes."""
    if schema_path:
        try:
            doc = json.loads(Path(schema_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read schema {schema_path}: {exc}") from None
        mapping = doc.get("columns", doc) if isinstance(doc, dict) else None
        if not isinstance(mapping, dict):
            raise UsageError("schema must be a JSON object mapping column names to roles")
        roles = {}
        for col in header:
            role = mapping.get(col, "ignore")
            if role not in ROLES:
                raise UsageError(f"column {col!r}: unknown role {role!r}; expected one of {ROLES}")
            roles[col] = role
        missing = sorted(set(mapping) - set(header))
        if missing:
            raise UsageError(f"schema names columns absent from the data: {missing}")
    else:
        roles = {}
        for col in header:
            role = next((r for p, r in PREFIX_ROLES.items() if col.startswith(p)), "ignore")
            if role == "outcome" and task == "classification":
                role = "outcome_class"
            roles[col] = role
    cols = lambda r: [c for c in header if roles[c] == r]
    if not cols("feature"):
        raise UsageError("schema declares no feature columns")
    if task == "regression" and not cols("outcome"):
        raise UsageError("regression requires at least one outcome column")
    if task == "classification" and len(cols("outcome_class")) != 1:
        raise UsageError("classification requires exactly one outcome_class column")
    return roles


def _blocks(header, roles):
    names = []
    blocks = []
    for role in ("outcome", "confounder", "context", "feature"):
        cols = [c for c in header if roles[c] == role]
        if cols:
            blocks.append((ROLE_BLOCK[role], len(cols)))
            names.extend(cols)
    return blocks, names


# -- commands -----------------------------------------------------------------------


def cmd_fit(args) -> int:
    task = "classification" if args.task == "classify" else "regression"
    header, rows = read_csv(args.data)
    roles = resolve_schema(header, args.schema, task)
    blocks, names = _blocks(header, roles)
    present = {b for b, _ in blocks}
    context = CONTEXTS[args.context] if args.context else (("S",) if "S" in present else ("Z",))
    if not set(context) <= present:
        raise UsageError(f"context {args.context or 's'!r} needs columns for blocks {context}")
    config = ExtractorConfig(lam=args.lam, dim=args.dim, task=task, context=context)
    data = numeric_columns(header, rows, names)
    feature_cols = [c for c in header if roles[c] == "feature"]
    if args.dim > len(feature_cols):
        raise UsageError(f"dim must be <= number of features ({len(feature_cols)})")
    report = {"lambda": args.lam, "dim": args.dim, "task": task, "context": list(context),
              "n": len(rows), "features": feature_cols}
    if task == "regression":
        m = empirical_moments(data, blocks)
        model = fit(m, config)
        head = fit_linear_head(model, m)
        report["corr_WY"] = multi_correlation(feature_moments(model, m), "W", "Y")
        outcome_cols = [c for c in header if roles[c] == "outcome"]
    else:
        class_col = next(c for c in header if roles[c] == "outcome_class")
        labels = [r[header.index(class_col)] for r in rows]
        cm = ClassMoments.from_data(data, blocks, labels)
        model = fit(cm, config)
        head = fit_centroid_classifier(model, cm)
        report["dispersion_WY"] = categorical_dispersion(head.centroids, cm.priors @ head.centroids,
                                                         cm.priors)
        report["classes"] = list(cm.classes)
        outcome_cols = [class_col]
    report.update(h_spectrum=model.h_eigenvalues.tolist(), term_C=model.term_C(),
                  term_D=model.term_D(), objective=model.objective(), warnings=list(model.warnings))
    meta = {"features": feature_cols, "outcomes": outcome_cols, "task": task}
    save_model(args.out, model, head, meta)
    write_json(args.report or f"{args.out}.report.json", report)
    return 0


def _load_rows(args, model, meta):
    header, rows = read_csv(args.data)
    feats = meta.get("features") or []
    if feats and all(f in header for f in feats):
        return transform(model, numeric_columns(header, rows, feats))
    wcols = [f"w_{i + 1}" for i in range(model.dim)]
    if all(w in header for w in wcols):
        return numeric_columns(header, rows, wcols)
    raise UsageError(f"data must contain feature columns {feats} or feature columns {wcols}")


def cmd_transform(args) -> int:
    model, _, meta = load_model(args.model)
    w = _load_rows(args, model, meta)
    write_csv(args.out, [f"w_{i + 1}" for i in range(model.dim)], w.tolist())
    return 0


def cmd_predict(args) -> int:
    model, head, meta = load_model(args.model)
    if head is None:
        raise UsageError("model file has no prediction head")
    w = _load_rows(args, model, meta)
    outcomes = meta.get("outcomes") or ["y"]
    if meta.get("task") == "classification":
        write_csv(args.out, [f"yhat_{outcomes[0]}"], [[c] for c in predict_class(head, w)])
    else:
        write_csv(args.out, [f"yhat_{c}" for c in outcomes], predict(head, w).tolist())
    return 0


SIM_DEFAULTS = {
    "toy": {"rho": 0.9, "sigma1_sq": 1.0, "sigma2_sq": 1.0, "n": 10000, "seed": 0},
    "grid": {"values": list(DEFAULT_GRID_VALUES), "triples": None, "sigma1_sq": 0.25,
             "sigma2_sq": 0.25, "dim": 1, "improvement_threshold": 0.0, "tie_rtol": 1e-9,
             "lam_grid": list(DEFAULT_LAMBDA_GRID), "gamma_grid": list(DEFAULT_GAMMA_GRID),
             "seed": 0},
    "lambda-curve": {"reps": 100, "n": 2000, "lam_grid": list(DEFAULT_LAMBDA_GRID),
                     "dims": {"d_s": 2, "d_z": 2, "d_y": 2, "d_x": 6}, "dim": 2,
                     "context": "Z", "noise_var": 0.25, "seed": 0},
    "lambda-star": {"iters": 5000, "lam_grid": list(DEFAULT_LAMBDA_GRID),
                    "improvement_threshold": 0.005, "redraw_source": True,
                    "dims": {"d_s": 2, "d_z": 2, "d_y": 2, "d_x": 6}, "n": None, "dim": 2,
                    "context": "Z", "noise_var": 0.25, "seed": 0},
}


def resolve_sim_config(kind, config_path=None, overrides=None) -> dict:
    cfg = json.loads(json.dumps(SIM_DEFAULTS[kind]))
    if config_path:
        try:
            user = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(user, dict):
            raise UsageError("config must be a JSON object")
        unknown = sorted(set(user) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {kind}: {unknown}")
        cfg.update(user)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    return cfg


def cmd_simulate(args) -> int:
    kind = args.kind
    overrides = {"seed": args.seed, "n": args.n, "iters": args.iters, "reps": args.reps}
    overrides = {k: v for k, v in overrides.items() if k in SIM_DEFAULTS[kind]}
    cfg = resolve_sim_config(kind, args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = args.threads
    try:
        if kind == "toy":
            spec = SemSpec.toy(cfg["rho"], cfg["sigma1_sq"], cfg["sigma2_sq"], seed=cfg["seed"])
            data = sample(spec, int(cfg["n"]))
            write_csv(out / "toy.csv", ["y_1", "z_1", "x_1", "x_2"], data.tolist())
            m = sem_to_moments(spec)
            write_json(out / "toy.json", {"experiment": "toy", "resolved": cfg,
                                          "summary": {"blocks": [list(b) for b in m.blocks],
                                                      "exact_cov": m.cov.tolist()}})
            print(json.dumps({"experiment": kind, "resolved": cfg}, sort_keys=True))
            return 0
        if kind == "grid":
            grid = ShiftConfig(values=tuple(cfg["values"]),
                               triples=None if cfg["triples"] is None else tuple(map(tuple, cfg["triples"])),
                               sigma1_sq=cfg["sigma1_sq"], sigma2_sq=cfg["sigma2_sq"], dim=cfg["dim"],
                               improvement_threshold=cfg["improvement_threshold"],
                               tie_rtol=cfg["tie_rtol"])
            report = population_shift_experiment(grid, cfg["lam_grid"], cfg["gamma_grid"], threads)
        elif kind == "lambda-curve":
            report = lambda_curve_experiment(cfg["reps"], cfg["n"], cfg["lam_grid"], cfg["dims"],
                                             seed=cfg["seed"], dim=cfg["dim"], context=cfg["context"],
                                             noise_var=cfg["noise_var"], threads=threads)
        else:
            report = lambda_star_experiment(cfg["iters"], cfg["lam_grid"], cfg["improvement_threshold"],
                                            seed=cfg["seed"], redraw_source=cfg["redraw_source"],
                                            dims=cfg["dims"], n=cfg["n"], dim=cfg["dim"],
                                            context=cfg["context"], noise_var=cfg["noise_var"],
                                            threads=threads)
    except (TypeError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    write_report(report, out, kind.replace("-", "_"), {"config_input": cfg})
    print(json.dumps({"experiment": kind, "resolved": report.config}, sort_keys=True, default=str))
    return 0


# -- entry point ------------------------------------------------------------------


def _lam(text):
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otbe", description="Invariant feature extraction via "
                                "Gaussian optimal-transport barycenters")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a feature model and prediction head")
    f.add_argument("--data", required=True)
    f.add_argument("--schema")
    f.add_argument("--lambda", dest="lam", type=_lam, required=True)
    f.add_argument("--dim", type=int, required=True)
    f.add_argument("--task", choices=("regress", "classify"), default="regress")
    f.add_argument("--context", choices=tuple(CONTEXTS))
    f.add_argument("--out", required=True)
    f.add_argument("--report", help="fit report path (default: <out>.report.json)")
    f.set_defaults(func=cmd_fit)

    for name, func in (("transform", cmd_transform), ("predict", cmd_predict)):
        t = sub.add_parser(name)
        t.add_argument("--model", required=True)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.set_defaults(func=func)

    s = sub.add_parser("simulate", help="run a simulation experiment")
    s.add_argument("kind", choices=tuple(SIM_DEFAULTS))
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--threads", type=int, help="worker threads (default: $OTBE_THREADS or 1)")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "fit" and args.dim < 1:
        parser.error(f"--dim must be >= 1, got {args.dim}")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"otbe: error: {exc}", file=sys.stderr)
        return 2
    except (SingularCovariance, ConvergenceFailure, ClassTooSmall) as exc:
        stage = getattr(exc, "stage", None)
        print(f"otbe: numeric failure{f' in {stage}' if stage else ''}: {exc}", file=sys.stderr)
        return 3
    except OTBEError as exc:
        print(f"otbe: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"otbe: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
