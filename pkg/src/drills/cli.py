"""Command-line entry point.

Every verb reads an experiment config (``--config``), optionally overrides the
replicate seed (``--seed``) and writes its CSV artifacts under ``--out``.
Failures print one JSON object on stderr and exit with status 1 (2 for
usage errors).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import plots
from .bench.checkpoint import load_checkpoint, save_checkpoint
from .bench.experiment import (METHODS, ExperimentSpec, fit_method, load_matrix, load_spec, rows_to_csv,
                               run_experiment, test_set)
from .losses import Dataset
from .regression import make_regressor, metrics, relative_sensitivity
from .training import build_dataset

log = logging.getLogger("drills")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _with_seed(spec: ExperimentSpec, seed: int | None) -> ExperimentSpec:
    return spec if seed is None else dataclasses.replace(spec, seeds=(seed,))


def _first_seed(spec: ExperimentSpec) -> int:
    if not spec.seeds:
        raise ValueError("config lists no seeds; pass --seed")
    return spec.seeds[0]


def _trainable(spec: ExperimentSpec) -> str:
    for m in spec.methods:
        if METHODS[m] != "active_subspace":
            return m
    raise ValueError("config lists no trainable method (drills or nll)")


def _model_for(args, spec: ExperimentSpec, seed: int):
    """Load ``--checkpoint`` if given, else train the first trainable method."""
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    fn = spec.test_function()
    data = build_dataset(fn, spec.N, seed)
    model, _ = fit_method(spec, _trainable(spec), data, seed)
    return model


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="ascii", newline="")


def cmd_train(args) -> dict:
    spec = load_spec(args.config)
    seed = args.seed if args.seed is not None else _first_seed(spec)
    method = _trainable(spec)
    data = build_dataset(spec.test_function(), spec.N, seed)
    model, history = fit_method(spec, method, data, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    history.write_csv(out / "history.csv")
    return {"checkpoint": str(out / "model.ckpt"), "method": method, **model.meta}


def cmd_predict(args) -> dict:
    spec = load_spec(args.config)
    seed = args.seed if args.seed is not None else _first_seed(spec)
    model = _model_for(args, spec, seed)
    if args.points:
        X = np.loadtxt(args.points, delimiter=",", ndmin=2)
        f_true = None
    else:
        X, f_true = test_set(spec, seed)
    pred = make_regressor(model, model.data, spec.reg).predict(X)
    header = [f"x{i + 1}" for i in range(X.shape[1])] + ["f_pred"]
    rows = [[repr(float(v)) for v in r] for r in np.column_stack([X, pred])]
    _write(Path(args.out) / "predictions.csv", rows_to_csv(rows, header))
    summary = {"predictions": str(Path(args.out) / "predictions.csv"), "n": int(X.shape[0])}
    if f_true is not None:
        summary["NRMSE"], summary["RL1"] = metrics(f_true, pred)
    return summary


def cmd_bench(args) -> dict:
    cells = load_matrix(args.config)
    out = Path(args.out)
    all_rows = []
    for i, spec in enumerate(cells):
        spec = _with_seed(spec, args.seed)
        cell_dir = out / (spec.name or f"cell{i}") if len(cells) > 1 else out
        result = run_experiment(spec, cell_dir if spec.seeds else None, jobs=args.jobs)
        all_rows.extend(result.rows())
    if all_rows:
        _write(out / "results.csv", rows_to_csv(all_rows))
    return {"cells": len(cells), "rows": len(all_rows)}


def cmd_ablate(args) -> dict:
    spec = load_spec(args.config)
    spec = _with_seed(spec, args.seed)
    if spec.d != 2:
        raise ValueError("ablation needs a two-dimensional function")
    fn = spec.test_function()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in spec.seeds:
        data = build_dataset(fn, spec.N, seed)
        for method in ("drills", "nll"):
            model, history = fit_method(spec, method, data, seed)
            quiver = plots.emit_quiver_data(model, fn, args.grid)
            reg = plots.emit_regression_data(model, fn, spec.reg, args.n_points, seed=[seed, 0x7E57])
            nrmse, rl1 = plots.regression_metrics(reg)
            stem = f"{method}_seed{seed}"
            plots.write_rows(out / f"quiver_{stem}.csv", plots.QUIVER_COLUMNS, quiver)
            plots.write_rows(out / f"regression_{stem}.csv", plots.regression_columns(spec.k_star), reg)
            history.write_csv(out / f"history_{stem}.csv")
            rows.append([method, str(seed), repr(plots.mean_abs_cos(quiver)), repr(nrmse), repr(rl1)])
    _write(out / "ablation.csv", rows_to_csv(rows, ("method", "seed", "mean_abs_cos", "NRMSE", "RL1")))
    return {"rows": len(rows)}


def cmd_quiver(args) -> dict:
    spec = load_spec(args.config)
    seed = args.seed if args.seed is not None else _first_seed(spec)
    model = _model_for(args, spec, seed)
    rows = plots.emit_quiver_data(model, spec.test_function(), args.grid)
    path = Path(args.out) / "quiver.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    plots.write_rows(path, plots.QUIVER_COLUMNS, rows)
    return {"quiver": str(path), "mean_abs_cos": plots.mean_abs_cos(rows)}


def cmd_sensitivity(args) -> dict:
    spec = load_spec(args.config)
    seed = args.seed if args.seed is not None else _first_seed(spec)
    model = _model_for(args, spec, seed)
    fn = spec.test_function()
    X, _ = test_set(spec, seed)
    f, G = fn.value_and_grad(X)
    rs = relative_sensitivity(model, Dataset(X, f, G, fn.lo, fn.hi, fn.name))
    rows = [[str(i + 1), repr(float(v))] for i, v in enumerate(rs)]
    _write(Path(args.out) / "sensitivity.csv", rows_to_csv(rows, ("coordinate", "RS")))
    return {"sensitivity": str(Path(args.out) / "sensitivity.csv"), "RS1": float(rs[0])}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drills", description="Level-set dimension reduction experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--seed", type=int, default=None, help="replicate seed override")
        sp.add_argument("--out", required=True, help="output directory")
        sp.set_defaults(func=fn)
        return sp

    verb("train", cmd_train, "train one transform and save a checkpoint")
    sp = verb("predict", cmd_predict, "predict with a trained model")
    sp.add_argument("--checkpoint", help="use this checkpoint instead of training")
    sp.add_argument("--points", help="CSV of query points (default: the uniform test set)")
    sp = verb("bench", cmd_bench, "run an experiment or a matrix of cells")
    sp.add_argument("--jobs", type=int, default=1, help="replicates run in parallel")
    sp = verb("ablate", cmd_ablate, "PRNN vs RevNet on a 2-D function")
    sp.add_argument("--grid", type=int, default=15)
    sp.add_argument("--n-points", type=int, default=400)
    sp = verb("quiver", cmd_quiver, "gradient vs inactive-direction field on a grid")
    sp.add_argument("--checkpoint")
    sp.add_argument("--grid", type=int, default=15)
    sp = verb("sensitivity", cmd_sensitivity, "relative sensitivity per transformed coordinate")
    sp.add_argument("--checkpoint")
    return p


def main(argv=None) -> int:
    verb = None
    try:
        args = build_parser().parse_args(argv)
        verb = args.verb
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        summary = args.func(args)
    except UsageError as exc:
        print(json.dumps({"status": "error", "error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # reported as one machine-readable line
        print(json.dumps({"status": "error", "verb": verb, "error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "verb": verb, **summary}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
