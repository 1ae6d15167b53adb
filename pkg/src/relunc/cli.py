"""Command-line interface.

Every command prints one JSON provenance line on stdout. Exit codes: 0 on
success, 1 for input errors, 2 for protocol violations, 3 for numerical
failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import io as rio
from .core import DetectorConfig, EvalDataset, Method
from .errors import InputError, RelUncError
from .experiment import asymmetric_confusion_config, run_experiment_file
from .metrics import TPR_LEVEL, build_report, confusion_matrix
from .model_lab import ClassifierModel, SynthConfig, synth_generate, train_classifier
from .plotting import render_plots
from .report import emit_report, load_reports, table_csv
from .tune import Detector, GridSpec, check_disjoint, fit_detector, grid_search

OUT_DIR_ENV = "RELUNC_OUT_DIR"
DEFAULT_OUT_DIR = "relunc_out"


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _read_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read config {args.config}: {e}") from None
    if not isinstance(cfg, dict):
        raise InputError(f"config {args.config} must hold a JSON object")
    return cfg


def _opt(args, name: str, cfg: dict, default=None):
    """Explicit flag, then config entry, then default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def _out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create output directory {d}: {e}") from None
    return d


def _arr_path(out: Path, stem: str, args) -> Path:
    return out / f"{stem}.{args.format or 'npy'}"


def _dataset(args, labels_required: bool = True) -> EvalDataset:
    Z = rio.load_matrix(args.logits)
    y = rio.load_labels(args.labels, Z.shape[1]) if args.labels else None
    if y is None:
        if labels_required:
            raise InputError("--labels is required")
        y = np.full(Z.shape[0], -1)
    if y.shape[0] != Z.shape[0]:
        raise InputError(f"{Z.shape[0]} output rows but {y.shape[0]} labels")
    X = rio.load_matrix(args.features) if getattr(args, "features", None) else None
    group = None
    if getattr(args, "positives", None):
        group = rio.load_labels(args.positives, 2).astype(bool)
        if group.shape[0] != Z.shape[0]:
            raise InputError("positives file must have one flag per row")
    ds = EvalDataset(Z, y, X, Z.shape[1], Path(args.logits).stem, group=group, is_probs=args.probs_input)
    if getattr(args, "rows", None):
        # sample ids are row positions in the full file, so subsets stay comparable
        idx = rio.load_labels(args.rows, Z.shape[0])
        if np.unique(idx).size != idx.size:
            raise InputError(f"{args.rows}: duplicate row indices")
        ds = ds.subset(idx)
    return ds


def _model(args) -> Optional[ClassifierModel]:
    return ClassifierModel.load(args.model) if getattr(args, "model", None) else None


# --------------------------------------------------------------------- commands

def cmd_synth(args, cfg):
    out = _out_dir(args)
    if args.benchmark:
        base = asymmetric_confusion_config().to_dict()
        base.update(cfg)
        cfg = base
    if args.seed is not None:
        cfg = dict(cfg, seed=args.seed)
    sc = SynthConfig.from_dict(cfg)
    data = synth_generate(sc)
    outputs = []
    for name, part in (("train", data.train), ("tune", data.tune), ("test", data.test)):
        outputs.append(rio.save_array(_arr_path(out, f"{name}_features", args), part.X))
        outputs.append(rio.save_array(_arr_path(out, f"{name}_labels", args), part.y.astype(np.int64)))
    p = out / "synth_config.json"
    p.write_text(json.dumps(sc.to_dict(), sort_keys=True, indent=2) + "\n")
    return {}, outputs + [p], {"seed": sc.seed}


def cmd_train(args, cfg):
    out = _out_dir(args)
    X = rio.load_matrix(args.features)
    y = rio.load_labels(args.labels)
    hidden = _opt(args, "hidden", cfg, "32")
    hidden = [int(h) for h in str(hidden).split(",")] if not isinstance(hidden, list) else hidden
    model = train_classifier(X, y, _opt(args, "num_classes", cfg), _opt(args, "architecture", cfg, "linear"),
                             tuple(hidden), int(_opt(args, "epochs", cfg, 300)), float(_opt(args, "lr", cfg, 0.05)),
                             int(args.seed or 0), float(_opt(args, "weight_decay", cfg, 0.0)))
    p = out / "model.json"
    model.save(p)
    return {"features": args.features, "labels": args.labels}, [p], {"final_loss": model.meta["final_loss"]}


def cmd_infer(args, cfg):
    out = _out_dir(args)
    model = ClassifierModel.load(args.model)
    Z = model.forward(rio.load_matrix(args.features))
    p = rio.save_array(_arr_path(out, "logits", args), Z)
    return {"model": args.model, "features": args.features}, [p], {}


def _detector_config(args, cfg) -> DetectorConfig:
    method = _opt(args, "method", cfg)
    if method is None:
        raise InputError("--method is required")
    lam = _opt(args, "lam", cfg, cfg.get("lambda"))
    return DetectorConfig(Method.parse(method), float(_opt(args, "temperature", cfg, 1.0)),
                          float(_opt(args, "epsilon", cfg, 0.0)), None if lam is None else float(lam),
                          float(_opt(args, "alpha", cfg, 0.1)))


def _write_detector(det: Detector, out: Path) -> list:
    p = out / "detector.json"
    p.write_text(json.dumps(det.to_dict(), sort_keys=True, indent=2) + "\n")
    outputs = [p]
    if det.d_matrix is not None:
        outputs += list(det.d_matrix.save(out / "d_matrix.csv"))
    return outputs


def cmd_fit(args, cfg):
    out = _out_dir(args)
    ds = _dataset(args)
    det = fit_detector(_detector_config(args, cfg), ds, _model(args), args.mlp_width, args.mlp_depth,
                       int(args.seed or 0))
    extra = {"method": det.method.value}
    if det.d_matrix is not None:
        extra["fallback"] = det.d_matrix.fallback
    return {"logits": args.logits, "labels": args.labels}, _write_detector(det, out), extra


def cmd_score(args, cfg):
    out = _out_dir(args)
    try:
        det = Detector.from_dict(json.loads(Path(args.detector).read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise InputError(f"cannot read detector {args.detector}: {e}") from None
    ds = _dataset(args, labels_required=False)
    if args.holdout:
        if det.tuning_ids is None:
            raise InputError("--holdout needs a detector that recorded its tuning rows")
        check_disjoint(det.tuning_ids, ds.ids)
    s, _ = det.score(ds, _model(args))
    p = rio.save_array(_arr_path(out, "scores", args), s)
    return {"detector": args.detector, "logits": args.logits}, [p], {"n": int(s.size)}


def cmd_evaluate(args, cfg):
    out = _out_dir(args)
    s = rio.load_vector(args.scores)
    if args.logits:
        ds = _dataset(args, labels_required=not args.positives)
        if ds.logits.shape[0] != s.size:
            raise InputError(f"{s.size} scores for {ds.logits.shape[0]} rows")
        positive, probs, labels = ds.positives, ds.probs(1.0), ds.labels
    elif args.positives:
        positive, probs, labels = rio.load_labels(args.positives, 2).astype(bool), None, None
    else:
        raise InputError("evaluate needs --logits with --labels, or --positives")
    if positive.shape != s.shape:
        raise InputError(f"{s.size} scores but {positive.size} flags")
    levels = tuple(float(v) for v in (args.tpr_levels or [TPR_LEVEL]))
    config, extras = {}, {}
    if args.detector:
        try:
            det = Detector.from_dict(json.loads(Path(args.detector).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise InputError(f"cannot read detector {args.detector}: {e}") from None
        config = det.config.to_dict()
        if probs is not None:
            probs = ds.probs(det.config.temperature)
        if det.d_matrix is not None:
            extras = {"d_matrix": det.d_matrix.entries.tolist(), "fallback": det.d_matrix.fallback}
            if args.logits and labels is not None and labels.min() >= 0:
                extras["confusion_matrix"] = confusion_matrix(ds).tolist()
    name = args.method or (config.get("method") if config else None) or "scores"
    rep = build_report(s, positive, name, probs, labels, levels, config, args.seed, extras=extras)
    paths = emit_report(rep, out, ("json", "csv"), name="report")
    return {"scores": args.scores}, paths, {"fpr_at_tpr": rep.fpr_at_tpr, "auroc": rep.auroc}


def cmd_tune(args, cfg):
    out = _out_dir(args)
    ds = _dataset(args)
    g = cfg.get("grids", cfg)
    grid = GridSpec(**{k: g[k] for k in ("temperatures", "epsilons", "lambdas", "tpr_level") if k in g})
    method = _opt(args, "method", cfg)
    if method is None:
        raise InputError("--method is required")
    res = grid_search(method, ds, grid, _model(args), float(_opt(args, "alpha", cfg, 0.1)), int(args.seed or 0),
                      args.mlp_width, args.mlp_depth)
    rows = [dict(c, value=v, error=e) for c, v, e in res.cells]
    p = out / "grid.csv"
    p.write_text(table_csv(rows, ("method", "temperature", "epsilon", "lambda", "alpha", "value", "error")))
    return ({"logits": args.logits, "labels": args.labels}, _write_detector(res.best, out) + [p],
            {"best": res.best.config.to_dict(), "best_value": res.best_value})


def cmd_experiment(args, cfg):
    if not args.config:
        raise InputError("experiment needs --config")
    out = _out_dir(args)
    res, paths = run_experiment_file(args.config, out)
    failed = sum(r["status"] != "ok" for r in res.rows)
    return {"config": args.config}, paths, {"rows": len(res.rows), "failed": failed}


def cmd_plot(args, cfg):
    out = _out_dir(args)
    reports = [r for path in args.report for r in load_reports(path)]
    aggregate = None
    if args.aggregate:
        aggregate = json.loads(Path(args.aggregate).read_text()).get("aggregate")
    paths = render_plots(reports, out, aggregate)
    return {f"report{i}": p for i, p in enumerate(args.report)}, paths, {}


COMMANDS = {
    "synth": (cmd_synth, "generate synthetic train/tune/test splits"),
    "train": (cmd_train, "fit a linear or MLP classifier"),
    "infer": (cmd_infer, "model + features -> logits file"),
    "fit": (cmd_fit, "fit a detector (D matrix, conformal quantile or MLP) on a tuning file"),
    "score": (cmd_score, "score an outputs file with a fitted detector"),
    "evaluate": (cmd_evaluate, "metrics from scores and labels"),
    "tune": (cmd_tune, "grid search of detector hyperparameters"),
    "experiment": (cmd_experiment, "matched / mismatch / ablation runs from a JSON config"),
    "plot": (cmd_plot, "SVG figures from report JSON files"),
}


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="seed for every random draw of the command")
    p.add_argument("--out-dir", default=d, help=f"output directory (default ${OUT_DIR_ENV} or ./{DEFAULT_OUT_DIR})")
    p.add_argument("--format", choices=("npy", "csv"), default=d, help="array output format (default npy)")
    p.add_argument("--config", default=d, help="JSON file with command options")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relunc", description="Misclassification detection toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    ps = {}
    for name, (_, help_) in COMMANDS.items():
        ps[name] = sub.add_parser(name, help=help_)
        _global_flags(ps[name], suppress=True)

    ps["synth"].add_argument("--benchmark", action="store_true",
                             help="start from the built-in asymmetric-confusion benchmark")

    p = ps["train"]
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--architecture", choices=("linear", "mlp"))
    p.add_argument("--hidden", help="comma-separated hidden widths (mlp)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)

    p = ps["infer"]
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)

    for name in ("fit", "score", "evaluate", "tune"):
        p = ps[name]
        p.add_argument("--logits", required=name != "evaluate", help="N x C logits (or probabilities)")
        p.add_argument("--labels")
        p.add_argument("--probs-input", action="store_true", help="the outputs file holds probabilities")
        p.add_argument("--positives", help="0/1 flags overriding correctness as the positive group")
        if name != "evaluate":
            p.add_argument("--features")
            p.add_argument("--model")
            p.add_argument("--rows", help="integer row indices selecting a subset of the outputs file")
    for name in ("fit", "tune"):
        p = ps[name]
        p.add_argument("--method")
        p.add_argument("--alpha", type=float)
        p.add_argument("--mlp-width", type=int, default=128)
        p.add_argument("--mlp-depth", type=int, default=1)
    p = ps["fit"]
    p.add_argument("--temperature", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    ps["score"].add_argument("--detector", required=True)
    ps["score"].add_argument("--holdout", action="store_true",
                             help="fail with exit code 2 if any scored row was used to fit the detector")
    p = ps["evaluate"]
    p.add_argument("--scores", required=True)
    p.add_argument("--method", help="name recorded in the report")
    p.add_argument("--detector", help="detector JSON whose config and D matrix go into the report")
    p.add_argument("--tpr-levels", type=float, nargs="+")
    p = ps["plot"]
    p.add_argument("--report", required=True, action="append", help="report JSON (repeatable)")
    p.add_argument("--aggregate", help="reports.json from an experiment, for the radar plot")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        cfg = _read_config(args) if args.command != "experiment" else {}
        inputs, outputs, extra = fn(args, cfg)
    except RelUncError as e:
        print(json.dumps({"command": args.command, "status": "error", "error": str(e),
                          "exit_code": e.exit_code}, sort_keys=True))
        print(f"relunc {args.command}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(json.dumps({"command": args.command, "status": "error", "error": str(e), "exit_code": 1},
                         sort_keys=True))
        print(f"relunc {args.command}: {e}", file=sys.stderr)
        return 1
    record = {
        "command": args.command,
        "version": __version__,
        "seed": 0 if args.seed is None else args.seed,
        "config": args.config,
        "inputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in inputs.items()
                   if v is not None and Path(v).is_file()},
        "outputs": [str(p) for p in outputs],
        "status": "ok",
        **extra,
    }
    print(json.dumps(record, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
