"""Config-driven experiments and the built-in synthetic benchmark.

A config is a JSON object::

    {
      "mode": "matched" | "mismatch" | "ablation",
      "data": {"synth": {...}, "train": {...}}            # or
      "data": {"logits": "z.npy", "labels": "y.npy", "probs": false,
               "features": "x.npy", "model": "model.json"},
      "secondary": {...same shape as "data"...},         # mismatch only
      "methods": ["MSP", "ODIN", "DOCTOR", "REL_U"],
      "grids": {"temperatures": [...], "epsilons": [...], "lambdas": [...]},
      "split": {"fraction": 0.5, "seeds": [0, 1, ...], "stratify": true,
                "fractions": [...]},                     # fractions: mismatch only
      "ablation": {"axis": "lambda", "values": [...], "defaults": {...}},
      "alpha": 0.1,
      "plots": true
    }

Relative paths resolve against the config file's directory. A synthetic
``data`` block trains a classifier on the train split and evaluates on the
test split; a ``secondary`` synthetic block only contributes its test split,
passed through the primary model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as rio
from .core import EvalDataset, Method
from .errors import InputError
from .model_lab import ClassifierModel, LabeledFeatures, SynthConfig, synth_generate, train_classifier
from .plotting import render_plots
from .report import canonical_json, table_csv
from .tune import (ExperimentResult, GridSpec, SplitSpec, run_ablation, run_matched_experiment,
                   run_mismatch_experiment)

DEFAULT_TRAIN = {"architecture": "linear", "hidden": [32], "epochs": 300, "lr": 0.05, "seed": 0,
                 "weight_decay": 0.0}
DEFAULT_METHODS = ("MSP", "ODIN", "GINI_DOCTOR", "REL_U")
ROW_FIELDS = ("mode", "fraction", "value", "seed", "method", "status", "temperature", "epsilon", "lambda",
              "fpr95", "auroc", "aurc", "ece", "error")
AGG_FIELDS = ("mode", "fraction", "value", "method", "n_seeds", "n_failed", "fpr95_mean", "fpr95_std",
              "auroc_mean", "auroc_std", "aurc_mean", "aurc_std", "ece_mean", "ece_std")


def asymmetric_confusion_config(seed: int = 0) -> SynthConfig:
    """Five Gaussian classes; classes 0 and 1 overlap strongly, and the training
    labels of classes 2 and 3 are partly swapped (noisy but mostly correct)."""
    return SynthConfig(num_classes=5, dim=10, separation=5.0, noise=1.0, confusion_pairs=[(0, 1, 2.0)],
                       train_label_flips=[(2, 3, 0.25)], n_train=2000, n_tune=1000, n_test=4000, seed=seed)


@dataclass
class Benchmark:
    model: ClassifierModel
    tune: EvalDataset
    test: EvalDataset
    config: SynthConfig


def dataset_from_features(model: ClassifierModel, data: LabeledFeatures, tag: str = "") -> EvalDataset:
    return EvalDataset(model.forward(data.X), data.y, data.X, model.num_classes, tag)


def build_synthetic(config: SynthConfig, train: Optional[dict] = None) -> Benchmark:
    t = dict(DEFAULT_TRAIN, **(train or {}))
    data = synth_generate(config)
    model = train_classifier(data.train.X, data.train.y, config.num_classes, t["architecture"],
                             tuple(t["hidden"]), int(t["epochs"]), float(t["lr"]), int(t["seed"]),
                             float(t["weight_decay"]))
    return Benchmark(model, dataset_from_features(model, data.tune, "tune"),
                     dataset_from_features(model, data.test, "test"), config)


def asymmetric_confusion_benchmark(seed: int = 0) -> Benchmark:
    return build_synthetic(asymmetric_confusion_config(seed))


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_data_block(block: dict, base: Path, model: Optional[ClassifierModel] = None, tag: str = ""):
    """Returns ``(model, dataset)`` for a ``data`` or ``secondary`` block."""
    if "synth" in block:
        cfg = SynthConfig.from_dict(block["synth"])
        if model is None:
            bench = build_synthetic(cfg, block.get("train"))
            return bench.model, bench.test
        data = synth_generate(cfg)
        if data.test.X.shape[1] != model.dim:
            raise InputError(f"secondary features have dimension {data.test.X.shape[1]}, model expects {model.dim}")
        return model, dataset_from_features(model, data.test, tag)
    if "logits" not in block or "labels" not in block:
        raise InputError("data block needs either 'synth' or both 'logits' and 'labels'")
    Z = rio.load_matrix(_resolve(base, block["logits"]))
    y = rio.load_labels(_resolve(base, block["labels"]))
    X = rio.load_matrix(_resolve(base, block["features"])) if block.get("features") else None
    if block.get("model"):
        model = ClassifierModel.load(_resolve(base, block["model"]))
    if len(y) != Z.shape[0]:
        raise InputError(f"{Z.shape[0]} output rows but {len(y)} labels")
    return model, EvalDataset(Z, y, X, Z.shape[1], tag, is_probs=bool(block.get("probs", False)))


def _grids(cfg: dict) -> GridSpec:
    g = cfg.get("grids", {})
    return GridSpec(**{k: g[k] for k in ("temperatures", "epsilons", "lambdas", "tpr_level") if k in g})


def _split(cfg: dict) -> SplitSpec:
    s = cfg.get("split", {})
    return SplitSpec(float(s.get("fraction", 0.5)), s.get("seeds", list(range(10))), bool(s.get("stratify", True)))


def run_config(cfg: dict, base: Path = Path(".")) -> tuple[ExperimentResult, str]:
    mode = cfg.get("mode", "matched")
    if "data" not in cfg:
        raise InputError("experiment config needs a 'data' block")
    model, data = load_data_block(cfg["data"], base, tag="primary")
    methods = [Method.parse(m) for m in cfg.get("methods", DEFAULT_METHODS)]
    spec = _split(cfg)
    if mode == "matched":
        res = run_matched_experiment(model, data, spec, _grids(cfg), methods, float(cfg.get("alpha", 0.1)))
    elif mode == "mismatch":
        if "secondary" not in cfg:
            raise InputError("mismatch experiments need a 'secondary' block")
        _, sec = load_data_block(cfg["secondary"], base, model, tag="secondary")
        res = run_mismatch_experiment(model, data, sec, spec, _grids(cfg), methods,
                                      cfg.get("split", {}).get("fractions"))
    elif mode == "ablation":
        ab = cfg.get("ablation", {})
        if "axis" not in ab or "values" not in ab:
            raise InputError("ablation experiments need 'ablation.axis' and 'ablation.values'")
        res = run_ablation(model, data, ab["axis"], ab["values"], spec,
                           [Method.parse(m) for m in ab.get("methods", cfg.get("methods", ["REL_U"]))],
                           ab.get("defaults"))
    else:
        raise InputError(f"unknown experiment mode {mode!r}")
    return res, mode


def write_outputs(res: ExperimentResult, mode: str, cfg: dict, out_dir) -> list[Path]:
    """results.csv, aggregate.csv, reports.json and (optionally) SVG figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [dict(r, mode=mode) for r in res.rows]
    agg = [dict(a, mode=mode) for a in res.aggregate]
    written = []
    for name, text in (("results.csv", table_csv(rows, ROW_FIELDS)), ("aggregate.csv", table_csv(agg, AGG_FIELDS)),
                       ("reports.json", canonical_json({"config": cfg, "rows": rows, "aggregate": agg,
                                                        "reports": [None if r is None else r.to_dict()
                                                                    for r in res.reports]}))):
        p = out_dir / name
        p.write_text(text)
        written.append(p)
    if cfg.get("plots", True):
        written += render_plots(res.reports, out_dir / "figures", agg)
    return written


def run_experiment_file(path, out_dir) -> tuple[ExperimentResult, list[Path]]:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read experiment config {path}: {e}") from None
    res, mode = run_config(cfg, path.parent)
    return res, write_outputs(res, mode, cfg, out_dir)


def mean_metric(res: ExperimentResult, method: str, metric: str = "fpr95", key: Optional[tuple] = None) -> float:
    """Aggregate mean of ``metric`` for ``method`` (optionally at an axis value)."""
    for a in res.aggregate:
        if a["method"] == Method.parse(method).value and (key is None or a.get(key[0]) == key[1]):
            return a[f"{metric}_mean"]
    raise KeyError(method)


def seed_arrays(res: ExperimentResult, method: str, metric: str = "fpr95") -> np.ndarray:
    name = Method.parse(method).value
    return np.array([r[metric] for r in res.rows if r["method"] == name and r["status"] == "ok"])
