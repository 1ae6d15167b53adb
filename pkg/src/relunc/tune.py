"""Tuning / evaluation protocol.

Each seed splits the evaluation data into a tuning part, on which the
detector's hyperparameters are selected and its artifacts fitted, and a
disjoint evaluation part on which metrics are reported. Selection minimises
FPR at 95% TPR on the tuning part.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .conformal import ConformalCalibration, conformal_calibrate, conformal_reject_score
from .core import DetectorConfig, EvalDataset, Method
from .errors import DegenerateInputError, InputError, ParameterError, ProtocolError, RelUncError
from .metrics import MetricsReport, ScoredPopulation, TPR_LEVEL, build_report, confusion_matrix, fpr_at_tpr
from .model_lab import ClassifierModel, LogScore, MLPDetector, perturb_input, train_mlp_detector
from .relu_learn import GroupedProbs, RelUMatrix, fit_d_matrix
from .scores import gini_score, msp_uncertainty, rel_u_score, shannon_entropy

log = logging.getLogger(__name__)

DEFAULT_T_GRID = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0, 5.0)
DEFAULT_EPS_GRID = (0.0, 2e-4, 5e-4, 1e-3, 2e-3, 3.5e-3)
DEFAULT_LAMBDA_GRID = tuple(round(0.1 * k, 1) for k in range(11))

PERTURBABLE = {Method.ODIN: "msp", Method.GINI_DOCTOR: "gini", Method.ENTROPY: "entropy", Method.REL_U: "rel_u"}
Scorer = Callable[[EvalDataset], np.ndarray]


@dataclass(frozen=True)
class SplitSpec:
    fraction: float = 0.5
    seeds: Sequence[int] = tuple(range(10))
    stratify: bool = True

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ParameterError(f"tuning fraction must lie in (0, 1), got {self.fraction}")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds or len(set(seeds)) != len(seeds):
            raise ParameterError("seed list must be nonempty and distinct")
        object.__setattr__(self, "seeds", seeds)


@dataclass(frozen=True)
class GridSpec:
    temperatures: Sequence[float] = DEFAULT_T_GRID
    epsilons: Sequence[float] = DEFAULT_EPS_GRID
    lambdas: Sequence[float] = DEFAULT_LAMBDA_GRID
    tpr_level: float = TPR_LEVEL

    def __post_init__(self):
        for name in ("temperatures", "epsilons", "lambdas"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ParameterError(f"{name} grid is empty")
            object.__setattr__(self, name, vals)
        if any(t <= 0 for t in self.temperatures) or any(e < 0 for e in self.epsilons):
            raise ParameterError("temperatures must be positive and epsilons non-negative")
        if any(not 0 <= lam <= 1 for lam in self.lambdas):
            raise ParameterError("lambda grid must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"temperatures": list(self.temperatures), "epsilons": list(self.epsilons),
                "lambdas": list(self.lambdas), "tpr_level": self.tpr_level}


# ------------------------------------------------------------------ splitting

def make_splits(dataset: EvalDataset, spec: SplitSpec, positive: Optional[np.ndarray] = None):
    """One ``(tuning_idx, evaluation_idx)`` pair per seed, as sorted positions.

    Stratification keeps the positive/negative ratio: each group contributes
    ``round(fraction * group size)`` samples to the tuning part.
    """
    n = len(dataset)
    flags = dataset.positives if positive is None else np.asarray(positive, dtype=bool)
    out = []
    for seed in spec.seeds:
        rng = np.random.default_rng(seed)
        if spec.stratify:
            parts = []
            for grp in (np.flatnonzero(flags), np.flatnonzero(~flags)):
                perm = rng.permutation(grp)
                parts.append(perm[: int(round(spec.fraction * grp.size))])
            tune = np.sort(np.concatenate(parts))
        else:
            perm = rng.permutation(n)
            tune = np.sort(perm[: int(round(spec.fraction * n))])
        mask = np.zeros(n, dtype=bool)
        mask[tune] = True
        ev = np.flatnonzero(~mask)
        if tune.size == 0 or ev.size == 0:
            raise ParameterError(f"tuning fraction {spec.fraction} leaves an empty side for N={n}")
        out.append((tune, ev))
    return out


def check_disjoint(tuning_ids, evaluation_ids) -> None:
    common = np.intersect1d(np.asarray(tuning_ids), np.asarray(evaluation_ids))
    if common.size:
        raise ProtocolError(f"{common.size} sample(s) appear in both tuning and evaluation (e.g. id {common[0]})")


# ------------------------------------------------------------------ detectors

@dataclass
class Detector:
    """A detector configuration together with whatever it learned on tuning data."""

    config: DetectorConfig
    d_matrix: Optional[RelUMatrix] = None
    mlp: Optional[MLPDetector] = None
    conformal: Optional[ConformalCalibration] = None
    tuning_ids: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    @property
    def method(self) -> Method:
        return self.config.method

    def perturbed(self, dataset: EvalDataset, model: Optional[ClassifierModel]) -> EvalDataset:
        eps = self.config.epsilon
        if eps == 0 or self.method not in PERTURBABLE:
            return dataset
        if model is None or dataset.features is None:
            raise InputError("input perturbation (epsilon > 0) needs a model and input features")
        fn = LogScore(PERTURBABLE[self.method], self.config.temperature, self.d_matrix)
        X = perturb_input(model, dataset.features, eps, fn)
        return dataset.with_logits(model.forward(X))

    def score(self, dataset: EvalDataset, model: Optional[ClassifierModel] = None) -> tuple[np.ndarray, np.ndarray]:
        """Canonical uncertainty scores and the (tempered) probabilities they came from."""
        ds = self.perturbed(dataset, model)
        P = ds.probs(self.config.temperature)
        m = self.method
        if m in (Method.MSP, Method.ODIN):
            s = msp_uncertainty(P)
        elif m == Method.GINI_DOCTOR:
            s = gini_score(P)
        elif m == Method.ENTROPY:
            s = shannon_entropy(P)
        elif m == Method.REL_U:
            s = rel_u_score(P, self.d_matrix)
        elif m == Method.MLP:
            s = self.mlp.score(_detector_inputs(ds))
        else:
            s = conformal_reject_score(P, self.conformal)
        return np.atleast_1d(np.asarray(s, dtype=np.float64)), P

    def to_dict(self) -> dict:
        d = {"config": self.config.to_dict()}
        if self.d_matrix is not None:
            d["d_matrix"] = self.d_matrix.to_dict()
        if self.mlp is not None:
            d["mlp"] = self.mlp.to_dict()
        if self.conformal is not None:
            d["conformal"] = self.conformal.to_dict()
        if self.tuning_ids is not None:
            d["tuning_ids"] = self.tuning_ids.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Detector":
        return cls(
            DetectorConfig.from_dict(d["config"]),
            RelUMatrix.from_dict(d["d_matrix"]) if "d_matrix" in d else None,
            MLPDetector.from_dict(d["mlp"]) if "mlp" in d else None,
            ConformalCalibration.from_dict(d["conformal"]) if "conformal" in d else None,
            np.array(d["tuning_ids"], dtype=np.int64) if "tuning_ids" in d else None,
        )


def _detector_inputs(ds: EvalDataset) -> np.ndarray:
    return np.log(np.maximum(ds.logits, 1e-300)) if ds.is_probs else ds.logits


def fit_detector(config: DetectorConfig, tuning: EvalDataset, model: Optional[ClassifierModel] = None,
                 mlp_width: int = 128, mlp_depth: int = 1, seed: int = 0) -> Detector:
    """Fit the learned parts of a detector on the tuning split.

    Rel-U groups come from ``tuning.positives`` (correctness, or membership
    when the dataset carries group flags), at the configured temperature on
    unperturbed outputs.
    """
    det = Detector(config, tuning_ids=np.array(tuning.ids))
    m = config.method
    pos = tuning.positives
    if m == Method.REL_U:
        P = tuning.probs(config.temperature)
        groups = GroupedProbs(P[pos], P[~pos])
        det.d_matrix = fit_d_matrix(groups, config.lam)
        if tuning.labels.min() >= 0:
            det.extras["confusion_matrix"] = confusion_matrix(tuning).tolist()
    elif m == Method.MLP:
        det.mlp = train_mlp_detector(_detector_inputs(tuning), ~pos, mlp_width, mlp_depth, seed=seed)
    elif m == Method.CONFORMAL:
        known = tuning.labels >= 0
        if not known.any():
            raise InputError("conformal calibration needs labelled tuning samples")
        P = tuning.probs(config.temperature)
        det.conformal = conformal_calibrate(P[known], tuning.labels[known], config.alpha)
    return det


def grid_cells(method: Method, grid: GridSpec, perturb: bool = True) -> list[DetectorConfig]:
    """Grid cells in tie-break order: smaller epsilon, then T closer to 1, then smaller lambda."""
    method = Method.parse(method)
    eps = grid.epsilons if perturb else (0.0,)
    if method in (Method.MSP, Method.MLP, Method.CONFORMAL):
        cells = [DetectorConfig(method)]
    elif method == Method.REL_U:
        cells = [DetectorConfig(method, T, e, lam)
                 for T, e, lam in itertools.product(grid.temperatures, sorted(set(eps)), grid.lambdas)]
    else:
        cells = [DetectorConfig(method, T, e) for T, e in itertools.product(grid.temperatures, sorted(set(eps)))]
    return sorted(cells, key=lambda c: (c.epsilon, abs(c.temperature - 1.0), c.lam or 0.0, c.temperature))


@dataclass
class GridResult:
    best: Detector
    best_value: float
    cells: list  # (config dict, value or None, error or None)


def grid_search(method, tuning: EvalDataset, grid: GridSpec = GridSpec(),
                model: Optional[ClassifierModel] = None, alpha: float = 0.1, seed: int = 0,
                mlp_width: int = 128, mlp_depth: int = 1) -> GridResult:
    """Exhaustive search; each cell is fitted and scored on the tuning split itself."""
    method = Method.parse(method)
    perturb = model is not None and tuning.features is not None
    if not perturb and any(e > 0 for e in grid.epsilons) and method in PERTURBABLE:
        log.info("no model/features available: epsilon grid reduced to {0}")
    cells = grid_cells(method, grid, perturb)
    pos = tuning.positives
    best, best_value, table = None, math.inf, []
    last_err = None
    d_cache: dict = {}
    for cfg in cells:
        if method == Method.CONFORMAL:
            cfg = DetectorConfig(method, cfg.temperature, cfg.epsilon, cfg.lam, alpha)
        try:
            key = (cfg.temperature, cfg.lam)
            if method == Method.REL_U and key in d_cache:
                det = Detector(cfg, d_cache[key].d_matrix, tuning_ids=np.array(tuning.ids),
                               extras=d_cache[key].extras)
            else:
                det = fit_detector(cfg, tuning, model, mlp_width, mlp_depth, seed)
                d_cache[key] = det
            s, _ = det.score(tuning, model)
            value = fpr_at_tpr(ScoredPopulation.from_flags(s, pos), grid.tpr_level)
        except RelUncError as e:
            table.append((cfg.to_dict(), None, str(e)))
            last_err = e
            continue
        table.append((cfg.to_dict(), value, None))
        if value < best_value:
            best, best_value = det, value
    if best is None:
        raise DegenerateInputError(f"every grid cell failed for {method.value}: {last_err}")
    return GridResult(best, best_value, table)


def evaluate_detector(detector: Detector, evaluation: EvalDataset, model: Optional[ClassifierModel] = None,
                      seed=None, split: Optional[dict] = None, tpr_levels=(TPR_LEVEL,)) -> MetricsReport:
    """Apply a fitted detector to held-out data; nothing is refitted."""
    if detector.tuning_ids is not None:
        check_disjoint(detector.tuning_ids, evaluation.ids)
    s, P = detector.score(evaluation, model)
    extras = dict(detector.extras)
    if detector.d_matrix is not None:
        extras["d_matrix"] = detector.d_matrix.entries.tolist()
        extras["fallback"] = detector.d_matrix.fallback
    if detector.conformal is not None:
        extras["conformal"] = detector.conformal.to_dict()
    return build_report(s, evaluation.positives, detector.method.value, P, evaluation.labels, tpr_levels,
                        detector.config.to_dict(), seed, split, extras)


def evaluate_scorer(scorer: Scorer, evaluation: EvalDataset, name: str, seed=None,
                    split: Optional[dict] = None) -> MetricsReport:
    """Metrics for an injected scoring function that needs no tuning."""
    s = np.asarray(scorer(evaluation), dtype=np.float64)
    return build_report(s, evaluation.positives, name, evaluation.probs(1.0), evaluation.labels,
                        config={"method": name}, seed=seed, split=split)


# ---------------------------------------------------------------- experiments

MethodLike = Union[str, Method, Scorer]


def _method_name(m: MethodLike) -> str:
    if callable(m) and not isinstance(m, (str, Method)):
        return getattr(m, "__name__", "custom")
    return Method.parse(m).value


@dataclass
class ExperimentResult:
    rows: list            # one dict per (split, seed, method)
    aggregate: list       # one dict per (split, method)
    reports: list         # MetricsReport objects aligned with ``rows`` (None for failures)


def aggregate_rows(rows: list, keys=("fraction", "method")) -> list:
    """Mean and population standard deviation over successful seeds."""
    out = []
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    for key, rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        agg = dict(zip(keys, key))
        agg["n_seeds"] = len(ok)
        agg["n_failed"] = len(rs) - len(ok)
        for metric in ("fpr95", "auroc", "aurc", "ece"):
            vals = [r[metric] for r in ok if r.get(metric) is not None]
            agg[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
            agg[f"{metric}_std"] = float(np.std(vals)) if vals else None
        out.append(agg)
    return out


def _row(rep: Optional[MetricsReport], method: str, seed: int, fraction: float, err: Optional[str] = None,
         **extra) -> dict:
    row = {"fraction": fraction, "seed": seed, "method": method, **extra}
    if rep is None:
        row.update(status="failed", error=err, fpr95=None, auroc=None, aurc=None, ece=None)
    else:
        row.update(status="ok", error=None, fpr95=rep.fpr95, auroc=rep.auroc, aurc=rep.aurc, ece=rep.ece,
                   temperature=rep.config.get("temperature"), epsilon=rep.config.get("epsilon"),
                   **{"lambda": rep.config.get("lambda")})
    return row


def _run_seed(methods, tuning, evaluation, grids, model, seed, fraction, alpha, split_info):
    rows, reps = [], []
    check_disjoint(tuning.ids, evaluation.ids)
    for m in methods:
        name = _method_name(m)
        try:
            if callable(m) and not isinstance(m, (str, Method)):
                rep = evaluate_scorer(m, evaluation, name, seed, split_info)
            else:
                res = grid_search(m, tuning, grids, model, alpha=alpha, seed=seed)
                rep = evaluate_detector(res.best, evaluation, model, seed, split_info)
                rep.extras["tuning_fpr95"] = res.best_value
        except ProtocolError:
            raise
        except RelUncError as e:
            log.warning("seed %s, method %s failed: %s", seed, name, e)
            rows.append(_row(None, name, seed, fraction, str(e)))
            reps.append(None)
            continue
        rows.append(_row(rep, name, seed, fraction))
        reps.append(rep)
    return rows, reps


def run_matched_experiment(model: Optional[ClassifierModel], dataset: EvalDataset, spec: SplitSpec = SplitSpec(),
                           grids: GridSpec = GridSpec(),
                           methods: Sequence[MethodLike] = (Method.MSP, Method.ODIN, Method.GINI_DOCTOR, Method.REL_U),
                           alpha: float = 0.1) -> ExperimentResult:
    """Split, tune and evaluate every method for every seed; aggregate over seeds."""
    rows, reps = [], []
    for seed, (ti, ei) in zip(spec.seeds, make_splits(dataset, spec)):
        tuning, evaluation = dataset.subset(ti), dataset.subset(ei)
        info = {"fraction": spec.fraction, "n_tuning": int(ti.size), "n_evaluation": int(ei.size),
                "stratify": spec.stratify}
        r, p = _run_seed(methods, tuning, evaluation, grids, model, seed, spec.fraction, alpha, info)
        rows += r
        reps += p
    return ExperimentResult(rows, aggregate_rows(rows), reps)


def mismatch_splits(primary: EvalDataset, secondary: EvalDataset, fraction: float, seed: int):
    """Tuning and evaluation sets mixing equal numbers of primary and secondary samples.

    Primary samples are flagged positive, secondary ones negative; secondary
    ids are offset so that they never collide with primary ids.
    """
    rng = np.random.default_rng(seed)
    n1, n2 = len(primary), len(secondary)
    n_tune = int(round(fraction * n1))
    n_eval = min(n1 - n_tune, n2 - n_tune)
    if n_tune < 1 or n_eval < 1:
        raise InputError(f"insufficient secondary samples: need more than {n_tune}, have {n2}")
    p_perm = rng.permutation(n1)
    s_perm = rng.permutation(n2)
    offset = int(primary.ids.max()) + 1 - int(secondary.ids.min())
    sec = EvalDataset(secondary.logits, np.full(n2, -1), secondary.features, secondary.num_classes,
                      secondary.source_tag, secondary.ids + offset, np.zeros(n2, dtype=bool), secondary.is_probs)
    prim = EvalDataset(primary.logits, primary.labels, primary.features, primary.num_classes,
                       primary.source_tag, primary.ids, np.ones(n1, dtype=bool), primary.is_probs)
    tuning = EvalDataset.concat([prim.subset(np.sort(p_perm[:n_tune])), sec.subset(np.sort(s_perm[:n_tune]))])
    evaluation = EvalDataset.concat([prim.subset(np.sort(p_perm[n_tune:n_tune + n_eval])),
                                     sec.subset(np.sort(s_perm[n_tune:n_tune + n_eval]))])
    return tuning, evaluation


def run_mismatch_experiment(model: Optional[ClassifierModel], primary: EvalDataset, secondary: EvalDataset,
                            spec: SplitSpec = SplitSpec(), grids: GridSpec = GridSpec(),
                            methods: Sequence[MethodLike] = (Method.MSP, Method.ODIN, Method.GINI_DOCTOR, Method.REL_U),
                            fractions: Optional[Sequence[float]] = None) -> ExperimentResult:
    """Detect secondary-source samples; one aggregate row per (fraction, method)."""
    if primary.num_classes != secondary.num_classes:
        raise InputError("primary and secondary outputs must have the same number of columns")
    rows, reps = [], []
    for frac in (fractions or (spec.fraction,)):
        for seed in spec.seeds:
            tuning, evaluation = mismatch_splits(primary, secondary, frac, seed)
            info = {"fraction": frac, "n_tuning": len(tuning), "n_evaluation": len(evaluation), "mode": "mismatch"}
            r, p = _run_seed(methods, tuning, evaluation, grids, model, seed, frac, 0.1, info)
            rows += r
            reps += p
    return ExperimentResult(rows, aggregate_rows(rows), reps)


ABLATION_DEFAULTS = {"T": 1.0, "epsilon": 0.0, "lambda": 0.5, "split_size": 0.5}


def run_ablation(model: Optional[ClassifierModel], dataset: EvalDataset, axis: str, values: Sequence[float],
                 spec: SplitSpec = SplitSpec(), methods: Sequence[MethodLike] = (Method.REL_U,),
                 defaults: Optional[dict] = None) -> ExperimentResult:
    """Vary one of ``T``, ``epsilon``, ``lambda`` or ``split_size``; the rest stay pinned.

    No grid search: each (value, seed) fits the detector on the tuning part at
    the pinned hyperparameters and evaluates it. Aggregate rows are keyed by
    ``value`` and method.
    """
    if axis not in ABLATION_DEFAULTS:
        raise ParameterError(f"unknown ablation axis {axis!r}")
    base = dict(ABLATION_DEFAULTS, **(defaults or {}))
    rows, reps = [], []
    for value in values:
        hp = dict(base, **{axis: float(value)})
        sp = SplitSpec(hp["split_size"], spec.seeds, spec.stratify)
        for seed, (ti, ei) in zip(sp.seeds, make_splits(dataset, sp)):
            tuning, evaluation = dataset.subset(ti), dataset.subset(ei)
            check_disjoint(tuning.ids, evaluation.ids)
            info = {"fraction": sp.fraction, "n_tuning": int(ti.size), "n_evaluation": int(ei.size),
                    "axis": axis, "value": float(value)}
            for m in methods:
                name = _method_name(m)
                try:
                    meth = Method.parse(m)
                    cfg = DetectorConfig(meth, hp["T"], hp["epsilon"], hp["lambda"] if meth == Method.REL_U else None)
                    det = fit_detector(cfg, tuning, model, seed=seed)
                    rep = evaluate_detector(det, evaluation, model, seed, info)
                except ProtocolError:
                    raise
                except RelUncError as e:
                    rows.append(_row(None, name, seed, sp.fraction, str(e), value=float(value)))
                    reps.append(None)
                    continue
                rows.append(_row(rep, name, seed, sp.fraction, value=float(value)))
                reps.append(rep)
    return ExperimentResult(rows, aggregate_rows(rows, keys=("value", "method")), reps)
