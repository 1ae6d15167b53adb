"""Detection and calibration metrics.

Scores arrive in the canonical orientation (higher = more uncertain). A
sample is *accepted* (detected as correct) when its score is at or below the
threshold. Positives are correctly classified samples, or in-distribution
samples in mismatch experiments.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .core import EvalDataset, as_probs, softmax_with_temperature
from .errors import DegenerateInputError, InputError, ParameterError

TPR_LEVEL = 0.95
ECE_BINS = 15
_TPR_TOL = 1e-12


@dataclass(frozen=True)
class ScoredPopulation:
    positive_scores: np.ndarray
    negative_scores: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positive_scores, dtype=np.float64).ravel()
        neg = np.asarray(self.negative_scores, dtype=np.float64).ravel()
        if pos.size == 0 or neg.size == 0:
            side = "positive" if pos.size == 0 else "negative"
            raise DegenerateInputError(f"the {side} population is empty")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
            raise InputError("scores must be finite")
        object.__setattr__(self, "positive_scores", pos)
        object.__setattr__(self, "negative_scores", neg)

    @classmethod
    def from_flags(cls, scores, positive) -> "ScoredPopulation":
        s = np.asarray(scores, dtype=np.float64)
        m = np.asarray(positive, dtype=bool)
        if s.shape != m.shape:
            raise InputError("scores and flags must align")
        return cls(s[m], s[~m])


class RocCurve(NamedTuple):
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self) -> list:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


def _cumulative_rates(pop: ScoredPopulation):
    thr = np.unique(np.concatenate([pop.positive_scores, pop.negative_scores]))
    pos = np.sort(pop.positive_scores)
    neg = np.sort(pop.negative_scores)
    tp = np.searchsorted(pos, thr, side="right")
    fp = np.searchsorted(neg, thr, side="right")
    return thr, tp / pos.size, fp / neg.size


def roc_curve(pop: ScoredPopulation) -> RocCurve:
    """(FPR, TPR) at every distinct score, preceded by the origin (threshold -inf)."""
    thr, tpr, fpr = _cumulative_rates(pop)
    return RocCurve(np.concatenate([[0.0], fpr]), np.concatenate([[0.0], tpr]),
                    np.concatenate([[-np.inf], thr]))


def fpr_at_tpr(pop: ScoredPopulation, tpr_level: float = TPR_LEVEL) -> float:
    """FPR at the lowest threshold reaching the TPR level; no interpolation."""
    if not 0.0 < tpr_level <= 1.0:
        raise ParameterError(f"TPR level must lie in (0, 1], got {tpr_level}")
    _, tpr, fpr = _cumulative_rates(pop)
    k = int(np.argmax(tpr >= tpr_level - _TPR_TOL))
    return float(fpr[k])


def auroc(pop: ScoredPopulation) -> float:
    """P(negative score > positive score) + 0.5 P(tie)."""
    pos = np.sort(pop.positive_scores)
    neg = pop.negative_scores
    below = np.searchsorted(pos, neg, side="left")
    ties = np.searchsorted(pos, neg, side="right") - below
    num = 2 * int(below.sum()) + int(ties.sum())
    return num / (2.0 * pos.size * neg.size)


def auroc_trapezoid(pop: ScoredPopulation) -> float:
    c = roc_curve(pop)
    return float(np.sum(np.diff(c.fpr) * (c.tpr[1:] + c.tpr[:-1])) / 2.0)


class RiskCoverage(NamedTuple):
    coverage: np.ndarray
    risk: np.ndarray
    thresholds: np.ndarray
    aurc: float

    def points(self) -> list:
        return list(zip(self.coverage.tolist(), self.risk.tolist(), self.thresholds.tolist()))


def risk_coverage(scores, correct) -> RiskCoverage:
    """Risk (error rate among accepted) against coverage (fraction accepted).

    Curve points sit at each distinct score. The area is a trapezoid rule over
    the per-sample sweep (coverage k/N, k = 1..N, with risk held flat on
    [0, 1/N]); inside a block of tied scores the accepted errors grow linearly,
    i.e. their expectation under a random order of the tied samples. This keeps
    the area a function of the ranking alone, and makes the ideal scorer's area
    a lower bound for every other scorer.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    ok = np.asarray(correct, dtype=bool).ravel()
    if s.size == 0 or s.shape != ok.shape:
        raise InputError("risk-coverage needs aligned, nonempty scores and flags")
    n = s.size
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    err_sorted = (~ok[order]).astype(np.float64)
    thr, start = np.unique(s_sorted, return_index=True)
    end = np.append(start[1:], n)
    cum_err = np.concatenate([[0.0], np.cumsum(err_sorted)])
    errs_at_end = cum_err[end]
    coverage = end / n
    risk = errs_at_end / end

    # per-sample sweep with in-block linear interpolation
    size = end - start
    block_err = errs_at_end - cum_err[start]
    rep = np.repeat(np.arange(thr.size), size)
    k = np.arange(1, n + 1)
    e_k = cum_err[start][rep] + (k - start[rep]) * (block_err / size)[rep]
    r = e_k / k
    r_prev = np.concatenate([[r[0]], r[:-1]])
    aurc = float(np.sum((r_prev + r) / 2.0) / n)
    return RiskCoverage(coverage, risk, thr, aurc)


def ece(probs, labels, num_bins: int = ECE_BINS) -> float:
    """Expected calibration error over equal-width, right-closed confidence bins."""
    P = as_probs(probs)
    P = np.atleast_2d(P)
    y = np.asarray(labels).ravel()
    if P.shape[0] == 0 or y.shape != (P.shape[0],):
        raise InputError("ECE needs aligned, nonempty probabilities and labels")
    if num_bins < 1:
        raise ParameterError("need at least one bin")
    conf = P.max(axis=1)
    hit = (np.argmax(P, axis=1) == y).astype(np.float64)
    b = np.clip(np.ceil(conf * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
    order = np.argsort(b, kind="stable")
    b_sorted = b[order]
    edges = np.searchsorted(b_sorted, np.arange(num_bins + 1))
    total = 0.0
    n = conf.size
    for i in range(num_bins):
        lo, hi = edges[i], edges[i + 1]
        if hi == lo:
            continue
        idx = order[lo:hi]
        gap = abs(math.fsum(hit[idx]) - math.fsum(conf[idx]))
        total += gap / n
    return total


def _ece_at(logits, labels, T, num_bins):
    return ece(softmax_with_temperature(logits, T), labels, num_bins)


def calibrate_temperature(logits, labels, num_bins: int = ECE_BINS, grid_size: int = 100,
                          lo: float = 0.05, hi: float = 10.0) -> float:
    """Temperature minimising ECE: log grid search, then golden section
    between the neighbours of the best grid point (in log T)."""
    Z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels).ravel()
    if Z.shape[0] < 2:
        raise DegenerateInputError("temperature calibration needs at least two samples")
    grid = np.geomspace(lo, hi, grid_size)
    vals = np.array([_ece_at(Z, y, T, num_bins) for T in grid])
    if vals.max() - vals.min() <= 1e-15:
        warnings.warn("ECE does not depend on temperature for this input; returning the smallest grid value",
                      RuntimeWarning, stacklevel=2)
        return float(grid[0])
    i = int(np.argmin(vals))
    a = math.log(grid[max(i - 1, 0)])
    b = math.log(grid[min(i + 1, grid.size - 1)])
    g = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = _ece_at(Z, y, math.exp(c), num_bins), _ece_at(Z, y, math.exp(d), num_bins)
    for _ in range(40):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = _ece_at(Z, y, math.exp(c), num_bins)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = _ece_at(Z, y, math.exp(d), num_bins)
    best_t, best_v = (math.exp(c), fc) if fc <= fd else (math.exp(d), fd)
    if best_v < vals[i]:
        return best_t
    return float(grid[i])


def confusion_matrix(dataset: EvalDataset) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    C = dataset.num_classes
    known = dataset.labels >= 0
    M = np.zeros((C, C), dtype=np.int64)
    np.add.at(M, (dataset.labels[known], dataset.predicted[known]), 1)
    return M


@dataclass
class MetricsReport:
    method: str
    fpr_at_tpr: dict
    auroc: float
    aurc: float
    ece: Optional[float] = None
    roc_points: list = field(default_factory=list)
    rc_points: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: Optional[int] = None
    split: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    status: str = "ok"

    @property
    def fpr95(self) -> float:
        return self.fpr_at_tpr[f"{TPR_LEVEL:g}"]

    def to_dict(self) -> dict:
        roc = [[f, t, None if not np.isfinite(th) else th] for f, t, th in self.roc_points]
        return {
            "method": self.method,
            "status": self.status,
            "seed": self.seed,
            "split": self.split,
            "config": self.config,
            "fpr_at_tpr": self.fpr_at_tpr,
            "auroc": self.auroc,
            "aurc": self.aurc,
            "ece": self.ece,
            "roc_points": roc,
            "rc_points": [list(p) for p in self.rc_points],
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        roc = [(f, t, -np.inf if th is None else th) for f, t, th in d["roc_points"]]
        return cls(d["method"], dict(d["fpr_at_tpr"]), d["auroc"], d["aurc"], d.get("ece"), roc,
                   [tuple(p) for p in d["rc_points"]], d.get("config", {}), d.get("seed"),
                   d.get("split", {}), d.get("extras", {}), d.get("status", "ok"))


def build_report(scores, positive, method: str, probs=None, labels=None,
                 tpr_levels=(TPR_LEVEL,), config: Optional[dict] = None, seed=None,
                 split: Optional[dict] = None, extras: Optional[dict] = None) -> MetricsReport:
    """All detection metrics for one scored evaluation split."""
    pop = ScoredPopulation.from_flags(scores, positive)
    roc = roc_curve(pop)
    rc = risk_coverage(scores, positive)
    cal = None
    if probs is not None and labels is not None:
        lab = np.asarray(labels)
        known = lab >= 0
        if known.any():
            cal = ece(np.asarray(probs)[known], lab[known])
    return MetricsReport(
        method=method,
        fpr_at_tpr={f"{lvl:g}": fpr_at_tpr(pop, lvl) for lvl in tpr_levels},
        auroc=auroc(pop),
        aurc=rc.aurc,
        ece=cal,
        roc_points=roc.points(),
        rc_points=rc.points(),
        config=config or {},
        seed=seed,
        split=split or {},
        extras=extras or {},
    )
