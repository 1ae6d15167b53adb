"""Adaptive-prediction-set conformal baseline with a reject rule.

Classes are ranked by decreasing probability (ties to the lower index). The
conformity score of a labelled sample is the probability mass of every class
ranked at or above its true class. A prediction set is the shortest prefix of
that ranking whose mass reaches the calibrated quantile; a decision is
rejected when the runner-up inside the set is too probable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import as_probs
from .errors import DegenerateInputError, InputError, ParameterError


@dataclass(frozen=True)
class ConformalCalibration:
    alpha: float
    qhat: float
    n: int

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not np.isfinite(self.qhat):
            raise ParameterError("calibrated quantile must be finite")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "qhat": self.qhat, "n": self.n}

    @classmethod
    def from_dict(cls, d: dict) -> "ConformalCalibration":
        return cls(float(d["alpha"]), float(d["qhat"]), int(d["n"]))


def _ranking(P: np.ndarray) -> np.ndarray:
    # stable sort on -p keeps lower indices first among ties
    return np.argsort(-P, axis=-1, kind="stable")


def conformity_scores(probs, labels) -> np.ndarray:
    P = np.atleast_2d(as_probs(probs))
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.shape != (P.shape[0],):
        raise InputError("one label per probability vector required")
    if np.any((y < 0) | (y >= P.shape[1])):
        raise InputError("labels out of range")
    order = _ranking(P)
    sorted_p = np.take_along_axis(P, order, axis=1)
    cum = np.cumsum(sorted_p, axis=1)
    rank = np.argmax(order == y[:, None], axis=1)
    return cum[np.arange(P.shape[0]), rank]


def conformal_calibrate(probs, labels, alpha: float = 0.1) -> ConformalCalibration:
    """Quantile at rank ceil((n + 1)(1 - alpha)) of the calibration scores."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    s = np.sort(conformity_scores(probs, labels))
    n = s.size
    if n == 0:
        raise DegenerateInputError("empty calibration split")
    k = math.ceil((n + 1) * (1.0 - alpha))
    if k > n:
        warnings.warn(f"calibration split of {n} is too small for alpha={alpha}; using the full label set",
                      RuntimeWarning, stacklevel=2)
        return ConformalCalibration(alpha, 1.0, n)
    return ConformalCalibration(alpha, float(s[k - 1]), n)


def _set_sizes(P: np.ndarray, qhat: float):
    order = _ranking(P)
    sorted_p = np.take_along_axis(P, order, axis=1)
    cum = np.cumsum(sorted_p, axis=1)
    reached = cum >= qhat
    # if rounding keeps the total below qhat, the whole label set is used
    size = np.where(reached.any(axis=1), np.argmax(reached, axis=1) + 1, P.shape[1])
    return order, sorted_p, size


def conformal_predict_set(p, cal: ConformalCalibration) -> list:
    """Labels of the prediction set, most probable first."""
    P = np.atleast_2d(as_probs(p))
    order, _, size = _set_sizes(P, cal.qhat)
    sets = [order[i, :size[i]].tolist() for i in range(P.shape[0])]
    return sets[0] if np.ndim(p) == 1 else sets


def conformal_reject_score(p, cal: ConformalCalibration):
    """Second-largest probability inside the prediction set; 0 for singletons."""
    P = np.atleast_2d(as_probs(p))
    _, sorted_p, size = _set_sizes(P, cal.qhat)
    s = np.where(size >= 2, sorted_p[:, 1], 0.0)
    return float(s[0]) if np.ndim(p) == 1 else s


def empirical_coverage(probs, labels, cal: ConformalCalibration) -> float:
    P = np.atleast_2d(as_probs(probs))
    y = np.asarray(labels, dtype=np.int64)
    order, _, size = _set_sizes(P, cal.qhat)
    rank = np.argmax(order == y[:, None], axis=1)
    return float(np.mean(rank < size))
