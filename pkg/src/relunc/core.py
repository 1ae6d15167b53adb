"""Shared domain types and the temperature-scaled softmax.

Class indices are 0-based throughout. A label of ``-1`` marks a sample whose
true class is unknown (e.g. samples drawn from a foreign dataset in mismatch
experiments); such samples are never counted as correct.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import InputError, ParameterError

PROB_ATOL = 1e-9
RENORMALIZE_ATOL = 1e-6


class Method(str, enum.Enum):
    MSP = "MSP"
    ENTROPY = "ENTROPY"
    GINI_DOCTOR = "GINI_DOCTOR"
    ODIN = "ODIN"
    REL_U = "REL_U"
    MLP = "MLP"
    CONFORMAL = "CONFORMAL"

    @classmethod
    def parse(cls, name: "str | Method") -> "Method":
        if isinstance(name, Method):
            return name
        key = str(name).strip().upper().replace("-", "_")
        aliases = {"DOCTOR": "GINI_DOCTOR", "GINI": "GINI_DOCTOR", "RELU": "REL_U", "REL_U": "REL_U"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise InputError(f"unknown detection method {name!r}") from None


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def check_temperature(T: float) -> float:
    T = float(T)
    if not np.isfinite(T) or T <= 0:
        raise ParameterError(f"temperature must be a positive finite number, got {T}")
    return T


def as_logits(z) -> np.ndarray:
    if isinstance(z, LogitVector):
        return z.logits
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise InputError("logit vector must be nonempty")
    if not np.all(np.isfinite(z)):
        bad = np.argwhere(~np.isfinite(z))[0].tolist()
        raise InputError(f"non-finite logit at index {bad}")
    return z


def as_probs(p, renormalize: bool = False) -> np.ndarray:
    """Validate an array of probability vectors along the last axis.

    With ``renormalize`` rows whose sum is within 1e-6 of one are rescaled;
    otherwise the sum must be within 1e-9.
    """
    if isinstance(p, ProbVector):
        return p.probs
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 2:
        raise InputError("probability vectors need at least two classes")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InputError("probabilities must be finite and non-negative")
    err = np.abs(p.sum(axis=-1) - 1.0)
    tol = RENORMALIZE_ATOL if renormalize else PROB_ATOL
    if np.any(err > tol):
        row = int(np.argmax(err.reshape(-1)))
        raise InputError(f"probabilities do not sum to one (row {row}, off by {err.reshape(-1)[row]:.3g})")
    if renormalize:
        p = p / p.sum(axis=-1, keepdims=True)
    return p


@dataclass(frozen=True)
class ProbVector:
    probs: np.ndarray

    def __post_init__(self):
        p = as_probs(self.probs)
        if p.ndim != 1:
            raise InputError("ProbVector must be one-dimensional")
        object.__setattr__(self, "probs", _frozen(p.copy()))

    def __len__(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class LogitVector:
    logits: np.ndarray

    def __post_init__(self):
        z = as_logits(self.logits)
        if z.ndim != 1:
            raise InputError("LogitVector must be one-dimensional")
        object.__setattr__(self, "logits", _frozen(z.copy()))


def softmax_with_temperature(z, T: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``z / T`` with max-subtraction."""
    T = check_temperature(T)
    z = as_logits(z) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def temper_probs(p, T: float) -> np.ndarray:
    """Apply temperature to probabilities directly: softmax(log p / T)."""
    T = check_temperature(T)
    p = as_probs(p)
    if T == 1.0:
        return p
    with np.errstate(divide="ignore"):
        q = np.where(p > 0, np.power(p / p.max(axis=-1, keepdims=True), 1.0 / T), 0.0)
    return q / q.sum(axis=-1, keepdims=True)


def argmax_predict(z) -> "int | np.ndarray":
    """Predicted class; ties go to the lowest index."""
    z = np.asarray(z.logits if isinstance(z, LogitVector) else z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise InputError("cannot take argmax of an empty vector")
    idx = np.argmax(z, axis=-1)
    return int(idx) if z.ndim == 1 else idx


@dataclass(frozen=True)
class EvalSample:
    logits: LogitVector
    true_label: int
    features: Optional[np.ndarray] = None

    @property
    def predicted_label(self) -> int:
        return argmax_predict(self.logits)

    @property
    def correct(self) -> bool:
        return self.true_label >= 0 and self.predicted_label == self.true_label


@dataclass(frozen=True)
class EvalDataset:
    """A batch of model outputs with labels.

    ``logits`` may hold probabilities instead when ``is_probs`` is set; the
    softmax is then bypassed. ``group`` optionally overrides the positive /
    negative assignment (True = positive), which mismatch experiments use to
    mark in-distribution membership. ``ids`` identify samples across subsets
    so that split overlap can be detected.
    """

    logits: np.ndarray
    labels: np.ndarray
    features: Optional[np.ndarray] = None
    num_classes: Optional[int] = None
    source_tag: str = ""
    ids: Optional[np.ndarray] = None
    group: Optional[np.ndarray] = None
    is_probs: bool = False

    def __post_init__(self):
        if self.is_probs:
            z = as_probs(self.logits, renormalize=True)
        else:
            z = as_logits(self.logits)
        if z.ndim != 2:
            raise InputError(f"logits must be an N x C matrix, got shape {z.shape}")
        n, c = z.shape
        if n == 0:
            raise InputError("empty dataset")
        C = c if self.num_classes is None else int(self.num_classes)
        if C != c or C < 2:
            raise InputError(f"dataset declares {C} classes but logits have {c} columns")
        y = np.asarray(self.labels)
        if y.shape != (n,):
            raise InputError(f"{y.shape[0] if y.ndim else 0} labels for {n} samples")
        if not np.issubdtype(y.dtype, np.integer):
            if np.any(y != np.round(y)):
                raise InputError("labels must be integers")
        y = y.astype(np.int64)
        bad = np.flatnonzero((y < -1) | (y >= C))
        if bad.size:
            raise InputError(f"label {y[bad[0]]} out of range [0, {C}) at row {bad[0]}")
        x = None
        if self.features is not None:
            x = np.asarray(self.features, dtype=np.float64)
            if x.ndim != 2 or x.shape[0] != n:
                raise InputError(f"features must be N x d with N={n}, got {x.shape}")
        ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (n,) or np.unique(ids).size != n:
            raise InputError("sample ids must be unique, one per sample")
        g = None
        if self.group is not None:
            g = np.asarray(self.group, dtype=bool)
            if g.shape != (n,):
                raise InputError("group flags must align with samples")
        object.__setattr__(self, "logits", _frozen(z.copy()))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "features", None if x is None else _frozen(x.copy()))
        object.__setattr__(self, "num_classes", C)
        object.__setattr__(self, "ids", _frozen(ids.copy()))
        object.__setattr__(self, "group", None if g is None else _frozen(g.copy()))

    def __len__(self) -> int:
        return self.logits.shape[0]

    def __iter__(self) -> Iterator[EvalSample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> EvalSample:
        z = self.logits[i] if not self.is_probs else np.log(np.maximum(self.logits[i], 1e-300))
        x = None if self.features is None else self.features[i]
        return EvalSample(LogitVector(z), int(self.labels[i]), x)

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)

    @property
    def correct(self) -> np.ndarray:
        return (self.labels >= 0) & (self.predicted == self.labels)

    @property
    def positives(self) -> np.ndarray:
        return self.correct if self.group is None else self.group

    def probs(self, T: float = 1.0) -> np.ndarray:
        if self.is_probs:
            return temper_probs(self.logits, T)
        return softmax_with_temperature(self.logits, T)

    def with_logits(self, logits: np.ndarray) -> "EvalDataset":
        """Same samples with new model outputs (e.g. after input perturbation)."""
        return EvalDataset(logits, self.labels, self.features, self.num_classes, self.source_tag,
                           self.ids, self.group, is_probs=False)

    def subset(self, idx: Sequence[int]) -> "EvalDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return EvalDataset(
            self.logits[idx], self.labels[idx],
            None if self.features is None else self.features[idx],
            self.num_classes, self.source_tag, self.ids[idx],
            None if self.group is None else self.group[idx], self.is_probs,
        )

    @staticmethod
    def concat(parts: Sequence["EvalDataset"], source_tag: str = "") -> "EvalDataset":
        if not parts:
            raise InputError("nothing to concatenate")
        C = {p.num_classes for p in parts}
        if len(C) != 1 or len({p.is_probs for p in parts}) != 1:
            raise InputError("datasets disagree on class count or output kind")
        feats = None
        if all(p.features is not None for p in parts):
            feats = np.concatenate([p.features for p in parts])
        groups = None
        if any(p.group is not None for p in parts):
            groups = np.concatenate([p.positives for p in parts])
        return EvalDataset(
            np.concatenate([p.logits for p in parts]),
            np.concatenate([p.labels for p in parts]),
            feats, C.pop(), source_tag or "+".join(p.source_tag for p in parts),
            np.concatenate([p.ids for p in parts]), groups, parts[0].is_probs,
        )


@dataclass(frozen=True)
class DetectorConfig:
    method: Method
    temperature: float = 1.0
    epsilon: float = 0.0
    lam: Optional[float] = None
    alpha: float = 0.1
    orientation: str = field(default="UNCERTAINTY_HIGH_MEANS_ERROR")

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        check_temperature(self.temperature)
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ParameterError(f"perturbation magnitude must be >= 0, got {self.epsilon}")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "temperature": self.temperature,
            "epsilon": self.epsilon,
            "lambda": self.lam,
            "alpha": self.alpha,
            "orientation": self.orientation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(Method.parse(d["method"]), float(d.get("temperature", 1.0)),
                   float(d.get("epsilon", 0.0)),
                   None if d.get("lambda") is None else float(d["lambda"]),
                   float(d.get("alpha", 0.1)))
