"""Desk-scale stand-ins for the classifier under study.

Gaussian class-conditional data with tunable pairwise confusion, small
softmax classifiers trained full-batch with numpy, analytic input gradients
of log-score functionals, the signed-gradient input perturbation used by
ODIN / Doctor / Rel-U, and the MLP misclassification detector baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .core import check_temperature, softmax_with_temperature
from .errors import DegenerateInputError, InputError, NumericalError, ParameterError

LINEAR = "linear"
MLP = "mlp"
LOG_FLOOR = 1e-12


# --------------------------------------------------------------------------- data

@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 5
    dim: int = 10
    separation: float = 4.0
    noise: float = 1.0
    confusion_pairs: Sequence[tuple] = ()
    class_noise: Optional[Sequence[float]] = None
    train_label_flips: Sequence[tuple] = ()
    n_train: int = 2000
    n_tune: int = 1000
    n_test: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.dim < 1:
            raise ParameterError("need at least 2 classes and 1 feature dimension")
        if self.noise <= 0 or self.separation < 0:
            raise ParameterError("noise must be positive and separation non-negative")
        for n in (self.n_train, self.n_tune, self.n_test):
            if int(n) <= 0:
                raise ParameterError(f"split sizes must be positive, got {n}")
        pairs = []
        for p in self.confusion_pairs:
            i, j, s = int(p[0]), int(p[1]), float(p[2])
            if not (0 <= i < self.num_classes and 0 <= j < self.num_classes and i != j):
                raise ParameterError(f"confusion pair {p} does not name two distinct classes")
            if s < 0:
                raise ParameterError(f"overlap strength must be >= 0, got {s}")
            pairs.append((i, j, s))
        object.__setattr__(self, "confusion_pairs", tuple(pairs))
        flips = []
        for p in self.train_label_flips:
            i, j, r = int(p[0]), int(p[1]), float(p[2])
            if not (0 <= i < self.num_classes and 0 <= j < self.num_classes and i != j and 0 <= r <= 1):
                raise ParameterError(f"label flip {p} must name two distinct classes and a rate in [0, 1]")
            flips.append((i, j, r))
        object.__setattr__(self, "train_label_flips", tuple(flips))
        if self.class_noise is not None:
            cn = tuple(float(v) for v in self.class_noise)
            if len(cn) != self.num_classes or min(cn) <= 0:
                raise ParameterError("class_noise needs one positive scale per class")
            object.__setattr__(self, "class_noise", cn)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["confusion_pairs"] = [list(p) for p in self.confusion_pairs]
        d["train_label_flips"] = [list(p) for p in self.train_label_flips]
        d["class_noise"] = None if self.class_noise is None else list(self.class_noise)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["confusion_pairs"] = [tuple(p) for p in d.get("confusion_pairs", ())]
        d["train_label_flips"] = [tuple(p) for p in d.get("train_label_flips", ())]
        return cls(**d)


class LabeledFeatures(NamedTuple):
    X: np.ndarray
    y: np.ndarray


class SynthData(NamedTuple):
    train: LabeledFeatures
    tune: LabeledFeatures
    test: LabeledFeatures
    means: np.ndarray


def class_means(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Random class centres of norm ``separation``; confusion pairs are pulled together.

    Overlap strength ``s`` shrinks the distance between the two centres by a
    factor ``1 + s`` around their midpoint.
    """
    M = rng.standard_normal((config.num_classes, config.dim))
    M *= config.separation / np.linalg.norm(M, axis=1, keepdims=True)
    for i, j, s in config.confusion_pairs:
        mid = 0.5 * (M[i] + M[j])
        M[i] = mid + (M[i] - mid) / (1.0 + s)
        M[j] = mid + (M[j] - mid) / (1.0 + s)
    return M


def _sample(n: int, means: np.ndarray, noise: np.ndarray, rng: np.random.Generator) -> LabeledFeatures:
    C, d = means.shape
    y = rng.permutation(np.arange(n) % C)
    X = means[y] + noise[y, None] * rng.standard_normal((n, d))
    return LabeledFeatures(X, y.astype(np.int64))


def synth_generate(config: SynthConfig) -> SynthData:
    rng = np.random.default_rng(config.seed)
    M = class_means(config, rng)
    noise = config.noise * np.asarray(config.class_noise or [1.0] * config.num_classes)
    train = _sample(config.n_train, M, noise, rng)
    y = train.y.copy()
    for i, j, r in config.train_label_flips:
        # swap labels between the two classes at the given rate, training split only
        u = rng.uniform(size=y.size) < r
        y[(train.y == i) & u] = j
        y[(train.y == j) & u] = i
    train = LabeledFeatures(train.X, y)
    tune = _sample(config.n_tune, M, noise, rng)
    test = _sample(config.n_test, M, noise, rng)
    return SynthData(train, tune, test, M)


# ------------------------------------------------------------------------ models

@dataclass
class ClassifierModel:
    """Linear softmax or ReLU MLP; ``layers`` holds ``(W, b)`` with ``W`` of shape (out, in)."""

    architecture: str
    layers: list
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def dim(self) -> int:
        return self.layers[0][0].shape[1]

    def _forward(self, X: np.ndarray):
        acts = [X]
        pre = []
        h = X
        for k, (W, b) in enumerate(self.layers):
            a = h @ W.T + b
            pre.append(a)
            h = np.maximum(a, 0.0) if k < len(self.layers) - 1 else a
            acts.append(h)
        return acts, pre

    def forward(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.dim:
            raise InputError(f"model expects {self.dim} features, got {X.shape[1]}")
        Z = self._forward(X)[0][-1]
        return Z[0] if single else Z

    def _backward(self, acts, pre, G):
        """Returns (parameter grads, input grad) for upstream logit gradient ``G``."""
        grads = [None] * len(self.layers)
        g = G
        for k in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[k]
            if k < len(self.layers) - 1:
                g = g * (pre[k] > 0)
            grads[k] = (g.T @ acts[k], g.sum(axis=0))
            g = g @ W
        return grads, g

    def vjp(self, X, G) -> np.ndarray:
        """Input gradient given d(functional)/d(logits) ``G`` per row."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        acts, pre = self._forward(X)
        return self._backward(acts, pre, np.atleast_2d(G))[1]

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "shapes": [[list(W.shape), list(b.shape)] for W, b in self.layers],
            "weights": [[W.ravel().tolist(), b.tolist()] for W, b in self.layers],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierModel":
        layers = []
        for (ws, bs), (w, b) in zip(d["shapes"], d["weights"]):
            W = np.array(w, dtype=np.float64).reshape(ws)
            layers.append((W, np.array(b, dtype=np.float64).reshape(bs)))
        return cls(d["architecture"], layers, d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (KeyError, ValueError, TypeError) as e:
            raise InputError(f"{path}: not a model weight file ({e})") from None


def init_model(dim: int, num_classes: int, architecture: str = LINEAR,
               hidden: Sequence[int] = (32,), seed: int = 0) -> ClassifierModel:
    """He-normal hidden layers; the output layer starts at zero so untrained
    logits are constant and every prediction falls to class 0."""
    if architecture not in (LINEAR, MLP):
        raise ParameterError(f"unknown architecture {architecture!r}")
    rng = np.random.default_rng(seed)
    widths = [dim] + (list(hidden) if architecture == MLP else []) + [num_classes]
    layers = []
    for k in range(len(widths) - 1):
        fan_in, fan_out = widths[k], widths[k + 1]
        if k < len(widths) - 2:
            W = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        else:
            W = np.zeros((fan_out, fan_in))
        layers.append((W, np.zeros(fan_out)))
    meta = {"hidden": list(hidden) if architecture == MLP else []}
    return ClassifierModel(architecture, layers, meta)


def _cross_entropy(Z: np.ndarray, y: np.ndarray):
    Z = Z - Z.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    n = y.shape[0]
    loss = -logp[np.arange(n), y].mean()
    G = np.exp(logp)
    G[np.arange(n), y] -= 1.0
    return loss, G / n


def train_classifier(X, y, num_classes: Optional[int] = None, architecture: str = LINEAR,
                     hidden: Sequence[int] = (32,), epochs: int = 200, lr: float = 0.05,
                     seed: int = 0, weight_decay: float = 0.0) -> ClassifierModel:
    """Full-batch Adam on cross-entropy. Deterministic for a fixed seed."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    C = int(num_classes if num_classes is not None else y.max() + 1)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise InputError("features must be N x d with one label per row")
    if y.min() < 0 or y.max() >= C:
        raise InputError(f"labels must lie in [0, {C})")
    missing = np.setdiff1d(np.arange(C), y)
    if missing.size:
        raise DegenerateInputError(f"no training samples for class {missing[0]}")
    if epochs < 0 or lr <= 0:
        raise ParameterError("epochs must be >= 0 and learning rate positive")
    model = init_model(X.shape[1], C, architecture, hidden, seed)
    params = [p for layer in model.layers for p in layer]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    loss = float("nan")
    for t in range(1, epochs + 1):
        acts, pre = model._forward(X)
        loss, G = _cross_entropy(acts[-1], y)
        if not np.isfinite(loss):
            raise NumericalError(f"training diverged at epoch {t} (loss {loss})")
        grads, _ = model._backward(acts, pre, G)
        flat = [g for pair in grads for g in pair]
        for k, (p, g) in enumerate(zip(params, flat)):
            if weight_decay and p.ndim == 2:
                g = g + weight_decay * p
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            p -= lr * (m[k] / (1 - b1 ** t)) / (np.sqrt(v[k] / (1 - b2 ** t)) + eps)
    if epochs:
        loss, _ = _cross_entropy(model._forward(X)[0][-1], y)
    else:
        loss, _ = _cross_entropy(model.forward(X), y)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params):
        raise NumericalError(f"training diverged: final loss {loss}, non-finite weights")
    model.meta.update({"epochs": epochs, "lr": lr, "seed": seed, "final_loss": float(loss)})
    return model


def accuracy(model: ClassifierModel, X, y) -> float:
    return float(np.mean(np.argmax(model.forward(X), axis=1) == np.asarray(y)))


# ------------------------------------------------------------------- functionals

class LogitComponent:
    """The ``k``-th logit."""

    def __init__(self, k: int):
        self.k = k

    def value(self, Z):
        return np.atleast_2d(Z)[:, self.k]

    def grad(self, Z):
        G = np.zeros_like(np.atleast_2d(Z))
        G[:, self.k] = 1.0
        return G


class ConstantFunctional:
    def __init__(self, c: float = 0.0):
        self.c = c

    def value(self, Z):
        return np.full(np.atleast_2d(Z).shape[0], self.c)

    def grad(self, Z):
        return np.zeros_like(np.atleast_2d(Z))


class LogScore:
    """``log s(softmax(z / T))`` for a score ``s``.

    ``kind`` is one of ``msp`` (maximum probability, the ODIN confidence),
    ``gini``, ``entropy`` or ``rel_u`` (needs ``d_matrix``). The score is
    floored at 1e-12 before the log; below the floor the gradient is zero.
    """

    KINDS = ("msp", "gini", "entropy", "rel_u")

    def __init__(self, kind: str, temperature: float = 1.0, d_matrix=None):
        if kind not in self.KINDS:
            raise ParameterError(f"unknown score functional {kind!r}")
        if kind == "rel_u" and d_matrix is None:
            raise ParameterError("rel_u functional needs an observer matrix")
        self.kind = kind
        self.T = check_temperature(temperature)
        self.D = None if d_matrix is None else np.asarray(getattr(d_matrix, "entries", d_matrix), dtype=np.float64)

    def _score_and_dp(self, P):
        if self.kind == "msp":
            k = np.argmax(P, axis=1)
            s = P[np.arange(P.shape[0]), k]
            dp = np.zeros_like(P)
            dp[np.arange(P.shape[0]), k] = 1.0
        elif self.kind == "gini":
            s = 1.0 - np.sum(P * P, axis=1)
            dp = -2.0 * P
        elif self.kind == "entropy":
            with np.errstate(divide="ignore", invalid="ignore"):
                logp = np.where(P > 0, np.log(P), 0.0)
            s = -np.sum(P * logp, axis=1)
            dp = np.where(P > 0, -(logp + 1.0), 0.0)
        else:
            DP = P @ self.D.T
            s = np.sum(DP * P, axis=1)
            dp = DP + P @ self.D
        return s, dp

    def value(self, Z):
        P = softmax_with_temperature(np.atleast_2d(Z), self.T)
        s, _ = self._score_and_dp(P)
        return np.log(np.maximum(s, LOG_FLOOR))

    def grad(self, Z):
        P = softmax_with_temperature(np.atleast_2d(Z), self.T)
        s, dp = self._score_and_dp(P)
        live = s > LOG_FLOOR
        g = np.where(live[:, None], dp / np.where(live, s, 1.0)[:, None], 0.0)
        return (P * g - P * np.sum(P * g, axis=1, keepdims=True)) / self.T


def finite_difference_gradient(f: Callable[[np.ndarray], float], x) -> np.ndarray:
    """Central differences with step ``1e-4 * (1 + |x_i|)``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        h = 1e-4 * (1.0 + abs(x.flat[i]))
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def input_gradient(model, x, functional) -> np.ndarray:
    """Gradient of ``functional`` with respect to the model input.

    Built-in models with a logit functional (anything with ``value``/``grad``
    on logits) use reverse mode; any other callable ``functional(x) -> float``
    falls back to central finite differences. ``x`` may be one vector or a
    batch of rows.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if isinstance(model, ClassifierModel) and hasattr(functional, "grad"):
        acts, pre = model._forward(X)
        G = functional.grad(acts[-1])
        g = model._backward(acts, pre, G)[1]
    else:
        if hasattr(functional, "value"):
            fn = lambda v: float(functional.value(model.forward(v[None, :]))[0])  # noqa: E731
        else:
            fn = functional
        g = np.stack([finite_difference_gradient(fn, row) for row in X])
    if not np.all(np.isfinite(g)):
        r, c = np.argwhere(~np.isfinite(g))[0]
        raise NumericalError(f"non-finite input gradient at sample {r}, feature {c}")
    return g[0] if single else g


def perturb_input(model, x, eps: float, score_fn) -> np.ndarray:
    """One signed-gradient step: ``x - eps * sign(-grad log s(x))``.

    ``score_fn`` is a :class:`LogScore` (or any functional accepted by
    :func:`input_gradient` that already returns ``log s``).
    """
    if not eps >= 0:
        raise ParameterError(f"perturbation magnitude must be >= 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x
    g = input_gradient(model, x, score_fn)
    return x - eps * np.sign(-g)


# --------------------------------------------------------------- MLP detector

@dataclass
class MLPDetector:
    """Binary error classifier on standardised model outputs."""

    model: ClassifierModel
    mean: np.ndarray
    scale: np.ndarray

    def score(self, inputs) -> np.ndarray:
        """Predicted probability of a misclassification, in [0, 1]."""
        Z = self.model.forward((np.atleast_2d(inputs) - self.mean) / self.scale)
        return softmax_with_temperature(Z, 1.0)[:, 1]

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MLPDetector":
        return cls(ClassifierModel.from_dict(d["model"]), np.array(d["mean"]), np.array(d["scale"]))


def train_mlp_detector(inputs, is_error, width: int = 128, depth: int = 1, epochs: int = 300,
                       lr: float = 1e-2, seed: int = 0, weight_decay: float = 1e-4) -> MLPDetector:
    """Fit a ReLU MLP (``depth`` hidden layers of ``width`` units) to predict errors."""
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    e = np.asarray(is_error, dtype=bool)
    if e.shape != (X.shape[0],):
        raise InputError("error flags must align with detector inputs")
    if e.all() or not e.any():
        raise DegenerateInputError("MLP detector needs both correct and erroneous samples")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    model = train_classifier((X - mean) / scale, e.astype(np.int64), 2, MLP, (width,) * depth,
                             epochs, lr, seed, weight_decay)
    return MLPDetector(model, mean, scale)
