"""Learning the observer matrix behind the relative-uncertainty score.

The fit is closed form: with ``mu_pos`` / ``mu_neg`` the mean outer products
of the soft predictions of correctly / incorrectly classified samples, the
off-diagonal entries are ``relu(lam * mu_neg - (1 - lam) * mu_pos)``, rescaled
so that the squared Frobenius norm equals the budget ``K``. When every entry
vanishes the problem's minimiser is the zero matrix, which carries no
information; the Hamming matrix (reducing the score to Gini) is substituted.

:func:`fit_d_matrix_oracle` solves the same constrained problem by projected
gradient descent and exists to cross-check the closed form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import EvalDataset, as_probs, check_temperature
from .errors import DegenerateInputError, InputError, NumericalError, ParameterError
from .scores import hamming_matrix

CORRECTNESS = "CORRECTNESS"
MEMBERSHIP = "MEMBERSHIP"


@dataclass(frozen=True)
class GroupedProbs:
    """Soft predictions split into positives (correct / in-distribution) and negatives."""

    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positives, dtype=np.float64)
        neg = np.asarray(self.negatives, dtype=np.float64)
        C = pos.shape[-1] if pos.size else neg.shape[-1]
        pos = pos.reshape(-1, C)
        neg = neg.reshape(-1, C)
        if pos.size:
            as_probs(pos)
        if neg.size:
            as_probs(neg)
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "negatives", neg)

    @property
    def n_pos(self) -> int:
        return self.positives.shape[0]

    @property
    def n_neg(self) -> int:
        return self.negatives.shape[0]

    @property
    def num_classes(self) -> int:
        return self.positives.shape[1]

    def require_both(self) -> None:
        if self.n_pos == 0:
            raise DegenerateInputError("no positive samples: the positive group is empty")
        if self.n_neg == 0:
            raise DegenerateInputError("no negative samples: the negative group is empty")


def assign_groups(dataset: EvalDataset, mode: str = CORRECTNESS,
                  secondary: Optional[EvalDataset] = None, T: float = 1.0) -> GroupedProbs:
    """Split soft predictions at temperature ``T`` into the two groups.

    CORRECTNESS uses whether the argmax matches the label. MEMBERSHIP treats
    every sample of ``dataset`` as positive and every sample of ``secondary``
    as negative, ignoring correctness.
    """
    T = check_temperature(T)
    mode = mode.upper()
    if mode == CORRECTNESS:
        if np.all(dataset.labels < 0):
            raise InputError("CORRECTNESS grouping needs true labels")
        probs = dataset.probs(T)
        ok = dataset.correct
        groups = GroupedProbs(probs[ok], probs[~ok])
    elif mode == MEMBERSHIP:
        if secondary is None:
            raise InputError("MEMBERSHIP grouping needs a secondary dataset")
        groups = GroupedProbs(dataset.probs(T), secondary.probs(T))
    else:
        raise ParameterError(f"unknown grouping mode {mode!r}")
    groups.require_both()
    return groups


def cooccurrence_mean(probs) -> np.ndarray:
    """Mean of ``p^T p`` over the rows of ``probs``.

    Each entry is accumulated with ``math.fsum`` (exactly rounded), so the
    result does not depend on sample order.
    """
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise DegenerateInputError("co-occurrence mean of an empty set of probability vectors")
    n, C = P.shape
    out = np.empty((C, C))
    for i in range(C):
        for j in range(i, C):
            s = math.fsum(P[:, i] * P[:, j]) / n
            out[i, j] = out[j, i] = s
    return out


@dataclass(frozen=True)
class RelUMatrix:
    entries: np.ndarray
    K: float = 1.0
    fallback: bool = False
    lambda_used: Optional[float] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        D = np.array(self.entries, dtype=np.float64)
        if D.ndim != 2 or D.shape[0] != D.shape[1] or D.shape[0] < 2:
            raise InputError(f"observer matrix must be square with C >= 2, got {D.shape}")
        if not np.all(np.isfinite(D)):
            raise NumericalError("observer matrix has non-finite entries")
        if np.any(D != D.T):
            raise InputError("observer matrix must be symmetric")
        if np.any(np.diag(D) != 0):
            raise InputError("observer matrix must have a zero diagonal")
        if np.any(D < 0):
            raise InputError("observer matrix must be entrywise non-negative")
        if not self.K > 0:
            raise ParameterError(f"norm budget must be positive, got {self.K}")
        if np.sum(D * D) > self.K * (1 + 1e-9):
            raise InputError("observer matrix exceeds its norm budget")
        D.setflags(write=False)
        object.__setattr__(self, "entries", D)

    @property
    def num_classes(self) -> int:
        return self.entries.shape[0]

    def sidecar(self) -> dict:
        return {
            "C": self.num_classes,
            "K": self.K,
            "lambda": self.lambda_used,
            "fallback": self.fallback,
            "provenance": self.provenance,
        }

    def save(self, path) -> tuple[Path, Path]:
        """Write ``path`` as CSV (17 significant digits) and a ``.json`` sidecar."""
        path = Path(path)
        lines = [",".join(f"{v:.17g}" for v in row) for row in self.entries]
        path.write_text("\n".join(lines) + "\n")
        side = path.with_suffix(".json")
        side.write_text(json.dumps(self.sidecar(), sort_keys=True, indent=2) + "\n")
        return path, side

    @classmethod
    def load(cls, path) -> "RelUMatrix":
        path = Path(path)
        rows = [r for r in path.read_text().splitlines() if r.strip()]
        D = np.array([[float(v) for v in r.split(",")] for r in rows])
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("C") != D.shape[0]:
            raise InputError(f"{path}: sidecar declares C={meta.get('C')}, matrix is {D.shape}")
        return cls(D, float(meta["K"]), bool(meta["fallback"]), meta.get("lambda"),
                   meta.get("provenance", {}))

    def to_dict(self) -> dict:
        d = self.sidecar()
        d["entries"] = self.entries.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RelUMatrix":
        return cls(np.array(d["entries"]), float(d["K"]), bool(d["fallback"]), d.get("lambda"),
                   d.get("provenance", {}))


def default_lambda(groups: GroupedProbs) -> float:
    return groups.n_pos / (groups.n_pos + groups.n_neg)


def _check_fit_args(groups: GroupedProbs, lam, K) -> tuple[float, float]:
    groups.require_both()
    lam = default_lambda(groups) if lam is None else float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    K = float(K)
    if not np.isfinite(K) or K <= 0:
        raise ParameterError(f"norm budget K must be positive, got {K}")
    return lam, K


def unnormalized_d(groups: GroupedProbs, lam: float) -> np.ndarray:
    mu_pos = cooccurrence_mean(groups.positives)
    mu_neg = cooccurrence_mean(groups.negatives)
    U = np.maximum(lam * mu_neg - (1.0 - lam) * mu_pos, 0.0)
    np.fill_diagonal(U, 0.0)
    return U


def fit_d_matrix(groups: GroupedProbs, lam: Optional[float] = None, K: float = 1.0) -> RelUMatrix:
    """Closed-form observer matrix; ``lam`` defaults to N+/(N+ + N-)."""
    lam, K = _check_fit_args(groups, lam, K)
    U = unnormalized_d(groups, lam)
    norm = math.sqrt(math.fsum((U * U).ravel()))
    prov = {"n_pos": groups.n_pos, "n_neg": groups.n_neg}
    if norm == 0.0:
        C = groups.num_classes
        D = hamming_matrix(C) * (math.sqrt(K) / math.sqrt(C * C - C))
        return RelUMatrix(D, K, True, lam, prov)
    D = U * (math.sqrt(K) / norm)
    # rounding in the rescale may break the budget by an ulp
    over = np.sum(D * D) / K
    if over > 1.0:
        D = D / math.sqrt(over)
    return RelUMatrix(D, K, False, lam, prov)


def objective_value(D, groups: GroupedProbs, lam: float) -> float:
    """Contrastive objective: weighted mean positive score minus mean negative score."""
    D = np.asarray(getattr(D, "entries", D), dtype=np.float64)
    C = groups.num_classes
    if D.shape != (C, C):
        raise InputError(f"matrix shape {D.shape} does not match {C} classes")
    pos = np.einsum("ni,ij,nj->n", groups.positives, D, groups.positives)
    neg = np.einsum("ni,ij,nj->n", groups.negatives, D, groups.negatives)
    return float((1.0 - lam) * math.fsum(pos) / pos.size - lam * math.fsum(neg) / neg.size)


def project_feasible(D: np.ndarray, K: float) -> np.ndarray:
    """Euclidean projection onto {symmetric, zero diagonal, D >= 0, ||D||_F^2 <= K}.

    Symmetrise, zero the diagonal, clamp at zero, then shrink into the ball.
    The first three steps project onto a convex cone; projecting onto the
    cone and then scaling is exact for a ball centred at the cone's apex.
    """
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    D = np.maximum(D, 0.0)
    n = np.sqrt(np.sum(D * D))
    r = math.sqrt(K)
    if n > r:
        D = D * (r / n)
    return D


def fit_d_matrix_oracle(groups: GroupedProbs, lam: Optional[float] = None, K: float = 1.0,
                        max_iters: int = 20000, step_size: float = 0.5, seed: int = 0,
                        init: Optional[np.ndarray] = None, tol: float = 1e-13) -> RelUMatrix:
    """Projected gradient descent on the constrained objective.

    The gradient is the plain (non-compensated) mean of outer products, so
    this path shares nothing with :func:`fit_d_matrix` beyond the input.
    ``step_size`` is relative: the actual step is ``step_size * sqrt(K) / ||grad||``.
    """
    lam, K = _check_fit_args(groups, lam, K)
    Pp, Pn = groups.positives, groups.negatives
    G = (1.0 - lam) * (Pp.T @ Pp) / Pp.shape[0] - lam * (Pn.T @ Pn) / Pn.shape[0]
    G = 0.5 * (G + G.T)
    C = G.shape[0]
    if init is None:
        rng = np.random.default_rng(seed)
        D = project_feasible(rng.uniform(size=(C, C)), K)
        D = D * (math.sqrt(K) / np.sqrt(np.sum(D * D)))
    else:
        D = project_feasible(np.array(init, dtype=np.float64), K)
    off = G[~np.eye(C, dtype=bool)]
    gnorm = float(np.sqrt(np.sum(off * off)))
    if gnorm == 0.0:
        return RelUMatrix(D, K, False, lam, {"iterations": 0, "method": "pgd"})
    eta = step_size * math.sqrt(K) / gnorm
    step = np.inf
    for it in range(1, max_iters + 1):
        D_new = project_feasible(D - eta * G, K)
        step = float(np.sqrt(np.sum((D_new - D) ** 2)))
        D = D_new
        if step <= tol * math.sqrt(K):
            # exact symmetry/zero diagonal for the returned value
            D = np.triu(D, 1)
            D = D + D.T
            return RelUMatrix(D, K, False, lam, {"iterations": it, "method": "pgd"})
    raise NumericalError(
        f"projected gradient did not converge in {max_iters} iterations; "
        f"final projected-gradient norm {step / eta:.3e}"
    )
