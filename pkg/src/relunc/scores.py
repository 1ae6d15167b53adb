"""Per-sample uncertainty scores.

Every function returns values in the canonical orientation: higher means
more uncertain, i.e. more likely to be a misclassification. Inputs are
probability vectors along the last axis, so a single vector or an ``(N, C)``
batch both work.
"""

from __future__ import annotations

import numpy as np

from .core import as_probs
from .errors import InputError


def shannon_entropy(p) -> "float | np.ndarray":
    """Natural-log entropy with 0 log 0 = 0."""
    p = as_probs(p)
    terms = np.zeros_like(p)
    nz = p > 0
    terms[nz] = p[nz] * np.log(p[nz])
    return _out(-terms.sum(axis=-1))


def gini_score(p) -> "float | np.ndarray":
    """``1 - sum p_y^2``, evaluated as ``sum_y p_y * sum_{y' != y} p_y'``.

    The second form avoids the cancellation in ``1 - sum p^2`` for near
    one-hot vectors, so tiny scores keep their ordering.
    """
    p = as_probs(p)
    zero = np.zeros(p.shape[:-1] + (1,))
    left = np.concatenate([zero, np.cumsum(p, axis=-1)[..., :-1]], axis=-1)
    rev = np.cumsum(np.flip(p, axis=-1), axis=-1)[..., :-1]
    right = np.concatenate([np.flip(rev, axis=-1), zero], axis=-1)
    return _out(np.sum(p * (left + right), axis=-1))


def msp_uncertainty(p) -> "float | np.ndarray":
    """One minus the maximum softmax probability."""
    p = as_probs(p)
    return _out(1.0 - p.max(axis=-1))


def rel_u_score(p, D) -> "float | np.ndarray":
    """Bilinear relative-uncertainty score ``p D p^T``.

    ``D`` may be a plain matrix or anything with an ``entries`` attribute
    (a fitted :class:`relunc.relu_learn.RelUMatrix`).
    """
    p = as_probs(p)
    D = np.asarray(getattr(D, "entries", D), dtype=np.float64)
    C = p.shape[-1]
    if D.shape != (C, C):
        raise InputError(f"observer matrix has shape {D.shape}, expected ({C}, {C})")
    return _out(np.einsum("...i,ij,...j->...", p, D, p))


def hamming_matrix(C: int) -> np.ndarray:
    """Ones off the diagonal, zeros on it. With it, rel_u_score equals gini_score."""
    return np.ones((C, C)) - np.eye(C)


def _out(v: np.ndarray):
    return float(v) if np.ndim(v) == 0 else v
