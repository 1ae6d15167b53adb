"""Shared test utilities (oracles and constructors)."""

import numpy as np

from relunc.model_lab import ClassifierModel, finite_difference_gradient, init_model


def random_model(arch: str, dim: int, num_classes: int, seed: int, hidden=(16,)) -> ClassifierModel:
    """He-initialised hidden layers plus a random (not zero) output layer."""
    rng = np.random.default_rng(seed + 1000)
    m = init_model(dim, num_classes, arch, hidden, seed)
    W, b = m.layers[-1]
    m.layers[-1] = (rng.normal(size=W.shape) * 0.5, rng.normal(size=b.shape) * 0.1)
    return m


def fd_stencil_is_smooth(model: ClassifierModel, x: np.ndarray, kind: str) -> bool:
    """False when the central-difference stencil around ``x`` may straddle a
    ReLU kink or (for the max-probability score) an argmax switch."""
    reach = 1e-4 * (1 + np.abs(x))
    acts, pre = model._forward(x[None])
    for k, (W, _) in enumerate(model.layers[:-1]):
        reach = np.abs(W) @ reach
        if np.any(np.abs(pre[k][0]) <= 4 * reach):
            return False
    if kind == "msp":
        z = np.sort(acts[-1][0])
        reach = np.abs(model.layers[-1][0]) @ reach
        if z[-1] - z[-2] <= 8 * reach.max():
            return False
    return True


def relative_error(a, b) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def fd_gradient_of_functional(model, functional, x):
    return finite_difference_gradient(lambda v: float(functional.value(model.forward(v[None, :]))[0]), x)


def brute_force_fpr_at_tpr(pos, neg, level):
    """Every candidate threshold, lowest first; FPR at the first reaching the TPR level."""
    pos = np.asarray(pos, dtype=float)
    neg = np.asarray(neg, dtype=float)
    for t in sorted(set(pos.tolist()) | set(neg.tolist())):
        tpr = sum(1 for v in pos if v <= t) / len(pos)
        if tpr >= level - 1e-12:
            return sum(1 for v in neg if v <= t) / len(neg)
    raise AssertionError("unreachable: the largest threshold has TPR 1")


def pairwise_auroc(pos, neg):
    wins = sum(1.0 if n > p else 0.5 if n == p else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))
