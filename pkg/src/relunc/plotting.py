"""Deterministic SVG figures: observer-matrix heatmaps, ROC / risk-coverage
curves and radar summaries."""

from __future__ import annotations

import logging
import warnings
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import numpy as np
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from .metrics import MetricsReport

log = logging.getLogger(__name__)

FIGSIZE = (6.4, 4.8)
WIDE_FIGSIZE = (10.0, 4.4)
RC = {"svg.hashsalt": "relunc", "svg.fonttype": "path", "font.size": 9.0}


class PlotSkipped(UserWarning):
    pass


def _save(fig: Figure, path: Path) -> Path:
    with matplotlib.rc_context(RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def _skip(name: str, why: str) -> None:
    warnings.warn(f"skipping {name}: {why}", PlotSkipped, stacklevel=3)


def _annotated_colorbar(fig, im, ax, values: np.ndarray):
    lo, hi = float(np.min(values)), float(np.max(values))
    cb = fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    cb.set_ticks([lo, hi] if hi > lo else [lo])
    cb.set_ticklabels([f"min {lo:.3g}", f"max {hi:.3g}"] if hi > lo else [f"{lo:.3g}"])
    return cb


def plot_heatmaps(d_matrix, confusion: Optional[np.ndarray], path, title: str = "") -> Path:
    """Observer matrix beside the confusion matrix (darker blue = larger).

    The confusion matrix diagonal (correct predictions) is hatched rather than
    coloured, so the colour scale reflects the off-diagonal errors only.
    """
    D = np.asarray(getattr(d_matrix, "entries", d_matrix), dtype=np.float64)
    C = D.shape[0]
    with matplotlib.rc_context(RC):
        ncols = 2 if confusion is not None else 1
        fig = Figure(figsize=WIDE_FIGSIZE if ncols == 2 else FIGSIZE)
        axes = fig.subplots(1, ncols, squeeze=False)[0]
        ax = axes[0]
        im = ax.imshow(D, cmap="Blues", vmin=D.min(), vmax=D.max() if D.max() > D.min() else D.min() + 1)
        _annotated_colorbar(fig, im, ax, D)
        ax.set_title("observer matrix D")
        for i in range(C):
            for j in range(C):
                ax.text(j, i, f"{D[i, j]:.2f}", ha="center", va="center", fontsize=7,
                        color="white" if D.max() > 0 and D[i, j] > 0.6 * D.max() else "black")
        if confusion is not None:
            M = np.asarray(confusion, dtype=np.float64)
            off = M.copy()
            np.fill_diagonal(off, np.nan)
            vals = off[~np.isnan(off)]
            ax2 = axes[1]
            lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
            im2 = ax2.imshow(np.ma.masked_invalid(off), cmap="Blues", vmin=lo, vmax=hi if hi > lo else lo + 1)
            _annotated_colorbar(fig, im2, ax2, vals if vals.size else np.zeros(1))
            for i in range(C):
                ax2.add_patch(Rectangle((i - 0.5, i - 0.5), 1, 1, fill=False, hatch="//", linestyle="--",
                                        edgecolor="0.5"))
                for j in range(C):
                    ax2.text(j, i, f"{int(M[i, j])}", ha="center", va="center", fontsize=7)
            ax2.set_title("confusion matrix (rows: true)")
        for a in axes:
            a.set_xticks(range(C))
            a.set_yticks(range(C))
        if title:
            fig.suptitle(title)
        return _save(fig, Path(path))


def plot_roc(reports: Sequence[MetricsReport], path, title: str = "ROC") -> Path:
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=FIGSIZE)
        ax = fig.subplots()
        for rep in reports:
            pts = np.array([(f, t) for f, t, _ in rep.roc_points])
            ax.plot(pts[:, 0], pts[:, 1], drawstyle="steps-post", label=f"{rep.method} (AUROC {rep.auroc:.3f})")
        ax.plot([0, 1], [0, 1], color="0.7", linestyle=":", linewidth=0.8)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, Path(path))


def plot_risk_coverage(reports: Sequence[MetricsReport], path, title: str = "risk-coverage") -> Path:
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=FIGSIZE)
        ax = fig.subplots()
        for rep in reports:
            pts = np.array([(c, r) for c, r, _ in rep.rc_points])
            ax.plot(pts[:, 0], pts[:, 1], label=f"{rep.method} (AURC {rep.aurc:.4f})")
        ax.set_xlim(0, 1)
        ax.set_xlabel("coverage")
        ax.set_ylabel("risk")
        ax.set_title(title)
        ax.legend(loc="upper left")
        return _save(fig, Path(path))


def plot_radar(aggregate: Sequence[dict], path, axis_key: str = "value", metric: str = "auroc_mean",
               title: str = "") -> Path:
    """One polygon per method over the values of ``axis_key``."""
    axes_vals = sorted({r[axis_key] for r in aggregate if r.get(axis_key) is not None})
    methods = sorted({r["method"] for r in aggregate})
    angles = np.linspace(0, 2 * np.pi, len(axes_vals), endpoint=False)
    with matplotlib.rc_context(RC):
        fig = Figure(figsize=FIGSIZE)
        ax = fig.add_subplot(projection="polar")
        for m in methods:
            by = {r[axis_key]: r.get(metric, r.get(metric.removesuffix("_mean"))) for r in aggregate if r["method"] == m}
            vals = np.array([np.nan if by.get(v) is None else by[v] for v in axes_vals], dtype=float)
            ax.plot(np.append(angles, angles[0]), np.append(vals, vals[0]), marker="o", label=m)
        ax.set_xticks(angles)
        ax.set_xticklabels([f"{axis_key}={v:g}" for v in axes_vals])
        ax.set_title(title or f"{metric} by {axis_key}")
        ax.legend(loc="upper right", bbox_to_anchor=(1.3, 1.1))
        return _save(fig, Path(path))


def _first_per_method(reports):
    seen = {}
    for r in reports:
        if r is not None and r.method not in seen:
            seen[r.method] = r
    return [seen[k] for k in sorted(seen)]


def render_plots(reports: Sequence[MetricsReport], out_dir, aggregate: Optional[Sequence[dict]] = None,
                 prefix: str = "") -> list[Path]:
    """Every plot the inputs support; a plot whose data is missing is skipped with a warning.

    Curves use the first report of each method (lowest seed in run order).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reps = _first_per_method(reports)
    written = []
    with_roc = [r for r in reps if r.roc_points]
    if with_roc:
        written.append(plot_roc(with_roc, out_dir / f"{prefix}roc.svg"))
    else:
        _skip("ROC plot", "no report carries ROC points")
    with_rc = [r for r in reps if r.rc_points]
    if with_rc:
        written.append(plot_risk_coverage(with_rc, out_dir / f"{prefix}risk_coverage.svg"))
    else:
        _skip("risk-coverage plot", "no report carries risk-coverage points")
    with_d = [r for r in reports if r is not None and "d_matrix" in r.extras]
    if with_d:
        r = with_d[0]
        cm = r.extras.get("confusion_matrix")
        written.append(plot_heatmaps(np.array(r.extras["d_matrix"]), None if cm is None else np.array(cm),
                                     out_dir / f"{prefix}d_matrix.svg", title=f"seed {r.seed}"))
    else:
        _skip("observer-matrix heatmap", "no report carries a learned D matrix")
    if aggregate:
        for key in ("value", "fraction"):
            if len({a.get(key) for a in aggregate if a.get(key) is not None}) >= 3:
                written.append(plot_radar(aggregate, out_dir / f"{prefix}radar.svg", axis_key=key))
                break
        else:
            _skip("radar plot", "fewer than three experiment axis values")
    return written
