"""Report emission: canonical JSON and flat CSV tables."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import InputError
from .metrics import MetricsReport

ROW_FIELDS = ("split", "fraction", "value", "seed", "method", "status", "temperature", "epsilon", "lambda",
              "fpr95", "auroc", "aurc", "ece", "n_seeds", "n_failed", "error")
METRICS = ("fpr95", "auroc", "aurc", "ece")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def canonical_json(obj) -> str:
    """Sorted keys, fixed indentation, trailing newline."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def table_csv(rows: Sequence[dict], fields: Sequence[str] = ROW_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_cell(r.get(f)) for f in fields])
    return buf.getvalue()


def report_row(rep: MetricsReport) -> dict:
    cfg = rep.config or {}
    split = rep.split or {}
    return {
        "split": split.get("mode", "matched"), "fraction": split.get("fraction"), "value": split.get("value"),
        "seed": rep.seed, "method": rep.method, "status": rep.status,
        "temperature": cfg.get("temperature"), "epsilon": cfg.get("epsilon"), "lambda": cfg.get("lambda"),
        "fpr95": rep.fpr95, "auroc": rep.auroc, "aurc": rep.aurc, "ece": rep.ece,
    }


def aggregate_report_rows(rows: Sequence[dict]) -> list:
    """One aggregate row per (split, fraction, value, method): mean over successful seeds."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.get("split"), r.get("fraction"), r.get("value"), r["method"]), []).append(r)
    out = []
    for (split, frac, value, method), rs in groups.items():
        ok = [r for r in rs if r.get("status", "ok") == "ok"]
        agg = {"split": split, "fraction": frac, "value": value, "seed": "aggregate", "method": method,
               "status": "aggregate", "n_seeds": len(ok), "n_failed": len(rs) - len(ok)}
        for m in METRICS:
            vals = [r[m] for r in ok if r.get(m) is not None]
            agg[m] = float(np.mean(vals)) if vals else None
        out.append(agg)
    return out


ReportLike = Union[MetricsReport, Iterable[MetricsReport]]


def emit_report(report: ReportLike, out_dir, formats: Sequence[str] = ("json", "csv"),
                name: str = "report", meta: Optional[dict] = None) -> list[Path]:
    """Write one or several reports as ``<name>.json`` and/or ``<name>.csv``.

    The JSON holds the full reports (curves included); the CSV holds one row
    per (seed, method, split) followed by one aggregate row per method.
    """
    reports = [report] if isinstance(report, MetricsReport) else [r for r in report if r is not None]
    bad = set(formats) - {"json", "csv"}
    if bad:
        raise InputError(f"unknown report format(s): {sorted(bad)}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create output directory {out_dir}: {e}") from None
    written = []
    rows = [report_row(r) for r in reports]
    try:
        if "json" in formats:
            payload = {"reports": [r.to_dict() for r in reports], "aggregate": aggregate_report_rows(rows)}
            if meta:
                payload["meta"] = meta
            p = out_dir / f"{name}.json"
            p.write_text(canonical_json(payload))
            written.append(p)
        if "csv" in formats:
            p = out_dir / f"{name}.csv"
            p.write_text(table_csv(rows + aggregate_report_rows(rows)))
            written.append(p)
    except OSError as e:
        raise InputError(f"cannot write report to {out_dir}: {e}") from None
    return written


def load_reports(path) -> list[MetricsReport]:
    """Inverse of the JSON side of :func:`emit_report`."""
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read report {path}: {e}") from None
    items = d.get("reports", [d]) if isinstance(d, dict) else d
    return [MetricsReport.from_dict(r) for r in items]
