import csv
import json
import re

import numpy as np
import pytest

from relunc.core import DetectorConfig, Method
from relunc.errors import InputError
from relunc.experiment import asymmetric_confusion_benchmark
from relunc.metrics import build_report
from relunc.plotting import PlotSkipped, plot_heatmaps, plot_roc, render_plots
from relunc.report import emit_report, load_reports
from relunc.scores import hamming_matrix
from relunc.tune import SplitSpec, evaluate_detector, fit_detector, make_splits


@pytest.fixture(scope="module")
def bench():
    return asymmetric_confusion_benchmark(0)


def make_report(seed, n=200, method="GINI_DOCTOR"):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(size=n) < 0.8
    s = rng.normal(size=n) + (~pos) * 1.5
    P = rng.dirichlet(np.ones(3), size=n)
    y = rng.integers(0, 3, size=n)
    return build_report(s, pos, method, P, y, config={"method": method, "temperature": 1.0}, seed=seed,
                        split={"fraction": 0.5})


def test_same_report_identical_bytes(tmp_path):
    a = emit_report(make_report(0), tmp_path / "a")
    b = emit_report(make_report(0), tmp_path / "b")
    for p, q in zip(a, b):
        assert p.read_bytes() == q.read_bytes()


def test_ten_seeds_give_ten_rows_and_one_aggregate(tmp_path):
    reps = [make_report(s) for s in range(10)]
    paths = emit_report(reps, tmp_path, formats=("csv",))
    rows = list(csv.DictReader(paths[0].open()))
    assert len(rows) == 11
    assert [r["seed"] for r in rows[:10]] == [str(s) for s in range(10)]
    agg = rows[10]
    assert agg["seed"] == "aggregate" and agg["n_seeds"] == "10"
    assert float(agg["auroc"]) == pytest.approx(np.mean([r.auroc for r in reps]), rel=1e-15)


def test_json_round_trip_lossless(tmp_path):
    rep = make_report(3)
    (p,) = emit_report(rep, tmp_path, formats=("json",))
    back = load_reports(p)[0]
    assert back.to_dict() == rep.to_dict()
    assert back.fpr95 == rep.fpr95 and back.roc_points == rep.roc_points
    keys = list(json.loads(p.read_text())["reports"][0])
    assert keys == sorted(keys)


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(InputError):
        emit_report(make_report(0), blocker / "sub")


def test_unknown_format(tmp_path):
    with pytest.raises(InputError):
        emit_report(make_report(0), tmp_path, formats=("xml",))


@pytest.mark.filterwarnings("ignore::relunc.plotting.PlotSkipped")
def test_svg_deterministic(tmp_path):
    reps = [make_report(0), make_report(1, method="MSP")]
    a = render_plots(reps, tmp_path / "a")
    b = render_plots(reps, tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    for p, q in zip(a, b):
        assert p.read_bytes() == q.read_bytes()
        assert p.read_text().lstrip().startswith("<?xml")


def _annotations(svg_text):
    return re.findall(r"<!-- ([^<>]*?) -->", svg_text)


def test_fallback_heatmap_uniform_off_diagonal(tmp_path):
    D = hamming_matrix(4) / np.sqrt(12)
    p = plot_heatmaps(D, None, tmp_path / "h.svg")
    notes = _annotations(p.read_text())
    cells = [n for n in notes if re.fullmatch(r"\d\.\d\d", n)]
    assert sorted(set(cells)) == ["0.00", f"{1 / np.sqrt(12):.2f}"]
    assert cells.count("0.00") == 4 and len(cells) == 16


def test_heatmap_colorbar_annotated(tmp_path):
    D = np.array([[0.0, 0.9], [0.2, 0.0]])
    text = plot_heatmaps(D, np.array([[10, 3], [1, 7]]), tmp_path / "h.svg").read_text()
    assert "min 0" in text and "max 0.9" in text


def test_perfect_detector_roc_hugs_corner(tmp_path):
    pos = np.array([True] * 50 + [False] * 50)
    rep = build_report((~pos).astype(float), pos, "oracle")
    pts = np.array([(f, t) for f, t, _ in rep.roc_points])
    assert ((pts[:, 0] == 0) & (pts[:, 1] == 1)).any()
    assert rep.auroc == 1.0
    assert plot_roc([rep], tmp_path / "roc.svg").stat().st_size > 0


def test_benchmark_heatmap_matches_confusion(tmp_path, bench):
    (ti, ei), = make_splits(bench.test, SplitSpec(0.5, (0,)))
    det = fit_detector(DetectorConfig(Method.REL_U, 1.0, 0.0, 0.5), bench.test.subset(ti))
    rep = evaluate_detector(det, bench.test.subset(ei), seed=0)
    D = np.array(rep.extras["d_matrix"])
    M = np.array(rep.extras["confusion_matrix"], dtype=float)
    np.fill_diagonal(M, -1)
    i, j = np.unravel_index(np.argmax(D), D.shape)
    k, l = np.unravel_index(np.argmax(M), M.shape)
    assert {int(i), int(j)} == {int(k), int(l)}
    paths = render_plots([rep], tmp_path)
    assert (tmp_path / "d_matrix.svg") in paths


def test_missing_data_skips_with_warning(tmp_path):
    rep = make_report(0)
    rep.roc_points = []
    with pytest.warns(PlotSkipped) as rec:
        paths = render_plots([rep], tmp_path, aggregate=[{"value": 1.0, "method": "X", "auroc_mean": 0.5}])
    msgs = " ".join(str(w.message) for w in rec)
    assert "ROC" in msgs and "heatmap" in msgs and "radar" in msgs
    assert [p.name for p in paths] == ["risk_coverage.svg"]


@pytest.mark.filterwarnings("ignore::relunc.plotting.PlotSkipped")
def test_radar_written_for_three_axis_values(tmp_path):
    agg = [{"value": v, "method": m, "auroc_mean": 0.5 + v / 10} for v in (0.1, 0.2, 0.3) for m in ("A", "B")]
    paths = render_plots([make_report(0)], tmp_path, aggregate=agg)
    assert (tmp_path / "radar.svg") in paths
