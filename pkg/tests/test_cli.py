import json
import subprocess
import sys

import numpy as np
import pytest

from relunc import io as rio
from relunc.cli import main
from relunc.core import EvalDataset, Method
from relunc.metrics import build_report
from relunc.model_lab import ClassifierModel
from relunc.tune import GridSpec, grid_search


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(out[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train -> infer, shared by the tests below."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--benchmark", "--out-dir", str(d / "data")]) == 0
    assert main(["train", "--features", str(d / "data/train_features.npy"),
                 "--labels", str(d / "data/train_labels.npy"), "--out-dir", str(d / "model")]) == 0
    assert main(["infer", "--model", str(d / "model/model.json"),
                 "--features", str(d / "data/tune_features.npy"), "--out-dir", str(d / "tune")]) == 0
    assert main(["infer", "--model", str(d / "model/model.json"),
                 "--features", str(d / "data/test_features.npy"), "--out-dir", str(d / "test")]) == 0
    return d


def test_provenance_record(capsys, pipeline, tmp_path):
    d = pipeline
    code, rec = run(capsys, "fit", "--method", "REL_U", "--logits", d / "tune/logits.npy",
                    "--labels", d / "data/tune_labels.npy", "--out-dir", tmp_path, "--seed", 4)
    assert code == 0
    assert rec["command"] == "fit" and rec["status"] == "ok" and rec["seed"] == 4
    assert set(rec["inputs"]) == {"logits", "labels"}
    assert all(len(v["sha256"]) == 16 for v in rec["inputs"].values())
    assert str(tmp_path / "detector.json") in rec["outputs"]
    assert (tmp_path / "d_matrix.csv").exists() and (tmp_path / "d_matrix.json").exists()


def test_full_pipeline_fit_score_evaluate(capsys, pipeline, tmp_path):
    d = pipeline
    assert run(capsys, "fit", "--method", "DOCTOR", "--temperature", 1.5, "--logits", d / "tune/logits.npy",
               "--labels", d / "data/tune_labels.npy", "--out-dir", tmp_path)[0] == 0
    assert run(capsys, "score", "--detector", tmp_path / "detector.json", "--logits", d / "test/logits.npy",
               "--out-dir", tmp_path)[0] == 0
    code, rec = run(capsys, "evaluate", "--scores", tmp_path / "scores.npy", "--logits", d / "test/logits.npy",
                    "--labels", d / "data/test_labels.npy", "--detector", tmp_path / "detector.json",
                    "--out-dir", tmp_path)
    assert code == 0
    rep = json.loads((tmp_path / "report.json").read_text())["reports"][0]
    assert rep["method"] == "GINI_DOCTOR" and rep["config"]["temperature"] == 1.5
    assert 0.0 <= rec["fpr_at_tpr"]["0.95"] <= 1.0 and rec["auroc"] > 0.5


def test_cli_matches_library_grid_cell(capsys, pipeline, tmp_path):
    d = pipeline
    Z = rio.load_matrix(d / "tune/logits.npy")
    y = rio.load_labels(d / "data/tune_labels.npy")
    ds = EvalDataset(Z, y)
    grid = GridSpec(temperatures=(0.75, 1.5), epsilons=(0.0,), lambdas=(0.3, 0.7))
    cells = {(c["temperature"], c["lambda"]): v for c, v, _ in grid_search(Method.REL_U, ds, grid).cells}
    for (T, lam), value in cells.items():
        out = tmp_path / f"{T}_{lam}"
        run(capsys, "fit", "--method", "REL_U", "--temperature", T, "--lambda", lam,
            "--logits", d / "tune/logits.npy", "--labels", d / "data/tune_labels.npy", "--out-dir", out)
        run(capsys, "score", "--detector", out / "detector.json", "--logits", d / "tune/logits.npy",
            "--out-dir", out)
        code, rec = run(capsys, "evaluate", "--scores", out / "scores.npy", "--logits", d / "tune/logits.npy",
                        "--labels", d / "data/tune_labels.npy", "--out-dir", out)
        assert code == 0
        assert rec["fpr_at_tpr"]["0.95"] == value


def test_tune_command_writes_grid(capsys, pipeline, tmp_path):
    d = pipeline
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps({"grids": {"temperatures": [1.0, 2.0], "epsilons": [0.0], "lambdas": [0.5]}}))
    code, rec = run(capsys, "tune", "--method", "REL_U", "--config", cfg, "--logits", d / "tune/logits.npy",
                    "--labels", d / "data/tune_labels.npy", "--out-dir", tmp_path)
    assert code == 0
    assert len((tmp_path / "grid.csv").read_text().splitlines()) == 3
    assert rec["best"]["lambda"] == 0.5


def test_probability_file_bypasses_softmax(capsys, pipeline, tmp_path):
    d = pipeline
    Z = rio.load_matrix(d / "test/logits.npy")
    y = rio.load_labels(d / "data/test_labels.npy")
    P = EvalDataset(Z, y).probs(1.0)
    rio.save_array(tmp_path / "probs.npy", P)
    for name, path, flag in (("logits", d / "test/logits.npy", []), ("probs", tmp_path / "probs.npy",
                                                                      ["--probs-input"])):
        out = tmp_path / name
        run(capsys, "fit", "--method", "DOCTOR", "--logits", path, "--labels", d / "data/test_labels.npy",
            "--out-dir", out, *flag)
        run(capsys, "score", "--detector", out / "detector.json", "--logits", path, "--out-dir", out, *flag)
        run(capsys, "evaluate", "--scores", out / "scores.npy", "--logits", path,
            "--labels", d / "data/test_labels.npy", "--out-dir", out, *flag)
    a = json.loads((tmp_path / "logits/report.json").read_text())["reports"][0]
    b = json.loads((tmp_path / "probs/report.json").read_text())["reports"][0]
    for k in ("fpr_at_tpr", "auroc", "aurc"):
        assert a[k] == b[k]
    assert a["ece"] == pytest.approx(b["ece"], abs=1e-12)
    # the in-memory metrics are unchanged by the save/reload
    s = -P.max(axis=1)
    pos = P.argmax(axis=1) == y
    direct = build_report(s, pos, "MSP")
    again = build_report(-rio.load_matrix(tmp_path / "probs.npy").max(axis=1), pos, "MSP")
    assert direct.to_dict() == again.to_dict()


def test_exit_code_input_error(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\n3\n")
    code = main(["fit", "--method", "MSP", "--logits", str(bad), "--labels", str(bad), "--out-dir", str(tmp_path)])
    captured = capsys.readouterr()
    assert code == 1
    assert json.loads(captured.out.strip())["status"] == "error"
    assert "ragged row 2" in captured.err


def test_exit_code_protocol_error(capsys, pipeline, tmp_path):
    d = pipeline
    rio.save_array(tmp_path / "tune_rows.csv", np.arange(0, 600))
    rio.save_array(tmp_path / "eval_rows.csv", np.arange(500, 1000))
    rio.save_array(tmp_path / "clean_rows.csv", np.arange(600, 1000))
    common = ["--logits", d / "tune/logits.npy", "--labels", d / "data/tune_labels.npy", "--out-dir", tmp_path]
    assert run(capsys, "fit", "--method", "REL_U", "--rows", tmp_path / "tune_rows.csv", *common)[0] == 0
    code, rec = run(capsys, "score", "--detector", tmp_path / "detector.json", "--holdout",
                    "--rows", tmp_path / "eval_rows.csv", *common)
    assert code == 2 and rec["exit_code"] == 2
    code, _ = run(capsys, "score", "--detector", tmp_path / "detector.json", "--holdout",
                  "--rows", tmp_path / "clean_rows.csv", *common)
    assert code == 0
    assert rio.load_vector(tmp_path / "scores.npy").size == 400


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_code_numerical_error(capsys, tmp_path):
    X = np.random.default_rng(0).normal(size=(40, 3)) * 1e300
    rio.save_array(tmp_path / "x.npy", X)
    rio.save_array(tmp_path / "y.npy", np.arange(40) % 2)
    code = main(["train", "--features", str(tmp_path / "x.npy"), "--labels", str(tmp_path / "y.npy"),
                 "--lr", "1e300", "--epochs", "5", "--out-dir", str(tmp_path)])
    assert code == 3
    assert json.loads(capsys.readouterr().out.strip())["exit_code"] == 3


def test_out_dir_environment_variable(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("RELUNC_OUT_DIR", str(tmp_path / "env_out"))
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"num_classes": 3, "dim": 2, "n_train": 20, "n_tune": 10, "n_test": 10}))
    code, rec = run(capsys, "synth", "--config", cfg, "--format", "csv")
    assert code == 0
    assert (tmp_path / "env_out/train_features.csv").exists()
    assert rec["config"] == str(cfg)


def test_synth_reruns_byte_identical(capsys, tmp_path):
    for sub in ("a", "b"):
        assert run(capsys, "synth", "--benchmark", "--seed", 3, "--out-dir", tmp_path / sub)[0] == 0
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_train_and_model_reload(capsys, pipeline):
    m = ClassifierModel.load(pipeline / "model/model.json")
    X = rio.load_matrix(pipeline / "data/test_features.npy")
    assert np.array_equal(m.forward(X), rio.load_matrix(pipeline / "test/logits.npy"))


def test_experiment_and_plot_commands(capsys, pipeline, tmp_path):
    d = pipeline
    cfg = {"mode": "ablation", "data": {"logits": str(d / "test/logits.npy"),
                                        "labels": str(d / "data/test_labels.npy")},
           "split": {"seeds": [0, 1]}, "ablation": {"axis": "lambda", "values": [0.2, 0.5, 0.8]}}
    cp = tmp_path / "exp.json"
    cp.write_text(json.dumps(cfg))
    outs = []
    for sub in ("a", "b"):
        code, rec = run(capsys, "experiment", "--config", cp, "--out-dir", tmp_path / sub)
        assert code == 0 and rec["rows"] == 6 and rec["failed"] == 0
        outs.append(sorted(p for p in (tmp_path / sub).rglob("*") if p.is_file()))
    assert [p.name for p in outs[0]] == [p.name for p in outs[1]]
    for p, q in zip(*outs):
        assert p.read_bytes() == q.read_bytes()
    assert (tmp_path / "a/figures/radar.svg").exists()
    code, rec = run(capsys, "plot", "--report", tmp_path / "a/reports.json", "--out-dir", tmp_path / "plots")
    assert code == 0 and (tmp_path / "plots/roc.svg").exists()


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "relunc.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("relunc ")
