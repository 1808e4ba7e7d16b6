import json
import subprocess
import sys

import numpy as np
import pytest

from rehab_assess import cli, gmm, io
from rehab_assess.errors import NumericalError
from rehab_assess.metrics import cohens_kappa, krippendorff_alpha


def _run(*argv):
    return cli.run([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    spec = tmp_path_factory.mktemp("spec") / "gen.json"
    spec.write_text(json.dumps({
        "format": "kinect_v2", "duration_frames": 30,
        "n_correct": 20, "n_incorrect": 20, "annotators": 2, "annotator_flip": 0.2,
    }))
    assert _run("generate", "--spec", spec, "--out", out, "--seed", 3) == 0
    return out


def test_generate_writes_manifest_and_config(dataset):
    seqs = io.load_dataset(dataset / "manifest.json")
    assert len(seqs) == 40
    cfg = json.loads((dataset / "resolved_config.json").read_text())
    assert cfg["seed"] == 3 and cfg["n_correct"] == 20


def test_generate_resolved_config_reproduces(dataset, tmp_path):
    assert _run("generate", "--spec", dataset / "resolved_config.json", "--out", tmp_path) == 0
    for name in ("manifest.json", "resolved_config.json"):
        assert (tmp_path / name).read_bytes() == (dataset / name).read_bytes()
    first = sorted(p.name for p in dataset.glob("*.json"))
    assert sorted(p.name for p in tmp_path.glob("*.json")) == first
    for name in first:
        assert (tmp_path / name).read_bytes() == (dataset / name).read_bytes()


def test_agreement_matches_library(dataset, tmp_path, capsys):
    assert _run("agreement", "--data", dataset, "--out", tmp_path) == 0
    result = json.loads((tmp_path / "agreement.json").read_text())
    ann = [list(s.annotations) for s in io.load_dataset(dataset / "manifest.json")]
    assert result["cohens_kappa"] == cohens_kappa([a[0] for a in ann], [a[1] for a in ann])
    assert result["krippendorff_alpha"] == krippendorff_alpha(ann)
    assert "cohens_kappa" in capsys.readouterr().out


def test_sweep_writes_report(dataset, tmp_path, capsys):
    spec = tmp_path / "sweep.json"
    spec.write_text(json.dumps({
        "algorithm": "gmm", "skeleton_format": "kinect_v2", "train_sizes": [8], "validation_sizes": [6],
        "repeats": 2, "preprocess": {"target_length": 16}, "gmm": {"K": 2},
    }))
    out = tmp_path / "out"
    assert _run("sweep", "--data", dataset, "--spec", spec, "--out", out, "--jobs", 1) == 0
    assert {"report.csv", "resolved_config.json"} <= {p.name for p in out.iterdir()}
    assert "train=8" in capsys.readouterr().out
    again = tmp_path / "again"
    assert _run("sweep", "--data", dataset, "--spec", out / "resolved_config.json", "--out", again, "--jobs", 1) == 0
    assert (again / "report.csv").read_bytes() == (out / "report.csv").read_bytes()
    assert _run("report", "--data", out) == 0
    assert "gmm" in capsys.readouterr().out


def test_train_and_evaluate_gmm(dataset, tmp_path):
    seqs = io.load_dataset(dataset / "manifest.json")
    paths = [e.path for e in io.read_manifest(dataset / "manifest.json")]
    splits = (["train"] * 12 + ["validation"] * 4 + ["test"] * 4) * 2
    manifest = tmp_path / "split.json"
    io.write_manifest(manifest, paths, splits)
    spec = tmp_path / "train.json"
    spec.write_text(json.dumps({"preprocess": {"target_length": 16}, "gmm": {"K": 2}}))
    model = tmp_path / "model"
    assert _run("train-gmm", "--data", manifest, "--spec", spec, "--out", model) == 0
    clf = gmm.load_model(model / "model.json")
    assert clf.threshold is not None
    ev = tmp_path / "ev"
    assert _run("evaluate", "--data", manifest, "--model", model, "--out", ev) == 0
    result = json.loads((ev / "predictions.json").read_text())
    assert len(result["predictions"]) == 8 and 0.0 <= result["f1"] <= 1.0
    assert len(seqs) == 40
    # retraining from the resolved config gives the same model
    again = tmp_path / "again"
    assert _run("train-gmm", "--data", manifest, "--spec", model / "resolved_config.json", "--out", again) == 0
    assert (again / "model.json").read_bytes() == (model / "model.json").read_bytes()


def test_train_stgcn_small(dataset, tmp_path):
    spec = tmp_path / "st.json"
    spec.write_text(json.dumps({
        "preprocess": {"target_length": 12},
        "stgcn": {"blocks": [[3, 4, 4, 3]], "lstm_hidden": 4, "epochs": 2},
    }))
    assert _run("train-stgcn", "--data", dataset, "--spec", spec, "--out", tmp_path) == 0
    assert (tmp_path / "model.pt").exists()


def test_ingest_joint_tables(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    rng = np.random.default_rng(0)
    for name in ("s1", "s2"):
        rows = rng.normal(size=(10, 75)).tolist()
        (raw / f"{name}.txt").write_text("\n".join(" ".join(str(v) for v in r) for r in rows) + "\n")
    out = tmp_path / "out"
    assert _run("ingest", "--data", raw, "--format", "kinect_v2", "--label", "correct", "--exercise", "e1", "--out", out) == 0
    seqs = io.load_dataset(out / "manifest.json")
    assert [s.subject_id for s in seqs] == ["s1", "s2"]
    assert all(s.label == "correct" and s.exercise_id == "e1" and s.shape == (10, 25, 3) for s in seqs)


def test_unknown_flag_is_usage_error(capsys):
    assert _run("sweep", "--bogus") == 1
    err = capsys.readouterr().err
    assert "usage:" in err


def test_missing_required_option(capsys):
    assert _run("train-gmm", "--out", "x") == 1
    assert "--data" in capsys.readouterr().err


def test_malformed_data_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "kinect_v2", "frames": [[1, 2]]}')
    assert _run("agreement", "--data", bad) == 2
    assert "error" in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path):
    assert _run("agreement", "--data", tmp_path / "nope.json") in (1, 2)


def test_numerical_failure_exits_3(dataset, tmp_path, monkeypatch, capsys):
    def boom(*_a, **_k):
        raise NumericalError("covariance is not positive definite")

    monkeypatch.setattr(gmm, "fit", boom)
    spec = tmp_path / "t.json"
    spec.write_text(json.dumps({"preprocess": {"target_length": 8}}))
    assert _run("train-gmm", "--data", dataset, "--spec", spec, "--out", tmp_path / "m") == 3
    assert "numerical" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rehab_assess", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sweep" in proc.stdout
