"""Tests for the command-line interface."""

from __future__ import annotations

import json

import pytest

from mmagg import trainer
from mmagg.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, run
from mmagg.const import VERSION
from mmagg.datastore import load_dataset, read_features
from mmagg.evaluation import PredictionSet, read_class_ap
from mmagg.introspect import read_ablation_csv
from mmagg.model import load_model

SYNTH_SPEC = {
    "num_classes": 3,
    "videos_per_class": 6,
    "modalities": [
        {"name": "x", "dim": 3, "fps": 1, "clusters": 2},
        {"name": "y", "dim": 2, "fps": 0.5, "clusters": 2},
    ],
    "duration_s": 20,
    "seed": 3,
}


@pytest.fixture
def workspace(tmp_path, capsys):
    """A synthetic dataset plus a run config that points at it."""
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SYNTH_SPEC), encoding="utf-8")
    assert run(["synth", "--spec", str(spec), "--out", str(tmp_path / "data")]) == EXIT_OK
    config = tmp_path / "run.json"
    config.write_text(
        json.dumps(
            {
                "manifest": str(tmp_path / "data" / "manifest.json"),
                "hidden_size": 8,
                "sample_size": 5,
                "epochs": 2,
                "batch_size": 4,
                "repeats": 2,
                "seed": 1,
            }
        ),
        encoding="utf-8",
    )
    capsys.readouterr()
    return tmp_path


def test_version(capsys):
    assert run(["--version"]) == EXIT_OK
    assert VERSION in capsys.readouterr().out


def test_usage_errors_exit_with_two(capsys):
    assert run(["no-such-command"]) == EXIT_USAGE
    assert run(["train"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_runtime_errors_exit_with_one(tmp_path, capsys):
    code = run(["evaluate", "--manifest", str(tmp_path / "absent.json"), "--predictions", "p.csv"])
    assert code == EXIT_FAILURE
    assert "error:" in capsys.readouterr().err
    assert run(["train", "--out", str(tmp_path / "m.mmck")]) == EXIT_FAILURE


def test_train_predict_evaluate_ensemble(workspace, capsys):
    config = str(workspace / "run.json")
    ckpt = workspace / "m.mmck"
    assert run(["train", "--config", config, "--out", str(ckpt)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "epoch 2 loss" in out and f"checkpoint {ckpt} sha256" in out
    model, tensors = load_model(ckpt)
    assert model.sample_size == 5 and [spec.name for spec in model.modalities] == ["x", "y"]
    assert "adam.step" in tensors

    first, second = workspace / "p1.csv", workspace / "p2.csv"
    assert run(["predict", "--config", config, "--ckpt", str(ckpt), "--out", str(first)]) == EXIT_OK
    assert run(["predict", "--config", config, "--ckpt", str(ckpt), "--out", str(second), "--seed", "9"]) == EXIT_OK
    preds = PredictionSet.from_csv(first)
    assert len(preds.video_ids) == 6 and preds.num_classes == 3

    ap_table = workspace / "ap.csv"
    assert run(["evaluate", "--config", config, "--predictions", str(first), "--out", str(ap_table)]) == EXIT_OK
    assert capsys.readouterr().out.count("mAP") == 1
    assert [row.class_name for row in read_class_ap(ap_table)] == ["class_0", "class_1", "class_2"]

    merged = workspace / "ensemble.csv"
    manifest = str(workspace / "data" / "manifest.json")
    code = run(["ensemble", str(first), str(second), "--out", str(merged), "--manifest", manifest])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "member 0 mAP" in out and "member 1 mAP" in out
    assert PredictionSet.from_csv(merged).video_ids == preds.video_ids


def test_threaded_predictions_are_byte_identical(workspace):
    config = str(workspace / "run.json")
    ckpt = str(workspace / "m.mmck")
    assert run(["train", "--config", config, "--out", ckpt, "--epochs", "1"]) == EXIT_OK
    serial, threaded = workspace / "serial.csv", workspace / "threaded.csv"
    assert run(["predict", "--config", config, "--ckpt", ckpt, "--out", str(serial), "--split", "all"]) == EXIT_OK
    assert (
        run(["--threads", "3", "predict", "--config", config, "--ckpt", ckpt, "--out", str(threaded), "--split", "all"])
        == EXIT_OK
    )
    assert serial.read_bytes() == threaded.read_bytes()


def test_resume_and_modality_subset(workspace, capsys):
    config = str(workspace / "run.json")
    base, resumed = str(workspace / "base.mmck"), str(workspace / "resumed.mmck")
    assert run(["train", "--config", config, "--out", base, "--epochs", "1", "--modalities", "y"]) == EXIT_OK
    assert run(["train", "--config", config, "--out", resumed, "--epochs", "1", "--resume", base]) == EXIT_OK
    model, _ = load_model(resumed)
    assert [spec.name for spec in model.modalities] == ["y"]
    assert "epoch 1 loss" in capsys.readouterr().out


def test_introspection_commands(workspace, capsys):
    config = str(workspace / "run.json")
    ckpt = str(workspace / "m.mmck")
    assert run(["train", "--config", config, "--out", ckpt, "--epochs", "1"]) == EXIT_OK
    common = ["--config", config, "--ckpt", ckpt]

    ablation = workspace / "ablation.csv"
    assert run(["ablate", *common, "--video", "c01v0005", "--class", "1", "--out", str(ablation)]) == EXIT_OK
    (report,) = read_ablation_csv(ablation)
    assert report.video_id == "c01v0005" and list(report.contributions) == ["x", "y"]

    top = workspace / "top.json"
    args = ["inspect-clusters", *common, "--modality", "x", "--cluster", "1", "--top", "3", "--format", "json"]
    assert run([*args, "--out", str(top), "--all-frames"]) == EXIT_OK
    assert len(json.loads(top.read_text(encoding="utf-8"))) == 3

    histogram = workspace / "hist.svg"
    args = ["inspect-clusters", *common, "--modality", "y", "--video", "c00v0000", "--format", "svg"]
    assert run([*args, "--out", str(histogram)]) == EXIT_OK
    assert 'id="bar-1"' in histogram.read_text(encoding="utf-8")

    timeline = workspace / "timeline.csv"
    args = ["timeline", *common, "--video", "c02v0001", "--class", "2", "--step", "5", "--out", str(timeline)]
    assert run(args) == EXIT_OK
    assert "points 4" in capsys.readouterr().out

    assert run(["inspect-clusters", *common, "--modality", "x", "--out", str(top)]) == EXIT_FAILURE


def test_gradcheck_command(capsys):
    assert run(["gradcheck", "--seed", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "gradcheck passed" in out and "input.m1" in out
    assert run(["gradcheck", "--seed", "2", "--tolerance", "1e-30"]) == EXIT_FAILURE
    assert "gradcheck failed" in capsys.readouterr().out


def test_gradcheck_takes_the_model_from_the_config(tmp_path, monkeypatch, capsys):
    built = []
    check = trainer.gradient_check

    def _recording_check(model, sample, step, tolerance):
        built.append(model)
        return check(model, sample, step, 10.0)

    monkeypatch.setattr(trainer, "gradient_check", _recording_check)
    config = tmp_path / "small.json"
    config.write_text(
        json.dumps({"hidden_size": 3, "experts": 1, "sample_size": 2, "seed": 9, "clusters": {"m1": 4}}),
        encoding="utf-8",
    )
    assert run(["gradcheck", "--config", str(config)]) == EXIT_OK
    assert run(["gradcheck", "--config", str(config), "--hidden-size", "5", "--clusters", "2"]) == EXIT_OK
    assert run(["gradcheck"]) == EXIT_OK
    first, overridden, plain = (model.config for model in built)
    assert (first["hidden_size"], first["experts"], first["sample_size"]) == (3, 1, 2)
    assert [spec.clusters for spec in built[0].modalities] == [3, 4]
    assert overridden["hidden_size"] == 5 and [spec.clusters for spec in built[1].modalities] == [2, 2]
    assert (plain["hidden_size"], plain["experts"], plain["sample_size"]) == (8, 2, 6)


def test_preprocess_commands(dataset, tmp_path, capsys):
    manifest = str(dataset.path)
    models = tmp_path / "pca"
    code = run(["fit-preprocess", "--manifest", manifest, "--dim", "a=2", "--out-dir", str(models), "--seed", "4"])
    assert code == EXIT_OK
    assert "preprocess a" in capsys.readouterr().out

    out_dir = tmp_path / "reduced"
    args = ["apply-preprocess", "--manifest", manifest, "--model", f"a={models / 'a.pca.mmck'}"]
    assert run([*args, "--out-dir", str(out_dir), "--quantize"]) == EXIT_OK
    reduced = load_dataset(out_dir / "manifest.json")
    assert reduced.modality("a").dim == 2 and reduced.modality("b").dim == 2
    seq = read_features(reduced.video("v0").features["a"], "a")
    assert seq.dim == 2 and seq.count == 30

    assert run(["fit-preprocess", "--manifest", manifest, "--out-dir", str(models)]) == EXIT_FAILURE
    assert run(["fit-preprocess", "--manifest", manifest, "--dim", "a=9", "--out-dir", str(models)]) == EXIT_FAILURE


def test_synth_preset(tmp_path, capsys):
    assert run(["synth", "--preset", "uninformative", "--seed", "1", "--out", str(tmp_path / "noise")]) == EXIT_OK
    assert len(load_dataset(tmp_path / "noise" / "manifest.json").videos) == 200
    assert run(["synth", "--out", str(tmp_path / "none")]) == EXIT_FAILURE
