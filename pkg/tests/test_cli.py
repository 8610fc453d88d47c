"""End-to-end command-line tests run in-process through dispatch()."""

import json
import os

import numpy as np
import pytest

from tinysel import serialize
from tinysel.cli import dispatch
from tinysel.reports import load_report

# small but deep enough for the 6-block full-data baseline (length 64)
GEN = ["--num-classes", "4", "--clusters-per-class", "2", "--channels", "2",
       "--length", "64", "--n", "64"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny pipeline run shared by the read-only tests below."""
    d = str(tmp_path_factory.mktemp("pipe"))
    steps = [
        ["gen-data", "--out", d, "--seed", "1"] + GEN,
        ["train-strong", "--out", d, "--seed", "1",
         "--train", f"{d}/train.bin", "--epochs", "1", "--batch-size", "16",
         "--num-classifiers", "2"],
        ["split", "--out", d, "--seed", "1", "--train", f"{d}/train.bin",
         "--strong", f"{d}/strong.bin", "--num-classifiers", "2"],
        ["pretrain", "--out", d, "--seed", "1",
         "--train", f"{d}/train-split.bin", "--num-classifiers", "2",
         "--pretrain-epochs", "1"],
        ["train", "--out", d, "--seed", "1",
         "--train", f"{d}/train-split.bin",
         "--checkpoint", f"{d}/pretrain.bin",
         "--iterations", "1", "--epochs-per-phase", "1"],
    ]
    for argv in steps:
        assert dispatch(argv) == 0, argv
    return d


def test_gen_data_outputs_and_determinism(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert dispatch(["gen-data", "--out", a, "--seed", "3"] + GEN) == 0
    assert dispatch(["gen-data", "--out", b, "--seed", "3"] + GEN) == 0
    for name in ("dataset.bin", "train.bin", "test.bin"):
        pa, pb = os.path.join(a, name), os.path.join(b, name)
        assert os.path.exists(pa)
        assert open(pa, "rb").read() == open(pb, "rb").read()


def test_gen_data_different_seed_differs(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert dispatch(["gen-data", "--out", a, "--seed", "3"] + GEN) == 0
    assert dispatch(["gen-data", "--out", b, "--seed", "4"] + GEN) == 0
    assert open(f"{a}/dataset.bin", "rb").read() \
        != open(f"{b}/dataset.bin", "rb").read()


def test_pipeline_files_exist(pipeline):
    for name in ("strong.bin", "train-split.bin", "pretrain.bin",
                 "trained.bin", "history.jsonl", "train-report.json",
                 "train-report.txt", "split-report.json"):
        assert os.path.exists(os.path.join(pipeline, name)), name


def test_history_jsonl_fields(pipeline):
    lines = open(os.path.join(pipeline, "history.jsonl")).read().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    for key in ("iteration", "learning_rate", "losses", "overall_accuracy",
                "selector_accuracy", "union_accuracy"):
        assert key in rec


def test_eval_report(pipeline, tmp_path):
    d = str(tmp_path)
    assert dispatch(["eval", "--out", d, "--checkpoint",
                     f"{pipeline}/trained.bin",
                     "--test", f"{pipeline}/test.bin"]) == 0
    rep = load_report(f"{d}/eval-report.json")
    res = rep["results"]
    assert 0.0 <= res["overall"] <= res["union"] <= 1.0
    assert res["n"] == 12  # 64 samples at 80/20 stratified


def test_analyze_report(pipeline, tmp_path):
    d = str(tmp_path)
    assert dispatch(["analyze", "--out", d, "--checkpoint",
                     f"{pipeline}/trained.bin",
                     "--test", f"{pipeline}/test.bin"]) == 0
    res = load_report(f"{d}/analyze-report.json")["results"]
    assert res["num_models"] == 2
    assert len(res["cka_matrix"]) == 2
    assert res["union_accuracy"] >= max(res["individual_accuracy"])


def test_analyze_empty_model_list(pipeline, tmp_path):
    d = str(tmp_path)
    assert dispatch(["analyze", "--out", d,
                     "--test", f"{pipeline}/test.bin"]) == 0
    res = load_report(f"{d}/analyze-report.json")["results"]
    assert res["num_models"] == 0
    assert res["cka_matrix"] == []
    assert res["union_accuracy"] is None


def test_plan_memory_sliced_saves_peak(pipeline, tmp_path):
    da, db = str(tmp_path / "a"), str(tmp_path / "b")
    ckpt = f"{pipeline}/trained.bin"
    assert dispatch(["plan-memory", "--out", da, "--checkpoint", ckpt]) == 0
    assert dispatch(["plan-memory", "--out", db, "--checkpoint", ckpt,
                     "--sliced"]) == 0
    plain = load_report(f"{da}/plan-memory-report.json")["results"]
    sliced = load_report(f"{db}/plan-memory-report.json")["results"]
    assert sliced["peak_bytes"] < plain["peak_bytes"]
    assert sliced["flash_traffic_bytes"] > plain["flash_traffic_bytes"]
    assert os.path.exists(f"{da}/plan-memory-steps.csv")


def test_infer_predictions_csv(pipeline, tmp_path):
    d = str(tmp_path)
    assert dispatch(["infer", "--out", d, "--checkpoint",
                     f"{pipeline}/trained.bin",
                     "--data", f"{pipeline}/test.bin"]) == 0
    lines = open(f"{d}/predictions.csv").read().splitlines()
    assert lines[0] == "index,classifier,prediction"
    assert len(lines) == 1 + 12
    res = load_report(f"{d}/infer-report.json")["results"]
    assert res["n"] == 12


def test_export_manifest(pipeline, tmp_path):
    d = str(tmp_path)
    assert dispatch(["export", "--out", d, "--checkpoint",
                     f"{pipeline}/trained.bin"]) == 0
    man = json.load(open(f"{d}/manifest.json"))
    names = [n["name"] for n in man["networks"]]
    assert names == ["selector", "classifier-0", "classifier-1"]
    assert man["kind"] == "composite"


def test_train_zero_iterations_preserves_weights(pipeline, tmp_path):
    d = str(tmp_path)
    assert dispatch(["train", "--out", d, "--seed", "1",
                     "--train", f"{pipeline}/train-split.bin",
                     "--checkpoint", f"{pipeline}/pretrain.bin",
                     "--iterations", "0"]) == 0
    before, _ = serialize.load_composite(f"{pipeline}/pretrain.bin")
    after, _ = serialize.load_composite(f"{d}/trained.bin")
    for ma, mb in zip([before.selector] + before.classifiers,
                      [after.selector] + after.classifiers):
        for la, lb in zip(ma.layers, mb.layers):
            for k in la.params:
                assert np.array_equal(la.params[k], lb.params[k])


def test_config_file_and_flag_precedence(tmp_path):
    d = str(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"num-classes": 3, "n": 48, "channels": 2,
                               "length": 32, "clusters-per-class": 2}))
    assert dispatch(["gen-data", "--out", d, "--config", str(cfg),
                     "--n", "24"]) == 0
    snap = json.load(open(f"{d}/gen-data.config.json"))
    assert snap["n"] == 24  # explicit flag beats config file
    assert snap["num_classes"] == 3  # config file beats default
    ds = serialize.load_dataset(f"{d}/dataset.bin")
    assert len(ds) == 24
    assert ds.num_classes == 3


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"frobnicate": 1}))
    assert dispatch(["gen-data", "--out", str(tmp_path),
                     "--config", str(cfg)]) == 1


def test_usage_errors_exit_1(tmp_path, capsys):
    assert dispatch([]) == 1
    assert dispatch(["no-such-command"]) == 1
    assert dispatch(["eval", "--out", str(tmp_path)]) == 1
    capsys.readouterr()


def test_runtime_errors_exit_2(tmp_path):
    assert dispatch(["eval", "--out", str(tmp_path),
                     "--checkpoint", "/nonexistent.bin",
                     "--test", "/nonexistent.bin"]) == 2


def test_config_snapshot_written_per_command(pipeline):
    for cmd in ("gen-data", "train-strong", "split", "pretrain", "train"):
        path = os.path.join(pipeline, f"{cmd}.config.json")
        assert os.path.exists(path)
        snap = json.load(open(path))
        assert snap["command"] == cmd
        assert snap["seed"] == 1
