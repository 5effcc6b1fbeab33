"""End-to-end runs of the command-line entry point on synthetic EDF nights."""

import json

import pytest

import stager
from config import load_run_config
from conftest import FS
from exceptions import FileOperationError
from stager import cmd_prepare, main

NIGHTS = ("SC4001", "SC4011", "SC4021", "SC4031")


@pytest.fixture
def workspace(tmp_path, write_night):
    data_dir = tmp_path / "data"
    for seed, night in enumerate(NIGHTS):
        write_night(data_dir, night, seed=seed)
    config_path = tmp_path / "stager_config.json"
    config_path.write_text(json.dumps({
        "fs": FS,
        "k": 2,
        "model": {
            "conv1_filters": 4, "conv2_filters": 4, "n_conv2": 1,
            "lstm_hidden": 4, "lstm_layers": 2, "dropout": 0.1,
        },
        "plan": {
            "n_pretrain_epochs": 1, "n_finetune_epochs": 1, "pretrain_batch": 16,
            "finetune_batch": 2, "seq_len": 5, "lr_pretrain": 1e-3, "lr1": 1e-5, "lr2": 1e-3,
        },
    }))
    output_dir = tmp_path / "output"

    def run(*args):
        return main([args[0], "--config", str(config_path), "--output-dir", str(output_dir), *args[1:]])

    return run, data_dir, config_path, output_dir


def test_prepare_writes_cache_and_manifest(workspace):
    run, data_dir, config_path, output_dir = workspace
    assert run("prepare", "--input", str(data_dir)) == 0

    manifest = json.loads((output_dir / "cache" / "manifest.json").read_text())
    assert manifest["subjects"] == ["00", "01", "02", "03"]
    assert manifest["fs"] == FS
    assert manifest["stage_counts"]["Total"] == 4 * 40
    assert manifest["recordings"][0]["start_time"] == "2000-01-01T00:00:00"
    assert (output_dir / "cache" / "epochs.sscache").is_file()
    assert (output_dir / "cache" / "manifest.csv").is_file()
    assert json.loads((output_dir / "cache" / "run_config.json").read_text())["k"] == 2
    assert (output_dir / "stager.log").is_file()

    config = load_run_config(config_path, {"data_dir": str(data_dir), "output_dir": str(output_dir)})
    summary = cmd_prepare(config)
    assert summary.up_to_date
    assert summary.recordings == 4


def test_unwritable_manifest_fails_prepare(workspace, monkeypatch):
    run, data_dir, config_path, output_dir = workspace
    monkeypatch.setattr(stager, "save_json", lambda *args, **kwargs: False)
    assert run("prepare", "--input", str(data_dir)) == 1

    config = load_run_config(config_path, {"data_dir": str(data_dir), "output_dir": str(output_dir)})
    with pytest.raises(FileOperationError):
        cmd_prepare(config)
    assert not (output_dir / "cache" / "manifest.json").exists()


def test_missing_prerequisites_fail_cleanly(workspace):
    run, *_ = workspace
    assert run("pretrain") == 1
    assert run("predict") == 1


def test_bad_cell_list(workspace):
    run, data_dir, *_ = workspace
    assert run("prepare", "--input", str(data_dir)) == 0
    assert run("analyze", "--cells", "0,x") == 1


def test_train_score_predict_and_analyze(workspace):
    run, data_dir, _, output_dir = workspace
    assert run("prepare", "--input", str(data_dir)) == 0
    assert run("pretrain", "--subject", "00,01") == 0
    assert (output_dir / "checkpoints" / "pretrained_cnn.ssckpt").is_file()
    assert (output_dir / "checkpoints" / "pretrain_training.log").read_text().strip()
    assert run("finetune", "--subject", "00,01") == 0
    model_path = output_dir / "checkpoints" / "model.ssckpt"
    assert model_path.is_file()

    assert run("evaluate", "--checkpoint", str(model_path), "--subject", "02,03") == 0
    metrics = json.loads((output_dir / "reports" / "metrics.json").read_text())
    assert metrics["n_epochs"] == 80
    assert (output_dir / "reports" / "metrics.xlsx").is_file()

    # Training subjects are refused unless explicitly allowed
    assert run("evaluate", "--checkpoint", str(model_path), "--subject", "01") == 1
    assert run("evaluate", "--checkpoint", str(model_path), "--subject", "01", "--allow-train-overlap") == 0

    assert run("predict", "--subject", "02") == 0
    predictions = output_dir / "reports" / "predictions" / "SC4021"
    lines = (predictions / "predictions.csv").read_text().splitlines()
    assert len(lines) == 41
    assert lines[1].startswith("0,")
    assert len((predictions / "hypnogram.txt").read_text().strip()) == 40
    assert (predictions / "hypnogram.svg").is_file()

    assert run("predict", "--input", str(data_dir / "SC4031E0-PSG.edf")) == 0
    assert (output_dir / "reports" / "predictions" / "SC4031E0-PSG" / "predictions.csv").is_file()

    assert run("analyze", "--cells", "0,1") == 0
    analysis = output_dir / "reports" / "analysis"
    assert (analysis / "filter_activations_small.csv").is_file()
    assert (analysis / "filter_activations_large.csv").is_file()
    assert (analysis / "cell_trace.csv").read_text().splitlines()[0] == "epoch_index,stage,cell0,cell1"


@pytest.mark.slow
def test_cross_validation_command(workspace):
    run, data_dir, _, output_dir = workspace
    assert run("prepare", "--input", str(data_dir)) == 0
    assert run("evaluate") == 0
    assert (output_dir / "folds" / "fold_01" / "model.ssckpt").is_file()
    assert json.loads((output_dir / "reports" / "metrics.json").read_text())["n_epochs"] == 160
