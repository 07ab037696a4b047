import json
from pathlib import Path

import numpy as np
import pytest

from mamimo_adv.cli import main
from mamimo_adv.manifest import read_manifest, file_digest
from mamimo_adv.nn import load_model, param_count
from mamimo_adv.oracle import load_dataset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One small generate -> train pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "train.bin"
    rc = main(["generate", "--num-samples", "300", "--precoder", "mr",
               "--out", str(ds), "--seed", "3", "--threads", "1"])
    assert rc == 0
    rc = main(["train", "--dataset", str(ds), "--model-id", "model1",
               "--out-dir", str(root / "m1"), "--epochs", "40", "--train-seed", "1"])
    assert rc == 0
    return root


def test_generate_outputs_and_manifest(workdir):
    ds = load_dataset(workdir / "train.bin")
    assert len(ds) == 300 and ds.precoder == "mr"
    manifest = read_manifest(workdir / "train.bin.manifest.json")
    assert manifest["seeds"] == {"master": 3}
    assert "train.bin" in manifest["output_digests"]


def test_generate_same_seed_same_digest(tmp_path, workdir):
    out = tmp_path / "again.bin"
    rc = main(["generate", "--num-samples", "300", "--precoder", "mr",
               "--out", str(out), "--seed", "3", "--threads", "1"])
    assert rc == 0
    assert file_digest(out) == file_digest(workdir / "train.bin")


def test_generate_invalid_precoder_usage_error(tmp_path):
    rc = main(["generate", "--num-samples", "10", "--precoder", "zf",
               "--out", str(tmp_path / "x.bin")])
    assert rc == 2


def test_unknown_flag_usage_error():
    assert main(["eval", "--frobnicate"]) == 2


def test_train_all_cells_and_param_count(workdir):
    files = sorted((workdir / "m1").glob("model_cell*.bin"))
    assert len(files) == 4
    model = load_model(files[0])
    assert param_count(model) == 6981
    assert model.precoder == "mr"


def test_train_config_mismatch_validation_error(workdir, tmp_path):
    rc = main(["train", "--dataset", str(workdir / "train.bin"),
               "--model-id", "model1", "--out-dir", str(tmp_path / "bad"),
               "--noise-dbm", "-80"])
    assert rc == 3


def test_train_cell_out_of_range(workdir, tmp_path):
    rc = main(["train", "--dataset", str(workdir / "train.bin"),
               "--model-id", "model1", "--cell", "7",
               "--out-dir", str(tmp_path / "bad")])
    assert rc == 3


def test_attack_command_and_defaults(workdir, tmp_path):
    out = tmp_path / "attack.csv"
    rc = main(["attack", "--models", str(workdir / "m1"),
               "--dataset", str(workdir / "train.bin"),
               "--method", "pgd", "--eps", "0.2", "--Q", "40", "--alpha", "0.01",
               "--limit", "20", "--out", str(out),
               "--summary", str(tmp_path / "attack.json")])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 1 + 20 * 4          # header + samples x cells
    doc = json.loads((tmp_path / "attack.json").read_text())
    assert "rates" in doc and doc["epsilon"] == 0.2


def test_attack_wrong_models_validation_error(workdir, tmp_path):
    other = tmp_path / "other.bin"
    assert main(["generate", "--num-samples", "20", "--precoder", "mr",
                 "--out", str(other), "--seed", "9", "--noise-dbm", "-80",
                 "--threads", "1"]) == 0
    rc = main(["attack", "--models", str(workdir / "m1"), "--dataset", str(other),
               "--method", "fgsm", "--eps", "0.1", "--out", str(tmp_path / "r.csv")])
    assert rc == 3


def test_eval_whitebox_run_dir(workdir, tmp_path):
    run = tmp_path / "run"
    rc = main(["eval", "--models", str(workdir / "m1"),
               "--dataset", str(workdir / "train.bin"),
               "--methods", "random", "fgsm",
               "--eps", "0.3", "--n-test", "12", "--seed", "2",
               "--run-dir", str(run), "--per-sample"])
    assert rc == 0
    assert (run / "rates_whitebox.csv").exists()
    assert (run / "summary.json").exists()
    assert (run / "plot_rates.py").exists()
    assert (run / "rates_whitebox.png").exists()
    assert (run / "attack_report_whitebox.csv").exists()
    manifest = read_manifest(run / "manifest.json")
    assert "rates_whitebox.csv" in manifest["output_digests"]


def test_eval_needs_scenario_source(workdir, tmp_path):
    rc = main(["eval", "--models", str(workdir / "m1"),
               "--run-dir", str(tmp_path / "r")])
    assert rc == 3


def test_eval_blackbox_flag_requires_surrogate(workdir, tmp_path):
    rc = main(["eval", "--models", str(workdir / "m1"), "--blackbox",
               "--dataset", str(workdir / "train.bin"),
               "--run-dir", str(tmp_path / "r")])
    assert rc == 2


def test_report_rerenders_figures(workdir, tmp_path):
    run = tmp_path / "run"
    assert main(["eval", "--models", str(workdir / "m1"),
                 "--dataset", str(workdir / "train.bin"),
                 "--methods", "random", "--eps", "0.2", "--n-test", "8",
                 "--seed", "4", "--run-dir", str(run)]) == 0
    png = run / "rates_whitebox.png"
    before = file_digest(png)
    assert main(["report", "--run-dir", str(run)]) == 0
    assert file_digest(png) == before


def test_report_empty_dir_validation_error(tmp_path):
    assert main(["report", "--run-dir", str(tmp_path)]) == 3
