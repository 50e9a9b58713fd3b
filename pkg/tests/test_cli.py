import csv
from pathlib import Path

import numpy as np
import pytest

from spikedt.cli import main, read_config
from spikedt.data import load_dataset, sidecar_path
from spikedt.model import load_checkpoint

TINY_CONFIG = """
# desk-sized model for fast runs
d = 8
layers = 1
window = 2
epochs = 1
batch_size = 16
lr = 1e-3
val_interval = 1
seed = 0
"""


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "cartpole.bin"
    assert main(["gen-data", "--env", "cartpole", "--steps", "600",
                 "--seed", "3", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, data_file, config_file):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    code = main(["train", "--config", str(config_file), "--data", str(data_file),
                 "--mode", "full", "--out", str(path)])
    assert code == 0
    return path


def test_gen_data_writes_dataset_and_sidecar(data_file):
    ds = load_dataset(data_file)
    assert len(ds.clips) > 0
    assert sidecar_path(data_file).exists()
    assert ds.env_name == "cartpole"


def test_train_produces_loadable_checkpoint(checkpoint):
    model = load_checkpoint(checkpoint)
    assert model.config.mode == "full"
    assert model.config.env_name == "cartpole"
    assert model.config.d == 8


def test_eval_runs(checkpoint, capsys):
    assert main(["eval", "--ckpt", str(checkpoint), "--env", "cartpole",
                 "--episodes", "2", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "mean_return" in out


def test_eval_env_mismatch_fails(checkpoint, capsys):
    assert main(["eval", "--ckpt", str(checkpoint), "--env", "pendulum",
                 "--episodes", "1"]) == 1
    assert "error:" in capsys.readouterr().err


def test_sweep_writes_csv(tmp_path, config_file):
    out = tmp_path / "sweep.csv"
    code = main(["sweep", "--axis", "T", "--values", "2,3", "--env", "cartpole",
                 "--config", str(config_file), "--out", str(out)])
    assert code == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["T"] for r in rows] == ["2", "3"]
    assert all(float(r["latency_ms"]) > 0 for r in rows)


def test_diag_emits_phase_and_gate_csvs(tmp_path, checkpoint, data_file):
    outdir = tmp_path / "diag"
    code = main(["diag", "--ckpt", str(checkpoint), "--data", str(data_file),
                 "--outdir", str(outdir)])
    assert code == 0
    assert (outdir / "phase_params.csv").exists()
    assert (outdir / "routing_gates_layer0.csv").exists()


def test_ablate_cli(tmp_path, data_file, config_file):
    outdir = tmp_path / "ablation"
    code = main(["ablate", "--data", str(data_file), "--env", "cartpole",
                 "--outdir", str(outdir), "--config", str(config_file),
                 "--episodes", "2", "--seed", "7"])
    assert code == 0
    assert (outdir / "ablation_report.csv").exists()


class TestErrors:
    def test_bad_dataset_path(self, capsys):
        assert main(["train", "--data", "/nonexistent.bin", "--out", "/tmp/x.ckpt"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_config_key(self, tmp_path, data_file, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("momentum = 0.9\n")
        assert main(["train", "--config", str(cfg), "--data", str(data_file),
                     "--out", str(tmp_path / "m.ckpt")]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_malformed_config_line(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs 5\n")
        with pytest.raises(ValueError, match="key=value"):
            read_config(cfg)

    def test_bad_env_rejected_by_parser(self):
        with pytest.raises(SystemExit):
            main(["gen-data", "--env", "breakout", "--steps", "10", "--out", "x"])


class TestConfigParsing:
    def test_preset_expansion(self, tmp_path):
        cfg = tmp_path / "preset.cfg"
        cfg.write_text("preset = fast\nseed = 5\n")
        train_kw, model_kw = read_config(cfg)
        assert train_kw["lr"] == 3e-4
        assert train_kw["batch_size"] == 64
        assert train_kw["epochs"] == 50
        assert train_kw["seed"] == 5
        assert model_kw == {}

    def test_long_context_preset_sets_model_side(self, tmp_path):
        cfg = tmp_path / "preset.cfg"
        cfg.write_text("preset = long-context\n")
        train_kw, model_kw = read_config(cfg)
        assert model_kw["context"] == 50
        assert train_kw["batch_size"] == 16

    def test_comments_and_bools(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("plasticity = true  # local rule on\n\nheads = 2\n")
        train_kw, model_kw = read_config(cfg)
        assert train_kw["plasticity"] is True
        assert model_kw["heads"] == 2

    def test_unknown_preset(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("preset = huge\n")
        with pytest.raises(ValueError, match="unknown preset"):
            read_config(cfg)
