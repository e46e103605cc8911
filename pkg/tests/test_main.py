#!/usr/bin/env python3

"""Tests for the command-line entry point."""

import os
import signal
from unittest.mock import patch

import numpy as np
import pytest
import yaml

import main
from checkpoint_io import save_checkpoint
from datasets import load_raw_dir
from run_config import load_run_config
from vit_backbone import ViTWeights

CONFIGS_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def _shipped(name):
    return os.path.join(CONFIGS_DIR, name)


def _write_config(tmp_path, **overrides):
    """A small, fast run config under tmp_path."""
    document = {
        "model": {
            "preset": "tiny",
            "image_size": 16,
            "patch_size": 4,
            "embed_dim": 16,
            "num_heads": 2,
            "num_layers": 2,
            "ffn_hidden": 32,
        },
        "sparsify": {"keep_rate": 0.5, "positions": [2]},
        "adapter": {"bottleneck": 4},
        "train": {"epochs": 2, "batch_size": 8, "base_lr": 0.01},
        "data": {"classes": 2, "samples": 16, "eval_samples": 8},
        "output": {"dir": str(tmp_path / "run"), "checkpoint_every": 1, "wall_time": False},
    }
    for section, values in overrides.items():
        document.setdefault(section, {}).update(values)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(document))
    return str(path)


@pytest.mark.integration
class TestFlopsCommand:
    """Tests for `flops`."""

    def test_dense_table(self, capsys):
        """The dense ViT-B/16 config reports 17.58 GFLOPs."""
        assert main.main(["flops", _shipped("vit_b16_dense.yaml")]) == main.EXIT_OK
        assert "GFLOPs          17.58" in capsys.readouterr().out

    def test_sparse_keyvalue(self, capsys):
        """key=value output shows the default token schedule."""
        assert main.main(["flops", _shipped("vit_b16_sparse.yaml"), "--format", "keyvalue"]) == main.EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert "layer.4.token_count_out=140" in lines
        assert "layer.10.token_count_out=72" in lines
        assert "trainable_params=1091584" in lines

    def test_grid(self, capsys):
        """--grid prints one line per variant and bottleneck."""
        assert main.main(["flops", _shipped("vit_b16_sparse.yaml"), "--grid"]) == main.EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 3 * 5
        assert lines[2].startswith("variant=inner d=32 r=0.7")


@pytest.mark.integration
class TestTrainEvalCommands:
    """Tests for `train`, `eval` and `attn-dump`."""

    def test_train_writes_log_and_checkpoints(self, tmp_path, capsys):
        """Training writes the metrics log, per-epoch checkpoints and the final checkpoint."""
        config_path = _write_config(tmp_path)
        assert main.main(["train", config_path]) == main.EXIT_OK

        out = capsys.readouterr().out
        assert "epochs=2" in out
        run_dir = tmp_path / "run"
        for name in ("metrics.log", "checkpoint_epoch1.sptn", "checkpoint_epoch2.sptn", "final.sptn"):
            assert (run_dir / name).exists()
        lines = (run_dir / "metrics.log").read_text().splitlines()
        assert "# model.embed_dim=16" in lines
        assert "# epoch train_loss train_acc eval_acc seconds" in lines
        epochs = [line for line in lines if not line.startswith("#")]
        assert [line.split()[0] for line in epochs] == ["1", "2"]
        assert all(line.endswith(" -") for line in epochs)

    def test_metrics_log_is_deterministic(self, tmp_path):
        """Two runs of the same config produce byte-identical logs and checkpoints."""
        config_path = _write_config(tmp_path)
        run_dir = tmp_path / "run"
        outputs = []
        for _ in range(2):
            assert main.main(["train", config_path]) == main.EXIT_OK
            outputs.append(((run_dir / "metrics.log").read_bytes(), (run_dir / "final.sptn").read_bytes()))
        assert outputs[0] == outputs[1]

    def test_eval_and_attention_dump(self, tmp_path, capsys):
        """A trained checkpoint evaluates and dumps attention maps."""
        config_path = _write_config(tmp_path, train={"epochs": 1})
        assert main.main(["train", config_path]) == main.EXIT_OK
        checkpoint = str(tmp_path / "run" / "final.sptn")
        capsys.readouterr()

        assert main.main(["eval", config_path, checkpoint]) == main.EXIT_OK
        out = capsys.readouterr().out
        assert "samples=8" in out
        assert "accuracy=" in out

        dump_dir = tmp_path / "attn"
        args = ["attn-dump", config_path, checkpoint, "0", "--layers", "2", "--out", str(dump_dir)]
        assert main.main(args) == main.EXIT_OK
        assert (dump_dir / "attention.csv").exists()
        assert (dump_dir / "attn_layer02.pgm").exists()

    def test_attention_index_out_of_range(self, tmp_path):
        """An index past the dataset exits with 2."""
        config_path = _write_config(tmp_path, train={"epochs": 1})
        main.main(["train", config_path])
        checkpoint = str(tmp_path / "run" / "final.sptn")
        assert main.main(["attn-dump", config_path, checkpoint, "8"]) == main.EXIT_INVALID

    def test_non_finite_loss_exit_code(self, tmp_path):
        """A checkpoint that produces NaN activations exits with 3."""
        config_path = _write_config(tmp_path)
        run_config = load_run_config(config_path)
        weights = ViTWeights.initialize(run_config.model, run_config.plan, seed=0)
        weights["patch_embed.bias"].data[...] = np.nan
        init = str(tmp_path / "nan.sptn")
        save_checkpoint(weights, init)
        assert main.main(["train", config_path, "--init", init]) == main.EXIT_NONFINITE

    def test_checkpoint_for_other_plan(self, tmp_path):
        """Evaluating a checkpoint built for another plan exits with 2."""
        config_path = _write_config(tmp_path)
        other_dir = tmp_path / "other"
        other_dir.mkdir()
        other = _write_config(other_dir, adapter={"enabled": False})
        run_config = load_run_config(other)
        checkpoint = str(tmp_path / "dense.sptn")
        save_checkpoint(ViTWeights.initialize(run_config.model, run_config.plan), checkpoint)
        assert main.main(["eval", config_path, checkpoint]) == main.EXIT_INVALID


class TestOtherCommands:
    """Tests for `gen-data`, `bench`, exit codes and signals."""

    def test_gen_data(self, tmp_path, capsys):
        """gen-data writes a loadable raw directory."""
        out_dir = str(tmp_path / "data")
        assert main.main(["gen-data", "3", "9", "5", out_dir, "--image-size", "16"]) == main.EXIT_OK
        assert "samples=9" in capsys.readouterr().out
        dataset = load_raw_dir(out_dir, channels=3, image_size=16)
        assert len(dataset) == 9

    def test_gen_data_invalid(self, tmp_path):
        """One class is not a dataset."""
        assert main.main(["gen-data", "1", "9", "5", str(tmp_path / "data")]) == main.EXIT_INVALID

    @pytest.mark.slow
    def test_bench(self, tmp_path, capsys):
        """bench prints one line per keep rate and the rank correlation."""
        config_path = _write_config(tmp_path)
        assert main.main(["bench", config_path, "--repeats", "1"]) == main.EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert [line.split()[0] for line in lines[:7]] == [
            "keep_rate=0.4",
            "keep_rate=0.5",
            "keep_rate=0.6",
            "keep_rate=0.7",
            "keep_rate=0.8",
            "keep_rate=0.9",
            "keep_rate=1",
        ]
        assert lines[7].startswith("spearman_time_vs_gflops=")

    @pytest.mark.slow
    def test_bench_throughput_falls_with_keep_rate(self, tmp_path, capsys):
        """Throughput drops as the keep rate rises and time tracks counted FLOPs."""
        config_path = _write_config(
            tmp_path,
            model={"image_size": 64, "patch_size": 4, "embed_dim": 128, "num_heads": 4, "ffn_hidden": 512,
                   "num_layers": 4},
            sparsify={"keep_rate": 0.7, "positions": [1, 2, 3]},
        )
        assert main.main(["bench", config_path, "--repeats", "5"]) == main.EXIT_OK
        lines = capsys.readouterr().out.splitlines()

        fields = [dict(part.split("=") for part in line.split()) for line in lines[:7]]
        throughput = [float(f["images_per_s"]) for f in fields]
        gflops = [float(f["gflops"]) for f in fields]
        assert gflops == sorted(gflops)
        # Adjacent rates may tie within timer noise
        for faster, slower in zip(throughput, throughput[1:]):
            assert slower <= faster * 1.05
        assert throughput[-1] < throughput[0]
        assert float(lines[7].split("=")[1]) > 0.9

    def test_invalid_config(self, tmp_path):
        """An unknown key exits with 2."""
        path = tmp_path / "bad.yaml"
        path.write_text("train:\n  momentum: 0.9\n")
        assert main.main(["flops", str(path)]) == main.EXIT_INVALID

    def test_missing_config(self, tmp_path):
        """A missing config file exits with 2."""
        assert main.main(["flops", str(tmp_path / "absent.yaml")]) == main.EXIT_INVALID

    def test_bad_arguments(self):
        """argparse errors exit with 2."""
        with pytest.raises(SystemExit) as exc_info:
            main.main(["flops"])
        assert exc_info.value.code == 2

    def test_unexpected_error(self):
        """Anything unexpected exits with 1 and is logged."""
        with patch("main.count_flops", side_effect=RuntimeError("boom")), patch("main.logger") as mock_logger:
            assert main.main(["flops", _shipped("vit_b16_dense.yaml")]) == main.EXIT_FAILURE
        mock_logger.error.assert_called_once()

    def test_shutdown_signal_requests_stop(self):
        """SIGTERM asks training to stop after the current epoch."""
        with patch("main.logger") as mock_logger:
            main.handle_shutdown_signal(signal.SIGTERM, None)
        try:
            assert main.stop_requested()
            assert "SIGTERM" in mock_logger.info.call_args[0][0]
        finally:
            main._stop_requested = False

    def test_signal_handlers_restored(self):
        """main restores the previous signal handlers on exit."""
        before = signal.getsignal(signal.SIGTERM)
        main.main(["flops", _shipped("vit_b16_dense.yaml")])
        assert signal.getsignal(signal.SIGTERM) is before
