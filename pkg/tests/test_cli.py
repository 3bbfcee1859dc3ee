"""Tests for the command-line interface."""

import tempfile
from pathlib import Path
from unittest.mock import MagicMock, patch

import pytest

from haptic_act import cli
from haptic_act.checkpoint import read_checkpoint
from haptic_act.cli import build_parser, load_config, main
from haptic_act.config import ExperimentConfig
from haptic_act.dataset import load_dataset
from haptic_act.report import read_csv

TINY_POLICY = """
policy:
  d_model: 8
  n_heads: 2
  ffn_dim: 16
  z_dim: 4
  chunk_k: 3
  n_encoder_layers: 1
  n_decoder_layers: 1
  batch_size: 2
harness:
  master_seed: 4
"""


@pytest.fixture(autouse=True)
def no_user_config(monkeypatch, tmp_path):
    monkeypatch.setattr(ExperimentConfig, "DEFAULT_CONFIG_YAML", tmp_path / "absent.yaml")
    monkeypatch.setattr(ExperimentConfig, "DEFAULT_CONFIG_TOML", tmp_path / "absent.toml")
    monkeypatch.delenv("HAPTIC_ACT_CONFIG", raising=False)
    monkeypatch.delenv("HAPTIC_ACT_SEED", raising=False)


class TestParser:
    """Test argument parsing and config layering."""

    def test_grid_arguments(self):
        args = build_parser().parse_args(["grid", "--out", "results", "--seed", "7", "--sweep", "0.0", "0.2"])
        assert args.command == "grid"
        assert args.out == Path("results")
        assert args.seed == 7
        assert args.sweep == [0.0, 0.2]

    def test_sweep_without_values(self):
        """Test that a bare --sweep asks for the configured fractions."""
        assert build_parser().parse_args(["grid", "--out", "r", "--sweep"]).sweep == []
        assert build_parser().parse_args(["grid", "--out", "r"]).sweep is None

    def test_command_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_short_protocol(self):
        """Test the 10-trial shorthand and its precedence below --trials."""
        config = load_config(build_parser().parse_args(["grid", "--out", "r", "--short-protocol"]))
        assert config.harness.n_eval_trials == 10
        config = load_config(build_parser().parse_args(["grid", "--out", "r", "--short-protocol", "--trials", "3"]))
        assert config.harness.n_eval_trials == 3

    def test_small_profile(self):
        """Test the 40/10 profile and explicit counts layered on top."""
        config = load_config(build_parser().parse_args(["collect", "--out", "d", "--small-profile"]))
        assert (config.dataset.n_success, config.dataset.n_recovery, config.dataset.name) == (40, 10, "small")
        config = load_config(
            build_parser().parse_args(["collect", "--out", "d", "--small-profile", "--n-success", "5"])
        )
        assert (config.dataset.n_success, config.dataset.n_recovery) == (5, 10)

    def test_train_flags(self):
        args = build_parser().parse_args(["train", "--dataset", "d", "--out", "m", "--no-haptic", "--steps", "9"])
        config = load_config(args)
        assert not config.policy.haptic_enabled
        assert config.policy.train_steps == 9
        assert config.cli_overrides >= {"policy.haptic_enabled", "policy.train_steps"}

    def test_eval_slip(self):
        args = build_parser().parse_args(["eval", "--model", "m.hiam", "--out", "o", "--p-slip", "0.6", "--seed", "2"])
        config = load_config(args)
        assert config.env.p_slip == 0.6
        assert config.harness.master_seed == 2


class TestMain:
    """Test exit codes and the command pipeline."""

    def test_report_without_results(self, capsys):
        with tempfile.TemporaryDirectory() as tmpdir:
            assert main(["report", "--in", tmpdir]) == 8
        assert "No result CSV" in capsys.readouterr().err

    def test_missing_config_file(self, capsys):
        code = main(["collect", "--out", "d", "--config", "/nonexistent/config.yaml"])
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_keyboard_interrupt(self):
        with patch.dict(cli.COMMANDS, {"collect": MagicMock(side_effect=KeyboardInterrupt)}):
            assert main(["collect", "--out", "d"]) == 130

    def test_unexpected_error(self, capsys):
        with patch.dict(cli.COMMANDS, {"collect": MagicMock(side_effect=RuntimeError("boom"))}):
            assert main(["collect", "--out", "d"]) == 1
        assert "boom" in capsys.readouterr().err

    def test_collect_train_eval_report(self, capsys):
        """Test the single-policy pipeline end to end on a tiny model."""
        with tempfile.TemporaryDirectory() as tmpdir:
            root = Path(tmpdir)
            config_file = root / "config.yaml"
            config_file.write_text(TINY_POLICY)
            common = ["--config", str(config_file)]

            assert main(["collect", *common, "--n-success", "1", "--n-recovery", "1", "--out", str(root / "data")]) == 0
            dataset = load_dataset(root / "data")
            assert (dataset.n_success, dataset.n_recovery) == (1, 1)

            train_args = ["--dataset", str(root / "data"), "--steps", "2", "--out", str(root / "model")]
            assert main(["train", *common, *train_args]) == 0
            params = read_checkpoint(root / "model" / "model.hiam").params
            assert params.cfg.chunk_k == 3 and params.cfg.train_steps == 2
            assert len(read_csv(root / "model" / "train_log.csv")) == 2

            model = str(root / "model" / "model.hiam")
            assert main(["eval", *common, "--model", model, "--trials", "2", "--out", str(root / "eval")]) == 0
            rows = read_csv(root / "eval" / "eval.csv")
            assert [(r["name"], r["n_trials"], r["haptic"]) for r in rows] == [("model", "2", "true")]
            assert (rows[0]["recovery_samples"], rows[0]["recovery_fraction"]) == ("true", "0.500000")
            assert rows[0]["dataset_seed"] == str(dataset.base_seed)
            assert (root / "eval" / "force_trace_model_000.csv").exists()

            capsys.readouterr()
            assert main(["report", "--in", str(root / "eval"), "--out", str(root / "copy")]) == 0
            printed = [line for line in capsys.readouterr().out.splitlines() if not line.startswith("[")]
            assert printed == [str(root / "copy" / "report.md")]
            assert Path(printed[0]).read_text() == (root / "eval" / "report.md").read_text()
