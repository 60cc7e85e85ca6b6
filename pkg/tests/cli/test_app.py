"""Tests for the command-line dispatcher"""

import json

import pytest

from labelfactory.app import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_STAGE_FAILURE,
    STAGE_COMMANDS,
    create_parser,
    dispatch,
)
from labelfactory.losses import TrainingDivergedError
from labelfactory.main import ADAPT_STAGE, EVALUATE_STAGE, StageError
from labelfactory.manifest import RunManifest


@pytest.fixture
def mock_run_all(mocker):
    return mocker.patch("labelfactory.app.run_all", return_value=RunManifest())


@pytest.fixture
def mock_run_stage(mocker):
    return mocker.patch("labelfactory.app.run_stage", return_value=RunManifest())


class TestParser:
    """Test the subcommand layout"""

    def test_every_stage_has_a_command(self):
        parser = create_parser()

        for command in STAGE_COMMANDS:
            args = parser.parse_args([command])
            assert args.stage == STAGE_COMMANDS[command][0]

    def test_repeated_overrides(self):
        args = create_parser().parse_args(
            ["pipeline", "--set", "n_synth=10", "--set", "adapt.lr=0.01", "--no-resume"]
        )

        assert args.overrides == ["n_synth=10", "adapt.lr=0.01"]
        assert args.no_resume
        assert args.out == "runs/default"


class TestDispatch:
    """Test exit codes and argument plumbing"""

    def test_pipeline(self, tmp_path, test_config, mock_run_all):
        code = dispatch(["pipeline", "--config", str(test_config), "--seed", "7", "--out", str(tmp_path / "run"),
                         "--set", "n_synth=5"])

        assert code == EXIT_OK
        config, out_dir = mock_run_all.call_args.args
        assert config.seed == 7
        assert config.n_synth == 5
        assert config.generator.num_layers == 3
        assert out_dir == tmp_path / "run"
        assert mock_run_all.call_args.kwargs == {"resume": True}

    def test_stage_command(self, tmp_path, test_config, mock_run_stage):
        code = dispatch(["adapt", "--config", str(test_config), "--out", str(tmp_path)])

        assert code == EXIT_OK
        assert mock_run_stage.call_args.args[0] == ADAPT_STAGE

    def test_no_command(self):
        assert dispatch([]) == EXIT_CONFIG_ERROR

    def test_help(self):
        assert dispatch(["--help"]) == EXIT_OK

    def test_unknown_ablation_mode(self, test_config):
        assert dispatch(["ablate", "--config", str(test_config), "--mode", "no-gravity"]) == EXIT_CONFIG_ERROR

    def test_missing_config(self, tmp_path, mock_run_all):
        code = dispatch(["pipeline", "--config", str(tmp_path / "absent.yaml")])

        assert code == EXIT_CONFIG_ERROR
        mock_run_all.assert_not_called()

    def test_invalid_config_value(self, test_config, mock_run_all):
        code = dispatch(["pipeline", "--config", str(test_config), "--set", "psi=1.5"])

        assert code == EXIT_CONFIG_ERROR
        mock_run_all.assert_not_called()

    def test_malformed_override(self, test_config, mock_run_all):
        assert dispatch(["pipeline", "--config", str(test_config), "--set", "n_synth"]) == EXIT_CONFIG_ERROR

    def test_stage_failure(self, test_config, mock_run_stage):
        mock_run_stage.side_effect = StageError("synthesize", "label head missing")

        assert dispatch(["synthesize", "--config", str(test_config)]) == EXIT_STAGE_FAILURE

    def test_divergence(self, test_config, mock_run_all):
        mock_run_all.side_effect = TrainingDivergedError("adversarial", 12)

        assert dispatch(["pipeline", "--config", str(test_config)]) == EXIT_STAGE_FAILURE

    def test_metrics_out(self, tmp_path, test_config, mock_run_stage):
        manifest = RunManifest()
        manifest.stage(EVALUATE_STAGE).metrics.update({"target_ap_after": 0.5, "pr_curves": {"after": {}}})
        mock_run_stage.return_value = manifest
        metrics_path = tmp_path / "out" / "metrics.json"

        code = dispatch(["evaluate", "--config", str(test_config), "--metrics-out", str(metrics_path)])

        assert code == EXIT_OK
        assert json.loads(metrics_path.read_text()) == {"target_ap_after": 0.5}

    def test_ablate(self, tmp_path, test_config, mocker):
        run_ablation = mocker.patch("labelfactory.app.run_ablation", return_value={})

        code = dispatch(["ablate", "--config", str(test_config), "--mode", "no-freeze", "--out", str(tmp_path)])

        assert code == EXIT_OK
        assert run_ablation.call_args.args[2] == "no-freeze"

    def test_benchmark(self, tmp_path, test_config, mocker):
        run_benchmark = mocker.patch("labelfactory.app.run_benchmark", return_value={})

        assert dispatch(["benchmark", "--config", str(test_config), "--out", str(tmp_path)]) == EXIT_OK
        run_benchmark.assert_called_once()
