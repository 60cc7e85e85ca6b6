""" Command-line entry point for the labelled data factory """

import json
import logging
import sys

from argparse import ArgumentParser, Namespace
from pathlib import Path
from typing import Optional, Sequence

from labelfactory.configuration import ConfigurationError, FactoryConfig, load_factory_config
from labelfactory.experiments import ABLATION_MODES, run_ablation, run_benchmark
from labelfactory.losses import TrainingDivergedError
from labelfactory.main import (
    ADAPT_STAGE,
    EVALUATE_STAGE,
    FINETUNE_STAGE,
    LABEL_STAGE,
    PRETRAIN_STAGE,
    PSEUDO_LABEL_STAGE,
    SYNTHESIZE_STAGE,
    StageError,
    run_all,
    run_stage,
)

LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_STAGE_FAILURE = 3

LOG_FORMAT = '%(asctime)s : %(name)s : %(levelname)s : %(message)s'

STAGE_COMMANDS = {
    "pretrain-source": (PRETRAIN_STAGE, "Pretrain the source generator and source detector"),
    "adapt": (ADAPT_STAGE, "Adapt the generator to the few-shot target images"),
    "label-train": (LABEL_STAGE, "Train the label head on annotated synthesized samples"),
    "synthesize": (SYNTHESIZE_STAGE, "Synthesize a labelled target-style dataset"),
    "pseudo-label": (PSEUDO_LABEL_STAGE, "Label the synthesized images with the source detector"),
    "finetune": (FINETUNE_STAGE, "Fine-tune the source detector on the synthesized dataset"),
    "evaluate": (EVALUATE_STAGE, "Evaluate detectors on the target test split"),
}


def build_config(args: Namespace) -> FactoryConfig:
    """ Config file, then --set overrides, then --seed """
    overrides = list(args.overrides or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_factory_config(args.config, overrides)


def stage_app(args: Namespace) -> None:
    """ Helper function to run one pipeline stage against --out """

    manifest = run_stage(args.stage, build_config(args), Path(args.out))
    if args.stage == EVALUATE_STAGE and args.metrics_out:
        metrics = {k: v for k, v in manifest.stages[EVALUATE_STAGE].metrics.items() if k != "pr_curves"}
        metrics_path = Path(args.metrics_out)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        with open(metrics_path, "w", encoding="utf-8") as f:
            json.dump(metrics, f, indent=2, sort_keys=True)
        LOG.info("Metrics written to %s", metrics_path)


def pipeline_app(args: Namespace) -> None:
    """ Helper function to run every stage in order """

    run_all(build_config(args), Path(args.out), resume=not args.no_resume)


def benchmark_app(args: Namespace) -> None:
    """ Helper function to run the shapes benchmark """

    run_benchmark(build_config(args), Path(args.out))


def ablate_app(args: Namespace) -> None:
    """ Helper function to run one ablation mode """

    run_ablation(build_config(args), Path(args.out), args.mode)


def _add_common_arguments(parser: ArgumentParser) -> None:
    parser.add_argument("--config", help="Path to the JSON or YAML configuration file")
    parser.add_argument("--seed", type=int, help="Override the configured seed")
    parser.add_argument("--out", default="runs/default", help="Run directory (default: runs/default)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        metavar="KEY=VALUE",
        help="Override a dotted configuration key, e.g. --set adapt.total_iters=200"
    )


def create_parser() -> ArgumentParser:
    """ Creates the argument parser for the label factory """

    parser = ArgumentParser(description="Label factory: labelled target-domain data from a few shots")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")

    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    for command, (stage, help_text) in STAGE_COMMANDS.items():
        stage_parser = subparsers.add_parser(command, help=help_text)
        _add_common_arguments(stage_parser)
        if stage == EVALUATE_STAGE:
            stage_parser.add_argument("--metrics-out", help="Also write the metrics to this JSON file")
        stage_parser.set_defaults(func=stage_app, stage=stage)

    pipeline_parser = subparsers.add_parser("pipeline", help="Run every stage in order")
    _add_common_arguments(pipeline_parser)
    pipeline_parser.add_argument(
        "--no-resume",
        action="store_true",
        help="Rerun stages even if the manifest marks them complete"
    )
    pipeline_parser.set_defaults(func=pipeline_app)

    benchmark_parser = subparsers.add_parser("benchmark", help="Run the desk-scale shapes benchmark")
    _add_common_arguments(benchmark_parser)
    benchmark_parser.set_defaults(func=benchmark_app)

    ablate_parser = subparsers.add_parser("ablate", help="Run one ablation over the evaluation seeds")
    _add_common_arguments(ablate_parser)
    ablate_parser.add_argument("--mode", required=True, choices=ABLATION_MODES, help="Ablation to run")
    ablate_parser.set_defaults(func=ablate_app)

    return parser


def configure_logging(debug: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO, format=LOG_FORMAT)


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse ``argv`` and run the selected command.

    Returns:
        0 on success, 2 on usage or configuration errors, 3 when a stage fails
    """
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG_ERROR

    configure_logging(args.debug)

    if not hasattr(args, 'func'):
        parser.print_help()
        return EXIT_CONFIG_ERROR

    try:
        args.func(args)
    except (ConfigurationError, FileNotFoundError) as e:
        LOG.error("Configuration error: %s", e)
        return EXIT_CONFIG_ERROR
    except (StageError, TrainingDivergedError) as e:
        LOG.error("Stage failed: %s", e)
        return EXIT_STAGE_FAILURE
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
