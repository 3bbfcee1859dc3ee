"""Command-line entry point: collect, train, eval, grid, generalize and report."""

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import List, Optional

from haptic_act.checkpoint import TrainingProvenance, read_checkpoint, save_checkpoint
from haptic_act.config import DatasetProfile, ExperimentConfig
from haptic_act.controller import TrainedPolicy
from haptic_act.dataset import build_dataset, load_dataset, save_dataset
from haptic_act.errors import HapticActError
from haptic_act.harness import (
    ResultRow,
    ResultsTable,
    derive_seed,
    evaluate,
    run_generalization,
    run_grid,
    run_recovery_sweep,
)
from haptic_act.logger import get_experiment_logger
from haptic_act.report import emit_report, regenerate_report
from haptic_act.training import train

SHORT_PROTOCOL_TRIALS = 10
MODEL_NAME = "model.hiam"
TRAIN_LOG_NAME = "train_log.csv"

EPILOG = """
Configuration precedence (highest to lowest):
  1. Command-line arguments
  2. Config file (~/.haptic-act/config.yaml or config.toml, or HAPTIC_ACT_CONFIG)
  3. Environment variables (HAPTIC_ACT_SEED)
  4. Defaults

Config file format (YAML):
  env:
    p_slip: 0.3
    max_steps: 125
  policy:
    chunk_k: 10
    train_steps: 3000
  dataset:
    n_success: 160
    n_recovery: 40
  harness:
    master_seed: 0
    n_eval_trials: 100
"""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Config file (YAML or TOML)")
    common.add_argument("--seed", type=int, default=None, help="Master seed (overrides config file, default: 0)")
    common.add_argument("--workers", type=int, default=None, help="Threads for collection and evaluation")

    protocol = argparse.ArgumentParser(add_help=False)
    protocol.add_argument("--trials", type=int, default=None, help="Evaluation trials per condition (default: 100)")
    protocol.add_argument(
        "--short-protocol",
        action="store_true",
        help=f"Evaluate with {SHORT_PROTOCOL_TRIALS} trials per condition",
    )

    profile = argparse.ArgumentParser(add_help=False)
    profile.add_argument("--n-success", type=int, default=None, help="Success demonstrations (default: 160)")
    profile.add_argument("--n-recovery", type=int, default=None, help="Recovery demonstrations (default: 40)")
    profile.add_argument("--small-profile", action="store_true", help="Use the 40/10 dataset profile")

    parser = argparse.ArgumentParser(
        prog="haptic-act",
        description="Haptic-informed action chunking in a simulated seed-transfer task",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    collect = commands.add_parser("collect", parents=[common, profile], help="Generate demonstrations")
    collect.add_argument("--out", type=Path, required=True, help="Dataset directory")

    train_cmd = commands.add_parser("train", parents=[common], help="Train one policy")
    train_cmd.add_argument("--dataset", type=Path, required=True, help="Dataset directory")
    train_cmd.add_argument(
        "--haptic", action=argparse.BooleanOptionalAction, default=None, help="Feed the force channel"
    )
    train_cmd.add_argument("--steps", type=int, default=None, help="Training steps (default: 3000)")
    train_cmd.add_argument("--out", type=Path, required=True, help="Output directory for model and train log")

    eval_cmd = commands.add_parser("eval", parents=[common, protocol], help="Evaluate one policy")
    eval_cmd.add_argument("--model", type=Path, required=True, help="Checkpoint file")
    eval_cmd.add_argument("--p-slip", type=float, default=None, help="Slip probability at lift (default: 0.3)")
    eval_cmd.add_argument("--out", type=Path, required=True, help="Output directory")

    grid = commands.add_parser("grid", parents=[common, protocol, profile], help="Run the 2x2 condition grid")
    grid.add_argument("--steps", type=int, default=None, help="Training steps per condition (default: 3000)")
    grid.add_argument(
        "--sweep",
        type=float,
        nargs="*",
        default=None,
        help="Also train the haptic model at these recovery fractions (no value: config fractions)",
    )
    grid.add_argument("--out", type=Path, required=True, help="Output directory")

    generalize = commands.add_parser("generalize", parents=[common, protocol], help="Evaluate on novel objects")
    generalize.add_argument("--model", type=Path, required=True, help="Checkpoint of the haptic+recovery model")
    generalize.add_argument("--out", type=Path, required=True, help="Output directory")

    report = commands.add_parser("report", help="Regenerate report.md from saved CSVs")
    report.add_argument("--in", dest="in_dir", type=Path, required=True, help="Directory with result CSVs")
    report.add_argument("--out", type=Path, default=None, help="Where to write report.md (default: --in)")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Build the experiment config and layer the CLI flags on top of it."""
    config = ExperimentConfig(config_file=args.config, master_seed=args.seed)
    config.overridden("harness", workers=args.workers)
    if getattr(args, "small_profile", False):
        small = DatasetProfile.preset("small")
        config.overridden("dataset", n_success=small.n_success, n_recovery=small.n_recovery, name=small.name)
    config.overridden(
        "dataset", n_success=getattr(args, "n_success", None), n_recovery=getattr(args, "n_recovery", None)
    )
    trials = getattr(args, "trials", None)
    if getattr(args, "short_protocol", False) and trials is None:
        trials = SHORT_PROTOCOL_TRIALS
    config.overridden("harness", n_eval_trials=trials)
    config.overridden("env", p_slip=getattr(args, "p_slip", None))
    config.overridden("policy", train_steps=getattr(args, "steps", None), haptic_enabled=getattr(args, "haptic", None))
    return config


def cmd_collect(args: argparse.Namespace, config: ExperimentConfig) -> None:
    profile = config.dataset
    dataset = build_dataset(
        profile.n_success,
        profile.n_recovery,
        derive_seed(config.harness.master_seed, "dataset"),
        config.env,
        workers=config.harness.workers,
    )
    save_dataset(dataset, args.out)


def cmd_train(args: argparse.Namespace, config: ExperimentConfig) -> None:
    dataset = load_dataset(args.dataset)
    cfg = dataclasses.replace(config.policy, rng_seed=derive_seed(config.harness.master_seed, "train"))
    params, log = train(dataset, cfg)
    save_checkpoint(params, args.out / MODEL_NAME, TrainingProvenance.from_dataset(dataset))
    log.to_csv(args.out / TRAIN_LOG_NAME)


def cmd_eval(args: argparse.Namespace, config: ExperimentConfig) -> None:
    checkpoint = read_checkpoint(args.model)
    params, provenance = checkpoint.params, checkpoint.provenance
    harness = config.harness
    seed = derive_seed(harness.master_seed, "eval")
    env_config = dataclasses.replace(config.env, rng_seed=seed, target_tube=None)
    evaluation = evaluate(
        lambda: TrainedPolicy(params, params.cfg),
        env_config,
        harness.n_eval_trials,
        harness.ensemble_m,
        harness.ensemble_orientation,
        harness.workers,
        harness.force_traces,
    )
    name = args.model.stem
    row = ResultRow.from_trials(
        evaluation.trials,
        name=name,
        haptic=params.cfg.haptic_enabled,
        recovery_samples=provenance.recovery_samples,
        recovery_fraction=provenance.recovery_fraction,
        variant="control",
        size_multiplier=env_config.seed_size_multiplier,
        contrast=env_config.seed_contrast,
        dataset_seed=provenance.dataset_seed,
        train_seed=params.cfg.rng_seed,
        eval_seed=seed,
    )
    table = ResultsTable(
        kind="eval",
        rows=[row],
        traces={f"{name}_{trial:03d}": trace for trial, trace in evaluation.traces.items()},
    )
    emit_report([table], args.out)


def cmd_grid(args: argparse.Namespace, config: ExperimentConfig) -> None:
    tables = [run_grid(config)]
    if args.sweep is not None:
        tables.append(run_recovery_sweep(config, args.sweep or None))
    for table in tables:
        for name, model in table.models.items():
            save_checkpoint(model.params, args.out / "models" / f"{name}.hiam", model.provenance)
            model.log.to_csv(args.out / "models" / f"{name}_{TRAIN_LOG_NAME}")
    emit_report(tables, args.out)


def cmd_generalize(args: argparse.Namespace, config: ExperimentConfig) -> None:
    checkpoint = read_checkpoint(args.model)
    table = run_generalization(checkpoint.params, config, name=args.model.stem, provenance=checkpoint.provenance)
    emit_report([table], args.out)


def cmd_report(args: argparse.Namespace) -> None:
    print(regenerate_report(args.in_dir, args.out))


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "generalize": cmd_generalize,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point for the command line.

    Returns:
        0 on success, the error's category code on a known failure, 1 otherwise.
    """
    args = build_parser().parse_args(argv)
    logger = get_experiment_logger()
    try:
        if args.command == "report":
            cmd_report(args)
        else:
            config = load_config(args)
            logger.info(f"command_started command={args.command} master_seed={config.harness.master_seed}")
            COMMANDS[args.command](args, config)
        logger.info(f"command_completed command={args.command}")
        return 0
    except HapticActError as e:
        logger.error(f"command_failed command={args.command} error_type={type(e).__name__} error={e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\nInterrupted.", file=sys.stderr)
        return 130
    except Exception as e:
        logger.exception(f"command_failed command={args.command} error_type={type(e).__name__}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
