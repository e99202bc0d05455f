"""
Command-line entry point of the RIS spoofing simulator.

Usage:
    python -m src.cli feasible-set --out out
    python -m src.cli pipeline --seed 7 --attacker ppo --out out/run7

Exit codes: 0 success, 1 other simulator errors, 2 configuration error,
3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config.env_config import ConfigLoader
from src.errors import ConfigError, NumericalFailure, PipelineStageError, SpoofSimError
from src.experiments import (ATTACKERS, DetectionPipeline, evaluated_attackers, run_cluster, run_detect,
                             run_eval, run_feasible_sweep, run_gen_data, run_learn_stl, run_plan_attack,
                             run_spoof_slot, run_track)
from utils.artifact_io import load_cluster_model, read_dataset

logger = logging.getLogger(__name__)

LOG_FILE = "ris_spoof.log"
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def setup_logging(out_dir: Path, level: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(out_dir / LOG_FILE),
            logging.StreamHandler()
        ],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ris-spoof", description="RIS sensing-spoofing simulator and STL detector")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Scenario YAML (default: config/scenario.yaml)")
    common.add_argument("--seed", type=int, default=None, help="Root seed overriding the config")
    common.add_argument("--out", type=str, default=None, help="Output directory")

    verbs = parser.add_subparsers(dest="command", required=True)
    verbs.add_parser("feasible-set", parents=[common], help="Feasible spoofing frequencies over the beam sweep")

    spoof = verbs.add_parser("spoof-slot", parents=[common], help="AoD bias of a spoofed slot (Monte Carlo)")
    spoof.add_argument("--trials", type=int, default=None, help="Noise trials per cell")

    plan = verbs.add_parser("plan-attack", parents=[common], help="Train masked and unmasked PPO attackers")
    plan.add_argument("--episodes", type=int, default=None, help="Training episodes")
    plan.add_argument("--oracle", action="store_true", help="Also log the exhaustive-search episode")

    track = verbs.add_parser("track", parents=[common], help="Beam tracking with and without the attacker")
    track.add_argument("--attacker", choices=ATTACKERS, default="none")

    verbs.add_parser("gen-data", parents=[common], help="Generate the clean training and test sets")

    cluster = verbs.add_parser("cluster", parents=[common], help="Cluster a clean dataset")
    cluster.add_argument("--input", type=str, default=None, help="Dataset CSV (default: <out>/dataset.csv)")
    cluster.add_argument("--iterations", type=int, default=None)

    learn = verbs.add_parser("learn-stl", parents=[common], help="Learn one formula per cluster")
    learn.add_argument("--input", type=str, default=None, help="Dataset CSV (default: <out>/dataset.csv)")
    learn.add_argument("--epochs", type=int, default=None)

    detect = verbs.add_parser("detect", parents=[common], help="Classify trajectories with a saved bundle")
    detect.add_argument("--input", type=str, required=True, help="Dataset CSV to classify")

    pipeline = verbs.add_parser("pipeline", parents=[common], help="Data, attack, detection and evaluation")
    pipeline.add_argument("--attacker", choices=ATTACKERS, default="ppo")
    pipeline.add_argument("--episodes", type=int, default=None)
    pipeline.add_argument("--iterations", type=int, default=None)
    pipeline.add_argument("--epochs", type=int, default=None)

    evaluate = verbs.add_parser("eval", parents=[common], help="Confusion matrices of both detectors")
    evaluate.add_argument("--attacker", choices=ATTACKERS, default="ppo")
    return parser


def run_command(args, config, out_dir: Path):
    command = args.command
    if command == "feasible-set":
        return run_feasible_sweep(config, out_dir)
    if command == "spoof-slot":
        return run_spoof_slot(config, out_dir, args.trials)
    if command == "plan-attack":
        return run_plan_attack(config, out_dir, args.episodes, include_oracle=args.oracle)
    if command == "track":
        return run_track(config, out_dir, args.attacker)
    if command == "gen-data":
        return run_gen_data(config, out_dir)
    if command == "cluster":
        trajectories, _ = read_dataset(args.input or out_dir / "dataset.csv")
        result, _, _ = run_cluster(config, out_dir, trajectories, args.iterations)
        return result
    if command == "learn-stl":
        trajectories, _ = read_dataset(args.input or out_dir / "dataset.csv")
        result, _ = run_learn_stl(config, out_dir, load_cluster_model(out_dir / "cluster_model"), trajectories,
                                  args.epochs)
        return result
    if command == "detect":
        return run_detect(config, out_dir, args.input)
    if command == "pipeline":
        return DetectionPipeline(config, out_dir, args.attacker, args.episodes, args.iterations, args.epochs).run()
    if command == "eval":
        return run_eval(config, out_dir, evaluated_attackers(args.attacker))
    raise SpoofSimError(f"Unknown command: {command}")


def exit_code(error: Exception) -> int:
    cause = error.cause if isinstance(error, PipelineStageError) else error
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, NumericalFailure):
        return EXIT_NUMERICAL
    return EXIT_ERROR


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        loader = ConfigLoader(args.config)
        out_dir = Path(args.out) if args.out else loader.get_out_dir()
        setup_logging(out_dir, loader.get_log_level())
        config = loader.load()
        if args.seed is not None:
            config = config.with_seed(args.seed)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    logger.info(f"Running '{args.command}' with seed {config.seed}, output in {out_dir}")
    try:
        result = run_command(args, config, out_dir)
    except (SpoofSimError, ValueError) as e:
        logger.error(f"'{args.command}' failed: {e}")
        return exit_code(e)

    summary = result.write_summary(out_dir)
    for name, value in sorted(result.metrics.items()):
        logger.info(f"  {name}: {value}")
    logger.info(f"Summary written to {summary}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
