"""Main entry point for the gossip-pga simulator.

Subcommands:

    run <config>             run every configured algorithm and write CSVs
    tables <config>          write transient-time and overhead tables
    verify [config]          run the self-check suites
    export-dataset <config>  write the generated dataset and mixing matrix
"""

import argparse
import asyncio
import logging
from pathlib import Path

from .config import ConfigManager
from .models import RunnerSettings
from .runner import emit_theory_tables, export_experiment_dataset, run_experiment
from .verify import SUBSETS, verify

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Gossip-PGA simulator - decentralized SGD with periodic global averaging"
    )
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default="INFO",
        help="Logging level (default: INFO)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run an experiment configuration")
    run.add_argument("config", help="Path to the experiment file (JSON format)")
    run.add_argument("--trials", type=int, help="Override the number of trials")
    run.add_argument("--seed", type=int, help="Override the master seed")
    run.add_argument("--out", help="Override the output directory")
    run.add_argument(
        "--parallel",
        type=int,
        help="Worker processes for trials (default: available CPUs)",
    )

    tables = commands.add_parser("tables", help="Write theory tables")
    tables.add_argument("config", help="Path to the experiment file (JSON format)")
    tables.add_argument("--out", help="Override the output directory")

    check = commands.add_parser("verify", help="Run the self-check suites")
    check.add_argument("config", nargs="?", help="Optional experiment file")
    check.add_argument(
        "--subset",
        action="append",
        choices=SUBSETS,
        help="Suite to run (repeatable, default: all)",
    )
    check.add_argument("--out", help="Write the JSON report to this file")

    export = commands.add_parser("export-dataset", help="Export dataset and weights")
    export.add_argument("config", help="Path to the experiment file (JSON format)")
    export.add_argument("--out", help="Override the output directory")
    return parser


async def main_async():
    """Async main function."""
    args = build_parser().parse_args()

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    config_path = Path(args.config) if args.config else None
    if config_path is not None and not config_path.exists():
        print(f"Error: Configuration file not found: {config_path}")
        return 1

    out = Path(args.out) if args.out else None
    match args.command:
        case "run":
            settings = ConfigManager(config_path).get_settings(
                output_dir=out,
                trials=args.trials,
                seed=args.seed,
                parallel=args.parallel,
                log_level=args.log_level,
            )
            written = await run_experiment(config_path, settings)
            logger.info(f"Wrote {len(written)} files")
            return 0
        case "tables":
            config = ConfigManager(config_path).load_config()
            emit_theory_tables(config, out)
            return 0
        case "verify":
            config = ConfigManager(config_path).load_config() if config_path else None
            report = verify(config, args.subset)
            print(report.render())
            if out is not None:
                out.write_text(report.model_dump_json(indent=2))
            return 0 if report.passed else 1
        case "export-dataset":
            config = ConfigManager(config_path).load_config()
            export_experiment_dataset(config, out)
            return 0
    return 1


def main():
    """Main entry point for the gossip-pga CLI."""
    try:
        return asyncio.run(main_async())
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 0
    except Exception as e:
        logger.error(f"Command failed: {e}")
        return 1


if __name__ == "__main__":
    exit(main())
