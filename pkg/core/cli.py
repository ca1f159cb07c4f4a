"""Command-line interface for training, evaluation and reporting."""
import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from config.config import LOG_LEVEL, RunConfig, load_run_config
from .base import ErrorResult
from .evaluation import cross_evaluate, evaluate, joint_vs_single
from .media_data import DatabaseRegistry, database_from_config, databases_for_run, write_manifest
from .operations import MetricsLog
from .reporting import report
from .training import run_full_pipeline
from .utils import Colors
from .verification import ConfigHashError, ManifestError, OverlapError, VerificationError

logger = logging.getLogger(__name__)

SUGGESTIONS = {
    ConfigHashError: "Use a fresh --run-dir or restore the config the run was started with",
    ManifestError: "Check the manifest CSV header, MOS range and media paths",
    OverlapError: "Held-out databases must not share names or sample ids with training data",
    FileNotFoundError: "Check the path, or train the missing repeat first",
}


def setup_logging(level: str = LOG_LEVEL) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=f'{Colors.LOG}%(levelname)s: %(message)s{Colors.RESET}',
        datefmt='%H:%M:%S'
    )


def _config(args) -> RunConfig:
    if not args.config:
        raise ValueError("No run config given (use --config or UNQA_CONFIG)")
    config = load_run_config(args.config)
    if getattr(args, 'run_dir', None):
        config = replace(config, run_dir=args.run_dir)
    return config


def cmd_train(args) -> None:
    config = _config(args)
    databases = databases_for_run(config)
    result = run_full_pipeline(databases, config, config.run_dir)
    print(MetricsLog(Path(config.run_dir)).format_summary())
    print(Colors.success(f"Final checkpoint: {result.final_checkpoint}"))


def cmd_eval(args) -> None:
    config = _config(args)
    seeds = config.evaluation.repeat_seeds
    if args.repeats is not None:
        seeds = [config.evaluation.base_seed + i for i in range(args.repeats)]
    report_ = evaluate(config, databases_for_run(config), seeds, checkpoint=args.checkpoint,
                       run_dir=config.run_dir)
    for name, means in report_.means().items():
        print(Colors.table(f"{name}: SRCC {means['srcc']:.4f}  PLCC {means['plcc']:.4f}  "
                           f"({means['repeats']} repeats)"))


def cmd_cross_eval(args) -> None:
    config = _config(args)
    registry = DatabaseRegistry()
    if args.held_out:
        # manifests on the command line replace every held-out database of the config
        config = replace(config, held_out_manifests=tuple(args.held_out), held_out_synthetic=())
    held_out = databases_for_run(config, held_out=True, registry=registry)
    report_ = cross_evaluate(args.checkpoint, held_out, config, run_dir=config.run_dir)
    for name, means in report_.means().items():
        print(Colors.table(f"{name}: SRCC {means['srcc']:.4f}  PLCC {means['plcc']:.4f}"))


def cmd_compare(args) -> None:
    config = _config(args)
    databases = databases_for_run(config)
    by_name = {db.name: db for db in databases}
    if args.target not in by_name:
        raise ValueError(f"Unknown target database {args.target}; choose from {sorted(by_name)}")
    others = [db for db in databases if db.name != args.target]
    seeds = args.seeds or config.evaluation.repeat_seeds[:3]
    rows = joint_vs_single(by_name[args.target], others, config, seeds, config.run_dir)
    print(Colors.info(f"joint >= single in {sum(r['passed'] for r in rows)} of {len(rows)} seeds"))


def cmd_report(args) -> None:
    outputs = report(args.run, args.out)
    for kind, paths in outputs.items():
        for path in paths:
            print(Colors.success(f"{kind[:-1]}: {path}"))


def cmd_gen_data(args) -> None:
    config = _config(args)
    out = Path(args.out or config.data_dir)
    registry = DatabaseRegistry()
    batch_size = config.phases['step1'].batch_size
    for synthetic in (*config.synthetic, *config.held_out_synthetic):
        database = database_from_config(synthetic, registry, batch_size=batch_size)
        print(Colors.success(f"{database.name}: {write_manifest(database, out)}"))


def create_parser() -> argparse.ArgumentParser:
    """Create and configure argument parser."""
    parser = argparse.ArgumentParser(
        description='Unified no-reference quality assessment for audio, image, video and A/V',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
Environment Variables:
    UNQA_CONFIG        Run config file (default for --config)
    UNQA_CHECKPOINT    Checkpoint file or directory (default for --checkpoint)
    UNQA_RUN_DIR       Run directory override
    UNQA_DATA_DIR      Where gen-data writes manifests
    UNQA_SEED          Run seed override
    UNQA_LOG_LEVEL     Logging level (default: {LOG_LEVEL})

Examples:
    # Generate the toy databases, then train on them
    python unqa.py gen-data --config config/toy_run.json
    python unqa.py train --config config/toy_run.json

    # Ten repeated 7:1:2 splits, retraining per repeat
    python unqa.py eval --config config/toy_run.json --repeats 10

    # Zero-shot test on held-out manifests
    python unqa.py cross-eval --config config/toy_run.json --checkpoint runs/toy/checkpoints/step3.pt \\
        --held-out data/other.csv

    # Tables and plots
    python unqa.py report --run runs/toy runs/toy_lrs
"""
    )
    sub = parser.add_subparsers(dest='command', required=True)

    def with_config(p):
        p.add_argument('--config', '-c', default=os.environ.get('UNQA_CONFIG'), help='Run config JSON file')
        p.add_argument('--run-dir', default=None, help='Override the run directory')
        return p

    p = with_config(sub.add_parser('train', help='Run the training pipeline'))
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser('eval', help='Repeated-split evaluation'))
    p.add_argument('--checkpoint', default=os.environ.get('UNQA_CHECKPOINT'),
                   help='Checkpoint file (eval-only) or directory of repeat_<seed> runs; omit to retrain')
    p.add_argument('--repeats', type=int, default=None, help='Number of repeat seeds')
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser('cross-eval', help='Zero-shot held-out evaluation'))
    p.add_argument('--checkpoint', default=os.environ.get('UNQA_CHECKPOINT'), required=False)
    p.add_argument('--held-out', nargs='+', default=None, help='Held-out manifest CSV files')
    p.set_defaults(func=cmd_cross_eval)

    p = with_config(sub.add_parser('compare', help='Joint versus single-database training'))
    p.add_argument('--target', required=True, help='Database scored in both configurations')
    p.add_argument('--seeds', type=int, nargs='+', default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser('report', help='Tables and plots for run directories')
    p.add_argument('--run', nargs='+', required=True, help='Run directories')
    p.add_argument('--out', default=None, help='Output directory (default: <first run>/report)')
    p.set_defaults(func=cmd_report)

    p = with_config(sub.add_parser('gen-data', help='Write synthetic databases as manifests'))
    p.add_argument('--out', default=None, help='Output directory (default: data_dir)')
    p.set_defaults(func=cmd_gen_data)
    return parser


def error_result(e: Exception) -> ErrorResult:
    suggestion = next((s for cls, s in SUGGESTIONS.items() if isinstance(e, cls)), None)
    return ErrorResult(error=str(e), kind=type(e).__name__, suggestion=suggestion,
                       details={'category': 'verification' if isinstance(e, VerificationError) else 'runtime'})


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the application."""
    setup_logging()
    try:
        args = create_parser().parse_args(argv)
        if args.command == 'cross-eval' and not args.checkpoint:
            raise ValueError("cross-eval needs --checkpoint or UNQA_CHECKPOINT")
        args.func(args)
        return 0
    except KeyboardInterrupt:
        print(f"\n{Colors.LOG}Operation cancelled by user.{Colors.RESET}", file=sys.stderr)
        sys.exit(130)
    except Exception as e:
        logger.error(f"Application error: {e}")
        result = error_result(e)
        print(result.format_message(), file=sys.stderr)
        print(json.dumps(result.to_dict()), file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
