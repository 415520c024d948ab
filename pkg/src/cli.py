"""
Hebbian task-incremental learning experiment CLI.
Prepares feature caches, runs task-incremental / joint / common-head /
compare experiments over seeds and recomputes metrics from stored matrices.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from audio.dataset import load_split, prepare_cache
from audio.ingest import AudioDecodeError, DatasetError
from harness.coordinator import ExperimentCoordinator, RunContext, run_compare
from harness.metrics import MetricError, accuracy_views, stage_metrics
from models import __version__
from models.config import ConfigError, ExperimentConfig, RunMode, load_config
from models.result import RunStatus
from utils.storage import CheckpointError, CheckpointStore, ReportStore, load_matrices

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_USAGE = 2

LOG_FORMAT = '[%(levelname)s] %(name)s: %(message)s'
RUN_COMMANDS = (RunMode.TIL.value, RunMode.JOINT.value, RunMode.COMMON_HEAD.value, RunMode.COMPARE.value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='htil', description='Hebbian task-incremental learning experiments')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='TOML experiment profile')
    common.add_argument('--out', help='output directory (overrides [run].out_dir)')
    common.add_argument('--verbose', action='store_true', help='debug logging')
    common.add_argument('--progress', action='store_true', help='show progress bars')

    prepare = commands.add_parser('prepare', parents=[common], help='build the feature cache')
    prepare.add_argument('--cache', help='cache path (overrides [dataset].cache_path)')

    for name in RUN_COMMANDS:
        run = commands.add_parser(name, parents=[common], help=f'{name} run over seeds')
        run.add_argument('--seed', type=int, help='first seed')
        run.add_argument('--seeds', type=int, help='number of consecutive seeds')
        run.add_argument('--kp', choices=['on', 'off'], help='kernel plasticity (ignored by compare)')
        run.add_argument('--resume', metavar='PATH',
                         help='checkpoint to resume from (common-head: checkpoint to read)')

    metrics = commands.add_parser('metrics', help='recompute FM/BWT/IM from a stored matrix or report')
    metrics.add_argument('path', help='run report or accuracy-matrix JSON')
    metrics.add_argument('--joint', type=float, nargs='+', metavar='ACC',
                         help='joint reference accuracies per stage, as fractions')
    metrics.add_argument('--verbose', action='store_true', help='debug logging')
    return parser


def configure_logging(verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


class ExperimentCli:
    """Routes parsed subcommands to their handlers."""

    def __init__(self, coordinator: Optional[ExperimentCoordinator] = None):
        self.coordinator = coordinator or ExperimentCoordinator()

    def run(self, argv: List[str]) -> int:
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as exit_request:
            return EXIT_OK if exit_request.code in (0, None) else EXIT_USAGE
        configure_logging(args.verbose)

        try:
            if args.command == 'metrics':
                return self.handle_metrics(args)
            config = self.load_config(args)
            if args.command == 'prepare':
                return self.handle_prepare(args, config)
            return self.handle_run(args, config)
        except ConfigError as error:
            self.log_exception('Invalid configuration', error)
            return EXIT_USAGE
        except (DatasetError, AudioDecodeError, CheckpointError, MetricError, OSError) as error:
            self.log_exception(f'{args.command} failed', error)
            return EXIT_RUN_FAILURE

    def load_config(self, args) -> ExperimentConfig:
        config = load_config(args.config)
        if args.out:
            config.run.out_dir = args.out
        if getattr(args, 'seed', None) is not None:
            config.run.seed = args.seed
        if getattr(args, 'seeds', None) is not None:
            config.run.num_seeds = args.seeds
        if getattr(args, 'kp', None) is not None:
            config.kp.enabled = args.kp == 'on'
        if args.command in RUN_COMMANDS:
            config.run.mode = args.command
        config.validate(path=args.config)
        return config

    def handle_prepare(self, args, config: ExperimentConfig) -> int:
        """Decode the dataset once into the binary feature cache."""
        cache_path = args.cache or config.dataset.cache_path or str(Path(config.run.out_dir) / 'features.htil')
        cache = prepare_cache(config, cache_path, show_progress=args.progress)
        print(f"Feature cache written to {cache.path} (metadata {cache.sidecar})")
        return EXIT_OK

    def handle_run(self, args, config: ExperimentConfig) -> int:
        """Execute a harness mode over every configured seed."""
        split = load_split(config, show_progress=args.progress)
        out_dir = Path(config.run.out_dir)
        store = ReportStore(out_dir)
        seeds = config.seeds
        resume_path = args.resume
        if resume_path and args.command in (RunMode.TIL.value, RunMode.COMPARE.value):
            if args.command == RunMode.COMPARE.value:
                raise ConfigError("--resume is not supported by compare")
            _, _, _, progress = CheckpointStore(None).load(resume_path)
            seeds = [progress['seed']]
            config.kp.enabled = progress['kp_enabled']
            logger.info("Resuming seed %d from %s", seeds[0], resume_path)

        context = RunContext(
            config=config,
            split=split,
            kp_enabled=config.kp.enabled,
            checkpoints=CheckpointStore(str(out_dir / 'checkpoints')),
            resume_path=resume_path,
            show_progress=args.progress
        )
        if args.command == RunMode.COMPARE.value:
            reports = run_compare(self.coordinator, context, seeds, store)
        else:
            report = self.coordinator.run(args.command, context, seeds)
            self.coordinator.write_report(args.command, context, report, store)
            reports = [report]

        for report in reports:
            self.print_summary(report)
        if any(report.status != RunStatus.COMPLETED for report in reports):
            logger.warning("Run finished with failed seeds; partial report kept in %s", out_dir)
            return EXIT_RUN_FAILURE
        return EXIT_OK

    def handle_metrics(self, args) -> int:
        """Recompute FM, BWT and IM (in percent) from a stored matrix."""
        try:
            matrices = load_matrices(args.path)
        except ValueError as error:
            self.log_exception('metrics failed', error)
            return EXIT_RUN_FAILURE
        for index, matrix in enumerate(matrices):
            metrics = stage_metrics(matrix, args.joint)
            views = accuracy_views(matrix)
            print(f"matrix {index}: {matrix.num_tasks} tasks")
            print("stage  overall  previous  last      FM      BWT     IM")
            for stage in range(matrix.num_tasks):
                cells = [views[stage]['overall'], views[stage]['previous'], views[stage]['last'],
                         metrics['fm'][stage], metrics['bwt'][stage], metrics['im'][stage]]
                print(f"{stage:>5}  " + '  '.join(_format_percent(value) for value in cells))
        return EXIT_OK

    def print_summary(self, report):
        completed = sum(1 for result in report.seeds if result.error is None)
        print(f"{report.mode} (kp {'on' if report.kp_enabled else 'off'}, {report.kp_profile}): "
              f"{completed}/{len(report.seeds)} seeds completed in {report.wall_clock_seconds:.1f}s")

    def log_exception(self, context: str, error: Exception):
        """Log a failure as context, exception type and message."""
        logger.error("%s: %s: %s", context, type(error).__name__, error)


def _format_percent(value: Optional[float]) -> str:
    return f"{'-':>7}" if value is None else f"{100.0 * value:7.2f}"


def cli_run(argv: List[str]) -> int:
    return ExperimentCli().run(argv)


def main() -> int:
    return cli_run(sys.argv[1:])


if __name__ == '__main__':
    sys.exit(main())
