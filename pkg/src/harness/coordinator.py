"""Run coordinator: mode registry, per-seed dispatch and report assembly."""
import inspect
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from harness.metrics import accuracy_views, mean_over_seeds, stage_metrics
from harness.protocol import (HarnessError, joint_references, run_common_head, run_til, split_tasks)
from models import __version__
from models.config import ExperimentConfig, RunMode
from models.dataset import FoldSplit
from models.result import AccuracyMatrix, RunReport, RunStatus, SeedResult
from utils.fingerprint import RunDeduplicator, config_hash, run_key
from utils.storage import CheckpointStore, ReportStore

logger = logging.getLogger(__name__)

THREADS_ENV = 'HTIL_THREADS'

# Global runner registry
_MODE_REGISTRY: Dict[str, type] = {}


def register_mode(mode: str, runner_class: type) -> None:
    """Register a runner class for a run mode."""
    if not isinstance(mode, str) or not mode.strip():
        raise ValueError("mode must be a non-empty string")
    if not isinstance(runner_class, type):
        raise TypeError("runner_class must be a class")
    if mode in _MODE_REGISTRY:
        raise ValueError(
            f"Runner already registered for mode: '{mode}'. "
            f"Existing: {_MODE_REGISTRY[mode].__name__}, "
            f"New: {runner_class.__name__}"
        )
    for required_method in ("run_seed", "result_rows"):
        method = getattr(runner_class, required_method, None)
        if not callable(method):
            raise TypeError(f"{runner_class.__name__} must define `{required_method}`")
    init_sig = inspect.signature(runner_class.__init__)
    required_ctor_params = [
        p for name, p in init_sig.parameters.items()
        if name != "self"
        and p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD, p.KEYWORD_ONLY)
        and p.default is inspect.Parameter.empty
    ]
    if required_ctor_params:
        raise TypeError(f"{runner_class.__name__} must be instantiable without required constructor args")
    _MODE_REGISTRY[mode] = runner_class


def registered_modes() -> List[str]:
    return sorted(_MODE_REGISTRY)


@dataclass
class RunContext:
    """Everything a runner needs besides the seed."""
    config: ExperimentConfig
    split: FoldSplit
    kp_enabled: bool
    checkpoints: CheckpointStore = field(default_factory=lambda: CheckpointStore(None))
    resume_path: Optional[str] = None
    deduplicator: RunDeduplicator = field(default_factory=RunDeduplicator)
    show_progress: bool = False

    @property
    def config_hash(self) -> str:
        return config_hash(self.config.to_dict())

    @property
    def training_hash(self) -> str:
        """Hash of every section except [run], so checkpoints survive a new out_dir or seed count."""
        data = self.config.to_dict()
        data.pop('run')
        return config_hash(data)

    def joint_references(self, seed: int) -> List[float]:
        """Joint accuracies per stage; shared between KP on and off under one config."""
        data = self.config.to_dict()
        data.pop('kp')
        key = run_key(data, seed, 'joint')
        return self.deduplicator.get_or_compute(
            key, lambda: joint_references(self.config, self.split, seed, self.show_progress))


def _kp_flag(context: RunContext) -> int:
    return int(context.kp_enabled)


class TilRunner:
    """Task-incremental run with FM, BWT and IM per stage."""

    def run_seed(self, context: RunContext, seed: int) -> SeedResult:
        result = run_til(context.config, context.split, seed, context.kp_enabled, context.training_hash,
                         context.checkpoints, context.resume_path, context.show_progress)
        try:
            result.joint_references = context.joint_references(seed)
        except Exception as error:
            # the incremental matrix stays; IM is left empty for this seed
            result.joint_error = f"{type(error).__name__}: {error}"
            logger.warning("Seed %d: joint references failed, IM skipped: %s", seed, result.joint_error)
        result.metrics = stage_metrics(result.matrix, result.joint_references)
        return result

    def result_rows(self, context: RunContext, result: SeedResult) -> List[Dict[str, Any]]:
        rows = []
        common = {'seed': result.seed, 'kp_enabled': _kp_flag(context)}
        matrix = result.matrix
        for stage in range(matrix.num_tasks):
            for task in range(stage + 1):
                rows.append(dict(common, stage=stage, task=task, metric='accuracy', value=matrix.get(stage, task)))
        for view in accuracy_views(matrix):
            for metric in ('overall', 'previous', 'last'):
                if view[metric] is not None:
                    rows.append(dict(common, stage=view['stage'], task='', metric=metric, value=view[metric]))
        for metric, values in result.metrics.items():
            for stage, value in enumerate(values):
                if value is not None:
                    rows.append(dict(common, stage=stage, task='', metric=metric, value=value))
        for stage, value in enumerate(result.val_accuracies):
            if value is not None:
                rows.append(dict(common, stage=stage, task=stage, metric='val_accuracy', value=value))
        return rows


class JointRunner:
    """Joint reference models on the cumulative class unions."""

    def run_seed(self, context: RunContext, seed: int) -> SeedResult:
        return SeedResult(seed=seed, matrix=AccuracyMatrix(), joint_references=context.joint_references(seed))

    def result_rows(self, context: RunContext, result: SeedResult) -> List[Dict[str, Any]]:
        return [{'stage': stage, 'task': '', 'metric': 'joint_accuracy', 'value': value,
                 'seed': result.seed, 'kp_enabled': _kp_flag(context)}
                for stage, value in enumerate(result.joint_references)]


class CommonHeadRunner:
    """One head over all classes on the incrementally trained extractor."""

    def run_seed(self, context: RunContext, seed: int) -> SeedResult:
        path = context.resume_path or context.config.run.checkpoint
        if not path and context.checkpoints.root is not None:
            last_task = len(split_tasks(context.split.num_classes, context.config.tasks.sizes, seed)) - 1
            path = str(context.checkpoints.path_for(seed, last_task))
        value = run_common_head(context.config, context.split, seed, path)
        return SeedResult(seed=seed, matrix=AccuracyMatrix(), metrics={'common_head_accuracy': [value]})

    def result_rows(self, context: RunContext, result: SeedResult) -> List[Dict[str, Any]]:
        values = result.metrics.get('common_head_accuracy', [])
        stage = len(context.config.tasks.sizes) - 1
        return [{'stage': stage, 'task': '', 'metric': 'common_head_accuracy', 'value': value,
                 'seed': result.seed, 'kp_enabled': _kp_flag(context)} for value in values]


register_mode(RunMode.TIL.value, TilRunner)
register_mode(RunMode.JOINT.value, JointRunner)
register_mode(RunMode.COMMON_HEAD.value, CommonHeadRunner)


def thread_limit() -> int:
    """Worker threads for seed-level parallelism, from HTIL_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, '1')
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1


class ExperimentCoordinator:
    """Dispatches seeds to the registered runner of a mode and builds reports."""

    def __init__(self):
        """Initialize coordinator from registry."""
        self.runner_map = {mode: runner_class() for mode, runner_class in _MODE_REGISTRY.items()}

    def process_seed(self, mode: str, context: RunContext, seed: int) -> Dict[str, Any]:
        """Run one seed; failures are returned, never raised."""
        runner = self.runner_map.get(mode)
        if not runner:
            return {'success': False, 'seed': seed, 'error': f'No runner available for mode: {mode}'}
        try:
            return {'success': True, 'seed': seed, 'result': runner.run_seed(context, seed)}
        except HarnessError as error:
            return {'success': False, 'seed': seed, 'error': str(error), 'matrix': error.matrix}
        except Exception as error:
            return {'success': False, 'seed': seed, 'error': f"{type(error).__name__}: {error}"}

    def process_seeds(self, mode: str, context: RunContext, seeds: List[int]) -> List[Dict[str, Any]]:
        threads = min(thread_limit(), len(seeds))
        if threads <= 1:
            return [self.process_seed(mode, context, seed) for seed in seeds]
        logger.info("Running %d seeds on %d threads", len(seeds), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda seed: self.process_seed(mode, context, seed), seeds))

    def run(self, mode: str, context: RunContext, seeds: List[int]) -> RunReport:
        """Run every seed of a mode and assemble the report."""
        started = time.monotonic()
        outcomes = self.process_seeds(mode, context, seeds)
        results = []
        for outcome in outcomes:
            if outcome['success']:
                results.append(outcome['result'])
                continue
            logger.error("Seed %d failed: %s", outcome['seed'], outcome['error'])
            results.append(SeedResult(seed=outcome['seed'], matrix=outcome.get('matrix') or AccuracyMatrix(),
                                      error=outcome['error']))
        failures = sum(1 for outcome in outcomes if not outcome['success'])
        if failures == 0:
            status = RunStatus.COMPLETED
        elif failures == len(outcomes):
            status = RunStatus.FAILED
        else:
            status = RunStatus.PARTIAL
        if status == RunStatus.COMPLETED and any(result.joint_error for result in results):
            status = RunStatus.PARTIAL
        return RunReport(
            mode=mode,
            config=context.config.to_dict(),
            config_hash=context.config_hash,
            kp_enabled=context.kp_enabled,
            kp_profile=context.config.kp.provenance,
            software_version=__version__,
            status=status,
            seeds=results,
            wall_clock_seconds=time.monotonic() - started
        )

    def result_rows(self, mode: str, context: RunContext, report: RunReport) -> List[Dict[str, Any]]:
        runner = self.runner_map[mode]
        rows = []
        for result in report.seeds:
            if result.error is None:
                rows.extend(runner.result_rows(context, result))
        return rows

    def write_report(self, mode: str, context: RunContext, report: RunReport, store: ReportStore,
                     suffix: str = '') -> None:
        report_path = store.save_report(report, f"report{suffix}.json")
        results_path = store.save_results(self.result_rows(mode, context, report), f"results{suffix}.csv")
        logger.info("Report written to %s, results to %s", report_path, results_path)


def _completed(report: RunReport) -> List[SeedResult]:
    return [result for result in report.seeds if result.error is None]


def _mean_view(results: List[SeedResult], stage: int, view: str) -> Optional[float]:
    return mean_over_seeds([accuracy_views(result.matrix)[stage][view] for result in results
                            if result.matrix.num_tasks > stage])


def _mean_metric(results: List[SeedResult], stage: int, metric: str) -> Optional[float]:
    return mean_over_seeds([result.metrics[metric][stage] for result in results
                            if len(result.metrics.get(metric, [])) > stage])


def _percent(value: Optional[float]) -> Any:
    return '' if value is None else round(100.0 * value, 2)


def comparison_tables(with_kp: RunReport, without_kp: RunReport, task_sizes: List[int]) -> Dict[str, List[Dict[str, Any]]]:
    """Seed-averaged accuracy and metric tables plus final per-task accuracies, in percent."""
    kp_results, plain_results = _completed(with_kp), _completed(without_kp)
    accuracy_rows, metric_rows, task_rows = [], [], []
    classes = 0
    for stage, size in enumerate(task_sizes):
        classes += size
        joint = mean_over_seeds([result.joint_references[stage] for result in kp_results + plain_results
                                 if len(result.joint_references) > stage])
        row = {'stage': stage, 'classes': classes, 'joint': _percent(joint)}
        metric_row = {'stage': stage}
        for prefix, results in (('kp', kp_results), ('nokp', plain_results)):
            for view in ('overall', 'previous', 'last'):
                row[f"{prefix}_{view}"] = _percent(_mean_view(results, stage, view))
            for metric in ('fm', 'bwt', 'im'):
                metric_row[f"{prefix}_{metric}"] = _percent(_mean_metric(results, stage, metric))
        accuracy_rows.append(row)
        metric_rows.append(metric_row)
    final = len(task_sizes) - 1
    for task in range(len(task_sizes)):
        task_rows.append({
            'task': task,
            'kp_accuracy': _percent(mean_over_seeds([r.matrix.get(final, task) for r in kp_results
                                                     if r.matrix.num_tasks > final])),
            'nokp_accuracy': _percent(mean_over_seeds([r.matrix.get(final, task) for r in plain_results
                                                       if r.matrix.num_tasks > final]))
        })
    return {'table_accuracy.csv': accuracy_rows, 'table_metrics.csv': metric_rows, 'task_accuracy.csv': task_rows}


TABLE_COLUMNS = {
    'table_accuracy.csv': ['stage', 'classes', 'kp_overall', 'kp_previous', 'kp_last',
                           'nokp_overall', 'nokp_previous', 'nokp_last', 'joint'],
    'table_metrics.csv': ['stage', 'kp_fm', 'kp_bwt', 'kp_im', 'nokp_fm', 'nokp_bwt', 'nokp_im'],
    'task_accuracy.csv': ['task', 'kp_accuracy', 'nokp_accuracy'],
}


def run_compare(coordinator: ExperimentCoordinator, context: RunContext, seeds: List[int],
                store: ReportStore) -> List[RunReport]:
    """KP on and off over the same seeds, sharing joint references."""
    reports = []
    for kp_enabled, suffix in ((True, '-kp'), (False, '-nokp')):
        variant = RunContext(context.config, context.split, kp_enabled, context.checkpoints.for_variant(suffix),
                             None, context.deduplicator, context.show_progress)
        report = coordinator.run(RunMode.TIL.value, variant, seeds)
        report.mode = RunMode.COMPARE.value
        coordinator.write_report(RunMode.TIL.value, variant, report, store, suffix)
        reports.append(report)
    tables = comparison_tables(reports[0], reports[1], context.config.tasks.sizes)
    for name, rows in tables.items():
        store.save_csv(name, TABLE_COLUMNS[name], rows)
    logger.info("Comparison tables written to %s", store.out_dir)
    return reports
