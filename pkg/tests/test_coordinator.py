"""Tests for run coordination, mode dispatch and comparison tables."""
from pathlib import Path
import sys

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import harness.coordinator as coordinator_module
from harness.coordinator import (ExperimentCoordinator, RunContext, TilRunner, _MODE_REGISTRY, comparison_tables,
                                 register_mode, thread_limit)
from harness.protocol import HarnessError
from models.config import ExperimentConfig
from models.result import AccuracyMatrix, RunReport, RunStatus, SeedResult


class FakeRunner:
    """Runner stub for coordinator tests."""

    def __init__(self, failing_seeds=(), harness_failure=False):
        self.failing_seeds = set(failing_seeds)
        self.harness_failure = harness_failure
        self.seeds = []

    def run_seed(self, context, seed):
        self.seeds.append(seed)
        if seed in self.failing_seeds:
            if self.harness_failure:
                raise HarnessError("task 1 failed", AccuracyMatrix([[0.5]]), 1)
            raise RuntimeError("run failed")
        return SeedResult(seed=seed, matrix=AccuracyMatrix([[0.5 + 0.1 * seed]]))

    def result_rows(self, context, result):
        return [{'stage': 0, 'task': 0, 'metric': 'accuracy', 'value': result.matrix.get(0, 0),
                 'seed': result.seed, 'kp_enabled': 1}]


class MissingMethodsRunner:
    """Runner stub missing required methods."""
    pass


def make_context(kp_enabled=True):
    return RunContext(config=ExperimentConfig(), split=None, kp_enabled=kp_enabled)


def make_report(matrices, kp_enabled, joint=None, metrics=None):
    seeds = [SeedResult(seed=index, matrix=AccuracyMatrix(rows), joint_references=list(joint or []),
                        metrics=dict(metrics or {}))
             for index, rows in enumerate(matrices)]
    return RunReport(mode='til', config={}, config_hash='abc', kp_enabled=kp_enabled, kp_profile='reported',
                     software_version='1.0.0', seeds=seeds)


def test_init_populates_runner_map_from_registry():
    coordinator = ExperimentCoordinator()
    assert set(coordinator.runner_map) == set(_MODE_REGISTRY)
    assert {'til', 'joint', 'common-head'} <= set(coordinator.runner_map)


def test_register_mode_raises_on_empty_mode():
    with pytest.raises(ValueError, match="non-empty string"):
        register_mode('', FakeRunner)


def test_register_mode_raises_on_duplicate_mode():
    with pytest.raises(ValueError, match="already registered"):
        register_mode('til', FakeRunner)


def test_register_mode_raises_on_missing_methods():
    with pytest.raises(TypeError, match="must define `run_seed`"):
        register_mode('unique_mode_run', MissingMethodsRunner)


def test_register_mode_raises_on_required_constructor_args():
    class NeedsArgs(FakeRunner):
        def __init__(self, budget):
            super().__init__()

    with pytest.raises(TypeError, match="without required constructor args"):
        register_mode('unique_mode_args', NeedsArgs)


def test_register_mode_adds_runner(monkeypatch):
    monkeypatch.setattr(coordinator_module, '_MODE_REGISTRY', {})
    register_mode('fake', FakeRunner)
    assert isinstance(ExperimentCoordinator().runner_map['fake'], FakeRunner)


def test_process_seed_dispatches_to_runner_by_mode():
    coordinator = ExperimentCoordinator()
    runner = FakeRunner()
    coordinator.runner_map = {'fake': runner}
    outcome = coordinator.process_seed('fake', make_context(), 2)
    assert outcome['success'] is True
    assert outcome['result'].matrix.get(0, 0) == pytest.approx(0.7)
    assert runner.seeds == [2]


def test_process_seed_returns_error_for_unknown_mode():
    coordinator = ExperimentCoordinator()
    coordinator.runner_map = {}
    outcome = coordinator.process_seed('missing', make_context(), 0)
    assert outcome['success'] is False
    assert outcome['error'] == "No runner available for mode: missing"


def test_process_seed_wraps_runner_exception():
    coordinator = ExperimentCoordinator()
    coordinator.runner_map = {'fake': FakeRunner(failing_seeds=[0])}
    outcome = coordinator.process_seed('fake', make_context(), 0)
    assert outcome['success'] is False
    assert outcome['error'] == "RuntimeError: run failed"


def test_harness_failure_keeps_partial_matrix():
    coordinator = ExperimentCoordinator()
    coordinator.runner_map = {'fake': FakeRunner(failing_seeds=[1], harness_failure=True)}
    report = coordinator.run('fake', make_context(), [0, 1])
    assert report.status == RunStatus.PARTIAL
    assert report.seeds[1].error == "task 1 failed"
    assert report.seeds[1].matrix.rows == [[0.5]]
    assert [row['seed'] for row in coordinator.result_rows('fake', make_context(), report)] == [0]


def test_run_reports_completed_and_failed_status():
    coordinator = ExperimentCoordinator()
    coordinator.runner_map = {'fake': FakeRunner(failing_seeds=[3, 4])}
    completed = coordinator.run('fake', make_context(), [0, 1])
    assert completed.status == RunStatus.COMPLETED
    assert completed.kp_profile == 'reported'
    assert coordinator.run('fake', make_context(), [3, 4]).status == RunStatus.FAILED


def test_thread_limit_reads_environment(monkeypatch):
    monkeypatch.delenv('HTIL_THREADS', raising=False)
    assert thread_limit() == 1
    monkeypatch.setenv('HTIL_THREADS', '3')
    assert thread_limit() == 3
    monkeypatch.setenv('HTIL_THREADS', '0')
    assert thread_limit() == 1
    monkeypatch.setenv('HTIL_THREADS', 'many')
    assert thread_limit() == 1


def test_threaded_seeds_keep_seed_order(monkeypatch):
    monkeypatch.setenv('HTIL_THREADS', '4')
    coordinator = ExperimentCoordinator()
    coordinator.runner_map = {'fake': FakeRunner()}
    outcomes = coordinator.process_seeds('fake', make_context(), [0, 1, 2, 3, 4])
    assert [outcome['seed'] for outcome in outcomes] == [0, 1, 2, 3, 4]


def test_joint_references_are_shared_across_kp_variants(monkeypatch):
    calls = []

    def fake_joint(config, split, seed, show_progress=False):
        calls.append(seed)
        return [0.9, 0.8]

    monkeypatch.setattr(coordinator_module, 'joint_references', fake_joint)
    with_kp = make_context(kp_enabled=True)
    without_kp = RunContext(with_kp.config, None, False, deduplicator=with_kp.deduplicator)
    assert with_kp.joint_references(0) == [0.9, 0.8]
    assert without_kp.joint_references(0) == [0.9, 0.8]
    without_kp.joint_references(1)
    assert calls == [0, 1]


def test_til_rows_cover_matrix_views_and_metrics():
    result = SeedResult(seed=0, matrix=AccuracyMatrix([[0.9], [0.8, 0.7]]),
                        metrics={'fm': [None, 0.1], 'bwt': [None, -0.1], 'im': [0.0, 0.1]},
                        val_accuracies=[0.95, None])
    rows = TilRunner().result_rows(make_context(), result)
    metrics = [row['metric'] for row in rows]
    assert metrics.count('accuracy') == 3
    assert metrics.count('overall') == 2
    assert metrics.count('previous') == 1
    assert metrics.count('fm') == 1
    assert metrics.count('im') == 2
    assert metrics.count('val_accuracy') == 1
    assert all(row['kp_enabled'] == 1 for row in rows)


def test_comparison_tables_average_seeds_in_percent():
    with_kp = make_report([[[0.8], [0.7, 0.6]], [[1.0], [0.9, 0.8]]], True, joint=[0.95, 0.85],
                          metrics={'fm': [None, 0.1], 'bwt': [None, -0.1], 'im': [0.0, 0.05]})
    without_kp = make_report([[[0.8], [0.4, 0.6]]], False, joint=[0.95, 0.85],
                             metrics={'fm': [None, 0.4], 'bwt': [None, -0.4], 'im': [0.0, 0.05]})
    tables = comparison_tables(with_kp, without_kp, [3, 2])
    accuracy = tables['table_accuracy.csv']
    assert accuracy[0]['classes'] == 3 and accuracy[1]['classes'] == 5
    assert accuracy[0]['kp_overall'] == 90.0
    assert accuracy[1]['kp_previous'] == 80.0
    assert accuracy[1]['nokp_last'] == 60.0
    assert accuracy[1]['joint'] == 85.0
    metrics = tables['table_metrics.csv']
    assert metrics[0]['kp_fm'] == ''
    assert metrics[1]['kp_fm'] == 10.0
    assert metrics[1]['nokp_bwt'] == -40.0
    assert tables['task_accuracy.csv'][0] == {'task': 0, 'kp_accuracy': 80.0, 'nokp_accuracy': 40.0}


def test_joint_failure_keeps_incremental_matrix(monkeypatch):
    def fake_run_til(config, split, seed, kp_enabled, *args):
        return SeedResult(seed=seed, matrix=AccuracyMatrix([[0.9], [0.7, 0.8]]))

    def failing_joint(config, split, seed, show_progress=False):
        raise HarnessError("joint stage 1 failed")

    monkeypatch.setattr(coordinator_module, 'run_til', fake_run_til)
    monkeypatch.setattr(coordinator_module, 'joint_references', failing_joint)
    coordinator = ExperimentCoordinator()
    report = coordinator.run('til', make_context(), [0])
    result = report.seeds[0]
    assert report.status == RunStatus.PARTIAL
    assert result.error is None
    assert result.matrix.rows == [[0.9], [0.7, 0.8]]
    assert 'joint stage 1 failed' in result.joint_error
    assert result.metrics['im'] == [None, None]
    assert result.metrics['fm'][1] == pytest.approx(0.2)
    rows = coordinator.result_rows('til', make_context(), report)
    assert {row['metric'] for row in rows} >= {'accuracy', 'fm', 'bwt'}
    assert 'im' not in {row['metric'] for row in rows}


def test_training_hash_ignores_run_seed_but_tracks_data_seed():
    base = make_context()
    other_run_seed = make_context()
    other_run_seed.config.run.seed = 3
    other_data_seed = make_context()
    other_data_seed.config.dataset.seed = 3
    assert base.training_hash == other_run_seed.training_hash
    assert base.training_hash != other_data_seed.training_hash


def test_report_records_metric_conventions():
    data = make_report([[[0.5]]], kp_enabled=True).to_dict()
    assert 'clipped at 0' in data['fm_convention']
    assert data['index_convention'].startswith('a[l][j]')
