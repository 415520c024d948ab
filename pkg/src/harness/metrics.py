"""Continual-learning metrics over an accuracy matrix.

Tasks are numbered from 1 in the metric arguments, so `k` names the k-th
learned task while `matrix.rows[k - 1]` holds its row. All values are
fractions in [0, 1].
"""
from typing import Dict, List, Optional, Sequence

from models.result import AccuracyMatrix


class MetricError(ValueError):
    """Raised when a metric is undefined for the requested stage."""


def _check_stage(matrix: AccuracyMatrix, k: int, minimum: int = 2):
    if not minimum <= k <= matrix.num_tasks:
        raise MetricError(f"k={k} outside {minimum}..{matrix.num_tasks}")


def forgetting_measure(matrix: AccuracyMatrix, k: int) -> float:
    """Mean over earlier tasks of best past accuracy minus current accuracy.

    Each term is clipped at zero, so the measure is never negative.
    """
    _check_stage(matrix, k)
    current = k - 1
    total = 0.0
    for task in range(current):
        peak = max(matrix.get(stage, task) for stage in range(task, current))
        total += max(0.0, peak - matrix.get(current, task))
    return total / (k - 1)


def backward_transfer(matrix: AccuracyMatrix, k: int) -> float:
    """Mean change on earlier tasks since each was learned; negative is forgetting."""
    _check_stage(matrix, k)
    current = k - 1
    total = 0.0
    for task in range(current):
        total += matrix.get(current, task) - matrix.get(task, task)
    return total / (k - 1)


def intransigence(matrix: AccuracyMatrix, k: int, joint_reference: Optional[float]) -> float:
    """Joint-model accuracy minus the incremental model's accuracy on task k."""
    _check_stage(matrix, k, minimum=1)
    if joint_reference is None:
        raise MetricError(f"no joint reference accuracy for k={k}")
    return joint_reference - matrix.get(k - 1, k - 1)


def stage_metrics(matrix: AccuracyMatrix,
                  joint_references: Optional[Sequence[float]] = None) -> Dict[str, List[Optional[float]]]:
    """FM, BWT and IM for every stage; undefined entries are None."""
    metrics: Dict[str, List[Optional[float]]] = {'fm': [], 'bwt': [], 'im': []}
    joint_references = list(joint_references or [])
    for k in range(1, matrix.num_tasks + 1):
        metrics['fm'].append(forgetting_measure(matrix, k) if k >= 2 else None)
        metrics['bwt'].append(backward_transfer(matrix, k) if k >= 2 else None)
        reference = joint_references[k - 1] if k <= len(joint_references) else None
        metrics['im'].append(intransigence(matrix, k, reference) if reference is not None else None)
    return metrics


def accuracy_views(matrix: AccuracyMatrix) -> List[Dict[str, Optional[float]]]:
    """Per-stage overall, previous-task and last-task accuracies."""
    return [{'stage': stage,
             'overall': matrix.overall(stage),
             'previous': matrix.previous(stage),
             'last': matrix.last(stage)} for stage in range(matrix.num_tasks)]


def mean_over_seeds(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [value for value in values if value is not None]
    if not present:
        return None
    return sum(present) / len(present)
