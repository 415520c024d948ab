"""Tests for kernel plasticity tracking, protection and modulation."""
from pathlib import Path
import sys

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from learners.plasticity import (KernelLedger, LedgerError, PlasticityLedger, rank_kernels,
                                 top_kernel_count)
from learners.softhebb import RawUpdate
from numerics.tensor_ops import DimensionError


def cells(*values):
    """One single-cell kernel per value, shaped like conv weights."""
    return np.array(values, dtype=float).reshape(-1, 1, 1, 1)


def acts(*values):
    """Post-activations whose per-kernel mean equals the given values."""
    return np.array(values, dtype=float).reshape(1, -1, 1, 1)


def committed_ledger(avg_change, protected, alpha=0.15, beta=0.9, **kwargs):
    """Ledger in the state left behind by one finalized task."""
    kwargs.setdefault('threshold_mode', 'interval')
    ledger = KernelLedger(len(avg_change), alpha=alpha, beta=beta, **kwargs)
    ledger.avg_change = np.array(avg_change, dtype=float)
    ledger.tasks_merged = 1
    ledger.protected = set(protected)
    return ledger


def test_unchanged_weights_record_zero_change():
    ledger = KernelLedger(2)
    ledger.begin_task(cells(1.0, 2.0))
    ledger.track_interval(cells(1.0, 2.0), acts(0.5, 0.5))
    ledger.finalize_task()
    assert np.array_equal(ledger.avg_change, [0.0, 0.0])


def test_single_cell_change_is_absolute_difference():
    ledger = KernelLedger(1)
    ledger.begin_task(cells(1.0))
    ledger.track_interval(cells(3.0), acts(1.0))
    assert ledger.change_sum[0] == pytest.approx(2.0)
    assert ledger.intervals_seen == 1


def test_average_change_over_intervals():
    ledger = KernelLedger(1)
    ledger.begin_task(cells(1.0))
    ledger.track_interval(cells(3.0), acts(1.0))
    ledger.track_interval(cells(2.0), acts(1.0))
    ledger.finalize_task()
    assert ledger.avg_change[0] == pytest.approx(1.5)


def test_change_sums_all_cells_of_a_kernel():
    ledger = KernelLedger(1)
    ledger.begin_task(np.zeros((1, 2, 2, 2)))
    ledger.track_interval(np.full((1, 2, 2, 2), -0.5), np.ones((2, 1, 3, 3)))
    assert ledger.change_sum[0] == pytest.approx(4.0)


def test_average_change_merges_tasks_as_running_mean():
    ledger = KernelLedger(1, top_fraction=0.0)
    for change in (2.0, 4.0, 9.0):
        ledger.begin_task(cells(0.0))
        ledger.track_interval(cells(change), acts(1.0))
        ledger.finalize_task()
    assert ledger.avg_change[0] == pytest.approx(5.0)
    assert ledger.tasks_merged == 3


def test_finalize_protects_most_active_kernels():
    ledger = KernelLedger(3, top_fraction=0.6)
    ledger.begin_task(cells(0.0, 0.0, 0.0))
    ledger.track_interval(cells(0.0, 0.0, 0.0), acts(3.0, 1.0, 2.0))
    added = ledger.finalize_task()
    assert added == [0, 2]
    assert ledger.protected == {0, 2}


def test_full_fraction_protects_every_kernel():
    ledger = KernelLedger(4, top_fraction=1.0)
    ledger.begin_task(np.zeros((4, 1, 1, 1)))
    ledger.track_interval(np.zeros((4, 1, 1, 1)), acts(0.1, 0.2, 0.3, 0.4))
    ledger.finalize_task()
    assert ledger.protected == {0, 1, 2, 3}


def test_default_fraction_protects_six_of_ten():
    assert top_kernel_count(0.6, 10) == 6
    ledger = KernelLedger(10)
    ledger.begin_task(np.zeros((10, 1, 1, 1)))
    ledger.track_interval(np.zeros((10, 1, 1, 1)), acts(*range(10)))
    assert len(ledger.finalize_task()) == 6
    assert ledger.protected == {4, 5, 6, 7, 8, 9}


def test_ranking_matches_sort_oracle_with_low_index_tie_break():
    rng = np.random.default_rng(0)
    for _ in range(200):
        values = rng.integers(0, 4, size=int(rng.integers(1, 12))).astype(float)
        oracle = [j for _, j in sorted((-v, j) for j, v in enumerate(values))]
        assert rank_kernels(values) == oracle


def test_protected_set_only_grows():
    ledger = KernelLedger(4, top_fraction=0.5)
    previous = set()
    for activations in ((4, 3, 2, 1), (1, 2, 3, 4), (2, 4, 1, 3)):
        ledger.begin_task(np.zeros((4, 1, 1, 1)))
        ledger.track_interval(np.zeros((4, 1, 1, 1)), acts(*activations))
        ledger.finalize_task()
        assert previous <= ledger.protected
        assert len(ledger.protected) <= 4
        previous = set(ledger.protected)


def test_finalize_without_tracking_raises():
    ledger = KernelLedger(2)
    ledger.begin_task(cells(0.0, 0.0))
    with pytest.raises(LedgerError):
        ledger.finalize_task()


def test_tracking_before_begin_raises():
    with pytest.raises(LedgerError):
        KernelLedger(1).track_interval(cells(0.0), acts(1.0))


def test_tracking_rejects_shape_drift():
    ledger = KernelLedger(2)
    ledger.begin_task(cells(0.0, 0.0))
    with pytest.raises(DimensionError):
        ledger.track_interval(np.zeros((2, 1, 2, 1)), acts(1.0, 1.0))


def test_condition_false_with_empty_protected_set():
    ledger = committed_ledger([1.0, 1.0], protected=[])
    assert ledger.modulation_condition(RawUpdate(cells(5.0, 5.0))) is False


def test_condition_true_when_protected_kernel_exceeds_threshold():
    ledger = committed_ledger([1.0, 1.0], protected=[0])
    assert ledger.modulation_condition(RawUpdate(cells(2.0, 0.0))) is True


def test_condition_ignores_unprotected_kernels():
    ledger = committed_ledger([1.0, 1.0], protected=[0])
    assert ledger.modulation_condition(RawUpdate(cells(0.5, 100.0))) is False


def test_modulate_before_any_task_is_identity():
    ledger = KernelLedger(2)
    raw = RawUpdate(cells(3.0, -4.0))
    assert ledger.modulate(raw) is raw
    assert np.array_equal(ledger.scale_factors(raw), [1.0, 1.0])


def test_modulate_without_condition_leaves_unprotected_unchanged():
    ledger = committed_ledger([1.0, 1.0], protected=[0])
    raw = RawUpdate(cells(0.5, 7.0))
    assert np.array_equal(ledger.scale_factors(raw), [1.0, 1.0])
    assert np.array_equal(ledger.modulate(raw).delta, raw.delta)


def test_modulate_scales_protected_by_beta_and_others_by_alpha():
    ledger = committed_ledger([1.0, 1.0], protected=[0], alpha=0.15, beta=0.9)
    modulated = ledger.modulate(RawUpdate(cells(2.0, 1.0)))
    assert np.array_equal(ledger.scale_factors(RawUpdate(cells(2.0, 1.0))), [0.9, 0.15])
    assert RawUpdate(modulated.delta).kernel_norms()[0] == pytest.approx(1.8)
    assert modulated.delta[1].item() == pytest.approx(0.15)


def test_protected_kernel_below_threshold_stays_unchanged_when_condition_holds():
    ledger = committed_ledger([1.0, 1.0, 1.0], protected=[0, 1])
    factors = ledger.scale_factors(RawUpdate(cells(2.0, 0.5, 3.0)))
    assert np.array_equal(factors, [0.9, 1.0, 0.15])


def test_plasticity_boost_factor_amplifies_unprotected_kernels():
    ledger = committed_ledger([1.0, 1.0], protected=[0], alpha=1.5, beta=0.9)
    modulated = ledger.modulate(RawUpdate(cells(2.0, 1.0)))
    assert modulated.delta[1].item() == pytest.approx(1.5)


def test_modulation_is_per_kernel_homogeneous():
    rng = np.random.default_rng(1)
    ledger = committed_ledger(rng.uniform(0.5, 2.0, size=6), protected=[0, 2, 3])
    for _ in range(50):
        raw = RawUpdate(rng.standard_normal((6, 2, 3, 3)) * rng.uniform(0.0, 0.3))
        modulated = ledger.modulate(raw)
        factors = ledger.scale_factors(raw)
        assert set(np.unique(factors)) <= {0.15, 0.9, 1.0}
        assert np.allclose(modulated.delta, raw.delta * factors[:, None, None, None])
        assert np.all(modulated.kernel_norms() <= raw.kernel_norms() + 1e-12)


def test_l2_norm_switch():
    ledger = committed_ledger([4.0, 1.0], protected=[0], norm='l2')
    # L2 sizes: [3, 4] -> 5, [2, 2] -> 2.83
    assert ledger.modulation_condition(RawUpdate(np.array([[3.0, 4.0], [0.0, 0.0]]).reshape(2, 1, 1, 2)))
    assert not ledger.modulation_condition(RawUpdate(np.array([[2.0, 2.0], [0.0, 0.0]]).reshape(2, 1, 1, 2)))


def test_batch_threshold_mode_divides_by_interval():
    ledger = committed_ledger([5.0], protected=[0], interval=5, threshold_mode='batch')
    assert np.array_equal(ledger.thresholds(), [1.0])
    assert ledger.modulation_condition(RawUpdate(cells(1.5)))


def test_plasticity_ledger_spans_layers():
    ledger = PlasticityLedger.for_kernel_counts([2, 3], top_fraction=0.5)
    assert not ledger.ready
    ledger.begin_task([np.zeros((2, 1, 1, 1)), np.zeros((3, 1, 1, 1))])
    ledger.track_interval([np.ones((2, 1, 1, 1)), np.ones((3, 1, 1, 1))], [acts(1, 2), acts(3, 2, 1)])
    added = ledger.finalize_task()
    assert ledger.ready
    assert added == [[1], [0, 1]]
    assert ledger.protected_sets() == [{1}, {0, 1}]


def test_plasticity_ledger_rejects_layer_count_mismatch():
    ledger = PlasticityLedger.for_kernel_counts([2, 3])
    with pytest.raises(ValueError):
        ledger.begin_task([np.zeros((2, 1, 1, 1))])


def test_default_thresholds_compare_one_batch_against_per_batch_change():
    ledger = KernelLedger(1, interval=5)
    ledger.avg_change = np.array([5.0])
    ledger.tasks_merged = 1
    ledger.protected = {0}
    assert np.array_equal(ledger.thresholds(), [1.0])
    assert ledger.modulation_condition(RawUpdate(cells(2.0)))
    assert not committed_ledger([5.0], protected=[0], interval=5).modulation_condition(RawUpdate(cells(2.0)))
