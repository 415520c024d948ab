"""Kernel plasticity: per-kernel tracking, protection and update modulation.

During a task every kernel's absolute weight change is summed over tracking
intervals and its mean activation is accumulated. At the end of the task the
average change becomes the kernel's threshold and the most active kernels are
added to the protected set. On later tasks incoming updates are rescaled:

    alpha * dw_j   if some protected kernel exceeds its threshold and j is unprotected
    beta  * dw_j   if j is protected and exceeds its own threshold
    dw_j           otherwise
"""
import logging
import math
from enum import Enum
from typing import Any, Dict, List, Optional, Set

import numpy as np

from learners.softhebb import RawUpdate
from numerics.tensor_ops import DimensionError

logger = logging.getLogger(__name__)

DEFAULT_TOP_FRACTION = 0.6
DEFAULT_INTERVAL = 5


class LedgerError(RuntimeError):
    """Raised when the ledger is used out of protocol order."""


class UpdateNorm(str, Enum):
    """Metric used to size a kernel update."""
    L1 = "l1"
    L2 = "l2"


class ThresholdMode(str, Enum):
    """How stored interval averages compare with per-batch updates."""
    INTERVAL = "interval"
    BATCH = "batch"


def top_kernel_count(top_fraction: float, num_kernels: int) -> int:
    """ceil(k * K), tolerant to float noise in the product."""
    return min(num_kernels, math.ceil(round(top_fraction * num_kernels, 9)))


def rank_kernels(activations: np.ndarray) -> List[int]:
    """Kernel indices by activation, highest first; lower index wins ties."""
    return sorted(range(len(activations)), key=lambda j: (-activations[j], j))


class KernelLedger:
    """Plasticity bookkeeping for the kernels of one layer."""

    def __init__(self, num_kernels: int, top_fraction: float = DEFAULT_TOP_FRACTION,
                 alpha: float = 0.15, beta: float = 0.9, interval: int = DEFAULT_INTERVAL,
                 norm: UpdateNorm = UpdateNorm.L1,
                 threshold_mode: ThresholdMode = ThresholdMode.BATCH):
        if num_kernels < 1:
            raise ValueError("num_kernels must be positive")
        if not 0.0 <= top_fraction <= 1.0:
            raise ValueError(f"top_fraction must lie in [0, 1], got {top_fraction}")
        if interval < 1:
            raise ValueError(f"interval must be positive, got {interval}")
        self.num_kernels = num_kernels
        self.top_fraction = float(top_fraction)
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.interval = int(interval)
        self.norm = UpdateNorm(norm)
        self.threshold_mode = ThresholdMode(threshold_mode)

        self.avg_change = np.zeros(num_kernels)
        self.tasks_merged = 0
        self.protected: Set[int] = set()

        self.change_sum = np.zeros(num_kernels)
        self.cum_activation = np.zeros(num_kernels)
        self.intervals_seen = 0
        self.snapshot: Optional[np.ndarray] = None

    @property
    def ready(self) -> bool:
        """True once at least one task has been finalized."""
        return self.tasks_merged > 0

    def begin_task(self, weights: np.ndarray):
        """Reset the per-task accumulators and snapshot the starting weights."""
        if weights.shape[0] != self.num_kernels:
            raise DimensionError('begin_task', f"{self.num_kernels} kernels", weights.shape[0])
        self.change_sum = np.zeros(self.num_kernels)
        self.cum_activation = np.zeros(self.num_kernels)
        self.intervals_seen = 0
        self.snapshot = np.array(weights, dtype=np.float64)

    def track_interval(self, current_weights: np.ndarray, batch_activations: np.ndarray):
        """Record one completed interval of weight change and activation."""
        if self.snapshot is None:
            raise LedgerError("track_interval called before begin_task")
        if current_weights.shape != self.snapshot.shape:
            raise DimensionError('track_interval', tuple(self.snapshot.shape),
                                 tuple(current_weights.shape), 'weights drifted from snapshot')
        if batch_activations.ndim != 4 or batch_activations.shape[1] != self.num_kernels:
            raise DimensionError('track_interval', f"(B, {self.num_kernels}, H, W) activations",
                                 tuple(batch_activations.shape))
        change = np.abs(current_weights - self.snapshot).reshape(self.num_kernels, -1).sum(axis=1)
        self.change_sum += change
        self.cum_activation += batch_activations.mean(axis=(0, 2, 3))
        self.snapshot = np.array(current_weights, dtype=np.float64)
        self.intervals_seen += 1

    def finalize_task(self) -> List[int]:
        """Commit the task's average change and protect its most active kernels.

        Returns the kernels newly added to the protected set.
        """
        if self.intervals_seen == 0:
            raise LedgerError("finalize_task called with no tracked intervals")
        task_average = self.change_sum / self.intervals_seen
        # running mean across tasks, equal weight per task
        self.avg_change = (self.avg_change * self.tasks_merged + task_average) / (self.tasks_merged + 1)
        self.tasks_merged += 1
        top = rank_kernels(self.cum_activation)[:top_kernel_count(self.top_fraction, self.num_kernels)]
        added = sorted(set(top) - self.protected)
        self.protected.update(top)
        self.change_sum = np.zeros(self.num_kernels)
        self.cum_activation = np.zeros(self.num_kernels)
        self.intervals_seen = 0
        return added

    def thresholds(self) -> np.ndarray:
        """Per-kernel thresholds on the scale of one incoming batch update in batch mode."""
        if self.threshold_mode == ThresholdMode.BATCH:
            return self.avg_change / self.interval
        return self.avg_change

    def modulation_condition(self, raw: RawUpdate) -> bool:
        """True iff some protected kernel's update exceeds its threshold."""
        if not self.ready or not self.protected:
            return False
        norms = raw.kernel_norms(self.norm.value)
        thresholds = self.thresholds()
        return any(norms[k] > thresholds[k] for k in self.protected)

    def scale_factors(self, raw: RawUpdate) -> np.ndarray:
        """Per-kernel factor in {alpha, beta, 1} applied by modulate."""
        if raw.num_kernels != self.num_kernels:
            raise DimensionError('modulate', f"{self.num_kernels} kernels", raw.num_kernels)
        factors = np.ones(self.num_kernels)
        if not self.ready:
            return factors
        condition = self.modulation_condition(raw)
        norms = raw.kernel_norms(self.norm.value)
        thresholds = self.thresholds()
        for j in range(self.num_kernels):
            if j not in self.protected:
                if condition:
                    factors[j] = self.alpha
            elif norms[j] > thresholds[j]:
                factors[j] = self.beta
        return factors

    def modulate(self, raw: RawUpdate) -> RawUpdate:
        """Neuromodulated copy of an incoming update."""
        if not self.ready:
            return raw
        return raw.scaled(self.scale_factors(raw))

    def settings(self) -> Dict[str, Any]:
        return {
            'num_kernels': self.num_kernels,
            'top_fraction': self.top_fraction,
            'alpha': self.alpha,
            'beta': self.beta,
            'interval': self.interval,
            'norm': self.norm.value,
            'threshold_mode': self.threshold_mode.value
        }


class PlasticityLedger:
    """One kernel ledger per Hebbian layer."""

    def __init__(self, layers: List[KernelLedger]):
        self.layers = layers

    @classmethod
    def for_kernel_counts(cls, kernel_counts: List[int], **settings) -> 'PlasticityLedger':
        return cls([KernelLedger(count, **settings) for count in kernel_counts])

    @property
    def ready(self) -> bool:
        return all(layer.ready for layer in self.layers)

    def begin_task(self, layer_weights: List[np.ndarray]):
        for ledger, weights in zip(self.layers, layer_weights, strict=True):
            ledger.begin_task(weights)

    def track_interval(self, layer_weights: List[np.ndarray], layer_activations: List[np.ndarray]):
        for ledger, weights, acts in zip(self.layers, layer_weights, layer_activations, strict=True):
            ledger.track_interval(weights, acts)

    def finalize_task(self) -> List[List[int]]:
        added = [ledger.finalize_task() for ledger in self.layers]
        for index, (ledger, new) in enumerate(zip(self.layers, added)):
            logger.info("Layer %d: protected %d/%d kernels (+%d)",
                        index, len(ledger.protected), ledger.num_kernels, len(new))
        return added

    def protected_sets(self) -> List[Set[int]]:
        return [set(ledger.protected) for ledger in self.layers]
