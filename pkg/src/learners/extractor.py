"""Five-stage Hebbian convolutional feature extractor."""
import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional

import numpy as np

from learners.softhebb import HebbianConvLayer, RawUpdate
from numerics.tensor_ops import (BatchNormState, ConvSpec, NormMode, Tensor, avg_pool, batch_norm,
                                 max_pool, triangle_activation)

logger = logging.getLogger(__name__)

UpdateHook = Callable[[int, RawUpdate], RawUpdate]


class PoolKind(str, Enum):
    """Pooling applied after a stage's activation."""
    MAX = "max"
    AVG = "avg"


@dataclass
class ExtractorStage:
    """batch_norm -> Hebbian conv -> Triangle -> pool."""
    norm: BatchNormState
    layer: HebbianConvLayer
    pool: PoolKind
    pool_size: int

    def pooled(self, activation: Tensor) -> Tensor:
        # small inputs shrink the window instead of failing
        window = min(self.pool_size, activation.shape[2], activation.shape[3])
        if self.pool == PoolKind.AVG:
            return avg_pool(activation, window, window)
        return max_pool(activation, window, window)

    def forward(self, inputs: Tensor, mode: NormMode) -> Tensor:
        normalized = batch_norm(inputs, self.norm, mode)
        pre_act, _ = self.layer.hebbian_forward(normalized)
        return self.pooled(triangle_activation(pre_act))


class HebbianExtractor:
    """Stack of Hebbian stages trained one unsupervised pass at a time."""

    def __init__(self, stages: List[ExtractorStage]):
        if not stages:
            raise ValueError("extractor needs at least one stage")
        self.stages = stages

    @classmethod
    def build(cls, in_channels: int, channels: List[int], kernel_sizes: List[int], strides: List[int],
              pool_size: int, rng: np.random.Generator, **layer_kwargs) -> 'HebbianExtractor':
        """Seeded extractor; the last stage average-pools, the others max-pool."""
        if not len(channels) == len(kernel_sizes) == len(strides):
            raise ValueError("channels, kernel_sizes and strides must have equal length")
        stages = []
        previous = in_channels
        for index, (width, kernel, stride) in enumerate(zip(channels, kernel_sizes, strides)):
            spec = ConvSpec.same(previous, width, kernel, stride)
            stages.append(ExtractorStage(
                norm=BatchNormState.identity(previous),
                layer=HebbianConvLayer.initialize(spec, rng, **layer_kwargs),
                pool=PoolKind.AVG if index == len(channels) - 1 else PoolKind.MAX,
                pool_size=pool_size
            ))
            previous = width
        return cls(stages)

    @property
    def layers(self) -> List[HebbianConvLayer]:
        return [stage.layer for stage in self.stages]

    def kernel_counts(self) -> List[int]:
        return [layer.num_kernels for layer in self.layers]

    def layer_weights(self) -> List[np.ndarray]:
        return [layer.weights.copy() for layer in self.layers]

    def train_batch(self, inputs: Tensor, update_hook: Optional[UpdateHook] = None) -> List[Tensor]:
        """One Hebbian step on every stage; returns each stage's post-activations."""
        post_acts = []
        x = inputs
        for index, stage in enumerate(self.stages):
            normalized = batch_norm(x, stage.norm, NormMode.TRAIN)
            pre_act, post_act = stage.layer.hebbian_forward(normalized)
            update = stage.layer.compute_raw_update(normalized, pre_act, post_act)
            if update_hook is not None:
                update = update_hook(index, update)
            stage.layer.apply_update(update)
            post_acts.append(post_act)
            x = stage.pooled(triangle_activation(pre_act))
        return post_acts

    def forward(self, inputs: Tensor) -> Tensor:
        x = inputs
        for stage in self.stages:
            x = stage.forward(x, NormMode.EVAL)
        return x

    def features(self, inputs: Tensor, batch_size: int = 64) -> np.ndarray:
        """Flattened final-stage output for a (N, C, H, W) array, eval mode."""
        chunks = [self.forward(inputs[start:start + batch_size]).reshape(
            min(batch_size, len(inputs) - start), -1) for start in range(0, len(inputs), batch_size)]
        return np.concatenate(chunks, axis=0)

    def checksum(self) -> str:
        """Digest of every weight and batch-norm statistic."""
        digest = hashlib.sha256()
        for stage in self.stages:
            for array in (stage.layer.weights, stage.norm.running_mean, stage.norm.running_var,
                          stage.norm.gamma, stage.norm.beta):
                digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()
