"""Soft winner-take-all Hebbian convolution layer.

Each kernel j receives, per contributing input window x with pre-activation u
and softmax post-activation y,

    dw_j = eta_j * y_j * (x - u_j * w_j)

averaged over batch and spatial sites. The -u*w term is the anti-Hebbian
decay that keeps kernel norms bounded near the radius R.
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from numerics.tensor_ops import ConvSpec, DimensionError, Tensor, conv2d_forward, extract_patches, softmax

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 1.0
DEFAULT_RADIUS = 1.0
DEFAULT_BASE_LR = 0.05
DEFAULT_LR_MIN = 1e-4
DEFAULT_CLAMP_SLACK = 0.1


class NonFiniteUpdateError(ValueError):
    """Raised when a weight update contains NaN or Inf."""


@dataclass
class RawUpdate:
    """Proposed weight change for one batch, before neuromodulation."""
    delta: np.ndarray

    @property
    def num_kernels(self) -> int:
        return int(self.delta.shape[0])

    def kernel_norms(self, norm: str = 'l1') -> np.ndarray:
        """Per-kernel size of the update: sum of absolute cells, or L2."""
        flat = self.delta.reshape(self.num_kernels, -1)
        if norm == 'l2':
            return np.linalg.norm(flat, axis=1)
        return np.abs(flat).sum(axis=1)

    def scaled(self, factors: np.ndarray) -> 'RawUpdate':
        """Copy with each kernel's delta multiplied by its factor."""
        factors = np.asarray(factors, dtype=np.float64)
        return RawUpdate(self.delta * factors.reshape((-1,) + (1,) * (self.delta.ndim - 1)))


class HebbianConvLayer:
    """Convolution layer trained with the soft-WTA Hebbian rule."""

    def __init__(self, spec: ConvSpec, weights: np.ndarray,
                 base_lr: float = DEFAULT_BASE_LR,
                 radius: float = DEFAULT_RADIUS,
                 temperature: float = DEFAULT_TEMPERATURE,
                 lr_min: float = DEFAULT_LR_MIN,
                 clamp_slack: float = DEFAULT_CLAMP_SLACK):
        if tuple(weights.shape) != spec.weight_shape:
            raise DimensionError('HebbianConvLayer', spec.weight_shape, tuple(weights.shape))
        if base_lr <= 0 or radius <= 0 or temperature <= 0:
            raise ValueError("base_lr, radius and temperature must be positive")
        if not 0 <= lr_min <= base_lr:
            raise ValueError(f"lr_min must lie in [0, base_lr], got {lr_min}")
        self.spec = spec
        self.weights = np.array(weights, dtype=np.float64)
        self.base_lr = float(base_lr)
        self.radius = float(radius)
        self.temperature = float(temperature)
        self.lr_min = float(lr_min)
        self.clamp_slack = float(clamp_slack)
        self.rates = self.adaptive_rate()

    @classmethod
    def initialize(cls, spec: ConvSpec, rng: np.random.Generator, radius: float = DEFAULT_RADIUS,
                   **kwargs) -> 'HebbianConvLayer':
        """Seeded Gaussian kernels rescaled to norm R/2."""
        weights = rng.standard_normal(spec.weight_shape)
        flat = weights.reshape(spec.out_channels, -1)
        flat *= (radius / 2.0) / np.linalg.norm(flat, axis=1, keepdims=True)
        return cls(spec, flat.reshape(spec.weight_shape), radius=radius, **kwargs)

    @property
    def num_kernels(self) -> int:
        return self.spec.out_channels

    def kernel_norms(self) -> np.ndarray:
        return np.linalg.norm(self.weights.reshape(self.num_kernels, -1), axis=1)

    def adaptive_rate(self) -> np.ndarray:
        """Per-kernel learning rate shrinking as the kernel norm reaches R."""
        distance = np.abs(self.radius - self.kernel_norms()) / self.radius
        return np.clip(self.base_lr * distance, self.lr_min, self.base_lr)

    def hebbian_forward(self, inputs: Tensor) -> Tuple[Tensor, Tensor]:
        """Pre-activations and channel-softmax post-activations."""
        pre_act = conv2d_forward(inputs, self.weights, self.spec)
        post_act = softmax(pre_act, self.temperature, axis=1)
        return pre_act, post_act

    def compute_raw_update(self, inputs: Tensor, pre_act: Tensor, post_act: Tensor) -> RawUpdate:
        """Hebbian update for one batch, averaged over batch and sites."""
        if pre_act.shape != post_act.shape:
            raise DimensionError('compute_raw_update', tuple(pre_act.shape), tuple(post_act.shape))
        patches = extract_patches(inputs, self.spec)
        sites = patches.shape[0] * patches.shape[1] * patches.shape[2]
        if pre_act.shape[0] * pre_act.shape[2] * pre_act.shape[3] != sites:
            raise DimensionError('compute_raw_update', f"{sites} output sites", tuple(pre_act.shape))
        x = patches.reshape(sites, -1)
        y = post_act.transpose(0, 2, 3, 1).reshape(sites, self.num_kernels)
        u = pre_act.transpose(0, 2, 3, 1).reshape(sites, self.num_kernels)
        flat_w = self.weights.reshape(self.num_kernels, -1)
        hebbian = y.T @ x / sites
        decay = (y * u).sum(axis=0) / sites
        self.rates = self.adaptive_rate()
        delta = self.rates[:, None] * (hebbian - decay[:, None] * flat_w)
        return RawUpdate(delta.reshape(self.spec.weight_shape))

    def apply_update(self, update: RawUpdate):
        """Add the update, then pull any kernel past R*(1+slack) back to norm R."""
        if update.delta.shape != self.weights.shape:
            raise DimensionError('apply_update', tuple(self.weights.shape), tuple(update.delta.shape))
        if not np.all(np.isfinite(update.delta)):
            raise NonFiniteUpdateError("weight update contains non-finite values")
        self.weights += update.delta
        flat = self.weights.reshape(self.num_kernels, -1)
        norms = np.linalg.norm(flat, axis=1)
        over = norms > self.radius * (1.0 + self.clamp_slack)
        if np.any(over):
            flat[over] *= (self.radius / norms[over])[:, None]
            logger.debug("Clamped %d kernel(s) back to radius %.3f", int(over.sum()), self.radius)

    def hyperparameters(self) -> Dict[str, Any]:
        return {
            'spec': self.spec.to_dict(),
            'base_lr': self.base_lr,
            'radius': self.radius,
            'temperature': self.temperature,
            'lr_min': self.lr_min,
            'clamp_slack': self.clamp_slack
        }

    @classmethod
    def from_state(cls, hyperparameters: Dict[str, Any], weights: np.ndarray,
                   rates: Optional[np.ndarray] = None) -> 'HebbianConvLayer':
        """Rebuild a layer from checkpointed hyperparameters and weights."""
        params = dict(hyperparameters)
        spec = ConvSpec.from_dict(params.pop('spec'))
        layer = cls(spec, weights, **params)
        if rates is not None:
            layer.rates = np.array(rates, dtype=np.float64)
        return layer
