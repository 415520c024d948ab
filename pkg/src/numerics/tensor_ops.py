"""Dense tensor primitives shared by the Hebbian extractor.

Tensors are float64 numpy arrays laid out as (batch, channels, height, width).
"""
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import softmax as _scipy_softmax

Tensor = np.ndarray

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


class DimensionError(ValueError):
    """Raised when tensor shapes do not fit an operation."""

    def __init__(self, op: str, expected: Any, actual: Any, detail: str = ''):
        self.op = op
        self.expected = expected
        self.actual = actual
        message = f"{op}: expected {expected}, got {actual}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class NormMode(str, Enum):
    """Batch normalization mode."""
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-D convolution."""
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ('in_channels', 'out_channels', 'kernel_h', 'kernel_w', 'stride'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"padding must be nonnegative, got {self.padding}")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel: int, stride: int = 1) -> 'ConvSpec':
        """Spec whose padding keeps the spatial size at stride 1."""
        return cls(in_channels, out_channels, kernel, kernel, stride, (kernel - 1) // 2)

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        """Spatial output size for an input of the given size."""
        out_h = (height + 2 * self.padding - self.kernel_h) // self.stride + 1
        out_w = (width + 2 * self.padding - self.kernel_w) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise DimensionError('conv2d', f"input at least {self.kernel_h - 2 * self.padding}x"
                                 f"{self.kernel_w - 2 * self.padding}", f"{height}x{width}")
        return out_h, out_w

    def to_dict(self) -> Dict[str, int]:
        return {
            'in_channels': self.in_channels,
            'out_channels': self.out_channels,
            'kernel_h': self.kernel_h,
            'kernel_w': self.kernel_w,
            'stride': self.stride,
            'padding': self.padding
        }

    @classmethod
    def from_dict(cls, data: Dict[str, int]) -> 'ConvSpec':
        return cls(**{key: int(data[key]) for key in
                      ('in_channels', 'out_channels', 'kernel_h', 'kernel_w', 'stride', 'padding')})


@dataclass
class BatchNormState:
    """Running statistics and affine parameters of one batch-norm layer."""
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON
    batches_seen: int = 0

    @classmethod
    def identity(cls, channels: int) -> 'BatchNormState':
        """Fresh state: running stats (0, 1) and identity affine."""
        return cls(
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            gamma=np.ones(channels),
            beta=np.zeros(channels)
        )

    @property
    def channels(self) -> int:
        return int(self.running_mean.shape[0])


def _require_rank(op: str, tensor: Tensor, rank: int):
    if tensor.ndim != rank:
        raise DimensionError(op, f"rank-{rank} tensor", f"shape {tuple(tensor.shape)}")


def extract_patches(inputs: Tensor, spec: ConvSpec) -> Tensor:
    """Input windows aligned with conv2d output sites.

    Returns an array of shape (B, H', W', Cin * kh * kw) whose last axis is
    flattened in the same (channel, row, column) order as the kernel weights.
    """
    _require_rank('conv2d', inputs, 4)
    batch, channels, height, width = inputs.shape
    if channels != spec.in_channels:
        raise DimensionError('conv2d', f"{spec.in_channels} input channels", f"{channels}")
    out_h, out_w = spec.output_size(height, width)
    if spec.padding:
        pad = spec.padding
        inputs = np.pad(inputs, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(inputs, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    windows = windows[:, :, ::spec.stride, ::spec.stride][:, :, :out_h, :out_w]
    # (B, Cin, H', W', kh, kw) -> (B, H', W', Cin, kh, kw)
    windows = windows.transpose(0, 2, 3, 1, 4, 5)
    return windows.reshape(batch, out_h, out_w, channels * spec.kernel_h * spec.kernel_w)


def conv2d_forward(inputs: Tensor, weights: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlate a batch with a kernel bank, no bias."""
    _require_rank('conv2d', weights, 4)
    if tuple(weights.shape) != spec.weight_shape:
        raise DimensionError('conv2d', f"weights {spec.weight_shape}", f"{tuple(weights.shape)}")
    patches = extract_patches(inputs, spec)
    flat = weights.reshape(spec.out_channels, -1)
    out = patches @ flat.T
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _pool_windows(op: str, inputs: Tensor, window: int, stride: int) -> Tensor:
    _require_rank(op, inputs, 4)
    if window < 1 or stride < 1:
        raise ValueError(f"{op}: window and stride must be positive")
    height, width = inputs.shape[2], inputs.shape[3]
    if height < window or width < window:
        raise DimensionError(op, f"spatial size >= {window}", f"{height}x{width}")
    windows = sliding_window_view(inputs, (window, window), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def max_pool(inputs: Tensor, window: int, stride: int) -> Tensor:
    """Max over each pooling window."""
    return _pool_windows('max_pool', inputs, window, stride).max(axis=(-2, -1))


def avg_pool(inputs: Tensor, window: int, stride: int) -> Tensor:
    """Mean over each pooling window."""
    return _pool_windows('avg_pool', inputs, window, stride).mean(axis=(-2, -1))


def batch_norm(inputs: Tensor, state: BatchNormState, mode: NormMode) -> Tensor:
    """Per-channel batch normalization.

    In train mode the batch statistics normalize the input and are folded into
    the running statistics; in eval mode the running statistics are used.
    """
    _require_rank('batch_norm', inputs, 4)
    if inputs.shape[1] != state.channels:
        raise DimensionError('batch_norm', f"{state.channels} channels", f"{inputs.shape[1]}")
    shape = (1, -1, 1, 1)
    if NormMode(mode) == NormMode.TRAIN:
        count = inputs.shape[0] * inputs.shape[2] * inputs.shape[3]
        if count < 2:
            raise DimensionError('batch_norm', "at least 2 values per channel in train mode", count)
        mean = inputs.mean(axis=(0, 2, 3))
        var = inputs.var(axis=(0, 2, 3))
        unbiased = var * count / (count - 1)
        state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * unbiased
        state.batches_seen += 1
    else:
        mean = state.running_mean
        var = state.running_var
    normalized = (inputs - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + state.eps)
    return normalized * state.gamma.reshape(shape) + state.beta.reshape(shape)


def triangle_activation(pre_act: Tensor) -> Tensor:
    """Hinge of each channel against the cross-channel mean at its site."""
    _require_rank('triangle_activation', pre_act, 4)
    return np.maximum(0.0, pre_act - pre_act.mean(axis=1, keepdims=True))


def softmax(values: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax along one axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return _scipy_softmax(np.asarray(values, dtype=np.float64) / temperature, axis=axis)
