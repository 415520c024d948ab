"""Task-specific linear classifier heads and the head store."""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from numerics.tensor_ops import DimensionError

logger = logging.getLogger(__name__)

DEFAULT_HEAD_LR = 0.01
DEFAULT_HEAD_BATCH = 32
DEFAULT_HEAD_EPOCHS = 50


class UnknownTaskError(KeyError):
    """Raised when no head is stored for a task id."""


class DuplicateTaskError(ValueError):
    """Raised when a head for the task id already exists."""


@dataclass
class LinearHead:
    """Fully-connected head mapping extractor features to one task's classes."""
    task_id: int
    classes: List[int]
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, task_id: int, classes: List[int], feature_dim: int) -> 'LinearHead':
        return cls(task_id, list(classes), np.zeros((len(classes), feature_dim)), np.zeros(len(classes)))

    @property
    def num_classes(self) -> int:
        return int(self.weight.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.weight.shape[1])

    def to_dict(self) -> Dict[str, Any]:
        return {'task_id': self.task_id, 'classes': list(self.classes)}


@dataclass
class TrainingLog:
    """Per-epoch loss and accuracy of one head's training."""
    task_id: int
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def to_dict(self) -> Dict[str, Any]:
        return {'task_id': self.task_id, 'losses': self.losses, 'accuracies': self.accuracies}


def head_forward(head: LinearHead, features: np.ndarray) -> np.ndarray:
    """Logits W f + b for one feature vector or a (N, D) batch."""
    if features.shape[-1] != head.feature_dim:
        raise DimensionError('head_forward', f"feature_dim {head.feature_dim}", features.shape[-1])
    return features @ head.weight.T + head.bias


def cross_entropy_gradients(weight: np.ndarray, bias: np.ndarray, features: np.ndarray,
                            labels: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy over a batch and its gradients wrt W and b."""
    logits = features @ weight.T + bias
    rows = np.arange(len(labels))
    loss = float(-log_softmax(logits, axis=1)[rows, labels].mean())
    residual = softmax(logits, axis=1)
    residual[rows, labels] -= 1.0
    residual /= len(labels)
    return loss, residual.T @ features, residual.sum(axis=0)


def _check_dataset(head: LinearHead, features: np.ndarray, labels: np.ndarray):
    if len(labels) == 0:
        raise ValueError("cannot train a head on an empty dataset")
    if features.ndim != 2 or features.shape[0] != len(labels):
        raise DimensionError('train_head', f"({len(labels)}, {head.feature_dim}) features",
                             tuple(features.shape))
    if features.shape[1] != head.feature_dim:
        raise DimensionError('train_head', f"feature_dim {head.feature_dim}", features.shape[1])
    if labels.min() < 0 or labels.max() >= head.num_classes:
        raise ValueError(f"labels must lie in [0, {head.num_classes}), "
                         f"got range [{labels.min()}, {labels.max()}]")


def train_head(head: LinearHead, features: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
               epochs: int = DEFAULT_HEAD_EPOCHS, lr: float = DEFAULT_HEAD_LR,
               batch_size: int = DEFAULT_HEAD_BATCH) -> TrainingLog:
    """Mini-batch SGD on softmax cross-entropy; labels are head-local indices."""
    labels = np.asarray(labels, dtype=np.int64)
    _check_dataset(head, features, labels)
    log = TrainingLog(task_id=head.task_id)
    log.losses.append(cross_entropy_gradients(head.weight, head.bias, features, labels)[0])
    log.accuracies.append(accuracy(head, features, labels))
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            _, grad_w, grad_b = cross_entropy_gradients(head.weight, head.bias, features[batch], labels[batch])
            head.weight -= lr * grad_w
            head.bias -= lr * grad_b
        log.losses.append(cross_entropy_gradients(head.weight, head.bias, features, labels)[0])
        log.accuracies.append(accuracy(head, features, labels))
    logger.info("Head %d: loss %.4f -> %.4f, train accuracy %.3f over %d epochs",
                head.task_id, log.initial_loss, log.final_loss, log.accuracies[-1], epochs)
    return log


def predict_local(head: LinearHead, features: np.ndarray) -> np.ndarray:
    """Head-local argmax; ties go to the lowest index."""
    return np.argmax(head_forward(head, features), axis=-1)


def accuracy(head: LinearHead, features: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict_local(head, features) == labels))


class HeadStore:
    """Append-only map from task id to its classifier head."""

    def __init__(self):
        self.heads: Dict[int, LinearHead] = {}
        self.select_hooks: List[Callable[[LinearHead], None]] = []

    def __len__(self) -> int:
        return len(self.heads)

    def __contains__(self, task_id: int) -> bool:
        return task_id in self.heads

    def add(self, head: LinearHead):
        if head.task_id in self.heads:
            raise DuplicateTaskError(f"head for task {head.task_id} already stored")
        self.heads[head.task_id] = head

    def select(self, task_id: int) -> LinearHead:
        """Head for a task; never falls back to another task's head."""
        head = self.heads.get(task_id)
        if head is None:
            raise UnknownTaskError(f"no head stored for task {task_id}")
        for hook in self.select_hooks:
            hook(head)
        return head

    def task_ids(self) -> List[int]:
        return sorted(self.heads)


def predict(store: HeadStore, extractor, inputs: np.ndarray, task_id: int,
            features: Optional[np.ndarray] = None) -> np.ndarray:
    """Global class labels from the selected task head over frozen features.

    `inputs` is a (B, C, H, W) batch; pass precomputed `features` to skip the
    extractor.
    """
    head = store.select(task_id)
    if features is None:
        features = extractor.features(inputs)
    return np.asarray(head.classes)[predict_local(head, features)]
