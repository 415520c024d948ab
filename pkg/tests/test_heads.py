"""Tests for classifier heads, their training and task-conditioned dispatch."""
from pathlib import Path
import sys

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from learners.extractor import HebbianExtractor
from learners.heads import (DuplicateTaskError, HeadStore, LinearHead, UnknownTaskError, accuracy,
                            cross_entropy_gradients, head_forward, predict, train_head)
from numerics.tensor_ops import DimensionError


class FakeExtractor:
    """Extractor stub returning fixed features and counting calls."""

    def __init__(self, features):
        self.feature_rows = features
        self.calls = 0

    def features(self, inputs):
        self.calls += 1
        return self.feature_rows


def separable_set(rng, per_class=20):
    features = np.concatenate([rng.normal(2.0, 0.3, size=(per_class, 2)),
                               rng.normal(-2.0, 0.3, size=(per_class, 2))])
    labels = np.array([0] * per_class + [1] * per_class)
    return features, labels


def test_zero_head_gives_zero_logits():
    head = LinearHead.zeros(0, [3, 7], 4)
    assert np.array_equal(head_forward(head, np.ones(4)), [0.0, 0.0])


def test_identity_head_passes_features_through():
    head = LinearHead(0, [0, 1], np.eye(2), np.zeros(2))
    assert np.array_equal(head_forward(head, np.array([1.0, 2.0])), [1.0, 2.0])


def test_head_forward_matches_manual_product():
    rng = np.random.default_rng(0)
    head = LinearHead(0, [0, 1, 2], rng.standard_normal((3, 5)), rng.standard_normal(3))
    features = rng.standard_normal(5)
    expected = [sum(head.weight[c, d] * features[d] for d in range(5)) + head.bias[c] for c in range(3)]
    assert np.max(np.abs(head_forward(head, features) - expected)) < 1e-12


def test_head_forward_rejects_wrong_feature_dim():
    with pytest.raises(DimensionError):
        head_forward(LinearHead.zeros(0, [0, 1], 3), np.ones(4))


def numeric_gradients(weight, bias, features, labels, step=1e-5):
    def loss(w, b):
        return cross_entropy_gradients(w, b, features, labels)[0]

    grad_w = np.zeros_like(weight)
    for index in np.ndindex(weight.shape):
        plus, minus = weight.copy(), weight.copy()
        plus[index] += step
        minus[index] -= step
        grad_w[index] = (loss(plus, bias) - loss(minus, bias)) / (2 * step)
    grad_b = np.zeros_like(bias)
    for index in range(len(bias)):
        plus, minus = bias.copy(), bias.copy()
        plus[index] += step
        minus[index] -= step
        grad_b[index] = (loss(weight, plus) - loss(weight, minus)) / (2 * step)
    return grad_w, grad_b


def test_gradients_match_central_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(100):
        classes, dim, count = int(rng.integers(2, 6)), int(rng.integers(2, 7)), int(rng.integers(1, 7))
        weight = rng.standard_normal((classes, dim))
        bias = rng.standard_normal(classes)
        features = rng.standard_normal((count, dim))
        labels = rng.integers(0, classes, size=count)
        _, grad_w, grad_b = cross_entropy_gradients(weight, bias, features, labels)
        num_w, num_b = numeric_gradients(weight, bias, features, labels)
        analytic = np.concatenate([grad_w.ravel(), grad_b])
        numeric = np.concatenate([num_w.ravel(), num_b])
        relative = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        assert relative < 1e-6


def test_saturated_softmax_has_vanishing_gradient():
    weight = np.array([[100.0], [0.0]])
    _, grad_w, grad_b = cross_entropy_gradients(weight, np.zeros(2), np.array([[1.0]]), np.array([0]))
    assert np.linalg.norm(grad_w) < 1e-6
    assert np.linalg.norm(grad_b) < 1e-6


def test_training_separates_two_clusters():
    rng = np.random.default_rng(2)
    features, labels = separable_set(rng)
    head = LinearHead.zeros(0, [4, 9], 2)
    log = train_head(head, features, labels, np.random.default_rng(3), epochs=50)
    assert log.final_loss <= log.initial_loss
    assert log.accuracies[-1] == 1.0
    assert accuracy(head, features, labels) == 1.0
    assert len(log.losses) == 51


def test_training_is_deterministic_for_a_seed():
    features, labels = separable_set(np.random.default_rng(4))
    first, second = LinearHead.zeros(0, [0, 1], 2), LinearHead.zeros(0, [0, 1], 2)
    train_head(first, features, labels, np.random.default_rng(5), epochs=5)
    train_head(second, features, labels, np.random.default_rng(5), epochs=5)
    assert np.array_equal(first.weight, second.weight)
    assert np.array_equal(first.bias, second.bias)


def test_training_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train_head(LinearHead.zeros(0, [0, 1], 2), np.empty((0, 2)), np.empty(0, dtype=int),
                   np.random.default_rng(0))


def test_training_rejects_label_outside_head():
    with pytest.raises(ValueError):
        train_head(LinearHead.zeros(0, [0, 1], 2), np.ones((2, 2)), np.array([0, 2]), np.random.default_rng(0))


def test_training_leaves_extractor_untouched():
    rng = np.random.default_rng(6)
    extractor = HebbianExtractor.build(1, [4, 6], [3, 3], [1, 1], 2, rng)
    inputs = rng.standard_normal((12, 1, 8, 8))
    before = extractor.checksum()
    features = extractor.features(inputs)
    head = LinearHead.zeros(0, [0, 1], features.shape[1])
    train_head(head, features, np.arange(12) % 2, rng, epochs=3)
    assert extractor.checksum() == before


def test_store_is_append_only():
    store = HeadStore()
    store.add(LinearHead.zeros(0, [0, 1], 2))
    with pytest.raises(DuplicateTaskError):
        store.add(LinearHead.zeros(0, [2, 3], 2))
    assert len(store) == 1
    assert store.task_ids() == [0]


def test_predict_uses_the_only_head():
    store = HeadStore()
    store.add(LinearHead(0, [5, 8], np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2)))
    extractor = FakeExtractor(np.array([[0.0, 3.0], [3.0, 0.0]]))
    assert list(predict(store, extractor, np.zeros((2, 1, 1, 1)), 0)) == [8, 5]
    assert extractor.calls == 1


def test_predict_dispatches_to_selected_head():
    store = HeadStore()
    store.add(LinearHead(0, [0, 1], np.array([[1.0], [-1.0]]), np.zeros(2)))
    store.add(LinearHead(1, [2, 3], np.array([[-1.0], [1.0]]), np.zeros(2)))
    selected = []
    store.select_hooks.append(lambda head: selected.append(head.task_id))
    features = np.array([[1.0]])
    assert predict(store, None, None, 0, features=features)[0] == 0
    assert predict(store, None, None, 1, features=features)[0] == 3
    assert selected == [0, 1]


def test_predict_unknown_task_raises():
    store = HeadStore()
    store.add(LinearHead.zeros(0, [0, 1], 2))
    with pytest.raises(UnknownTaskError):
        predict(store, None, None, 3, features=np.ones((1, 2)))


def test_predict_tie_goes_to_lowest_index():
    store = HeadStore()
    store.add(LinearHead.zeros(2, [11, 4, 7], 3))
    assert list(predict(store, None, None, 2, features=np.ones((2, 3)))) == [11, 11]
