import math

import numpy as np
import pytest

from laq_sim.data import one_hot
from laq_sim.exceptions import ConfigError, UnsupportedModelError
from laq_sim.losses import (
    DataShard, LogisticModel, MLPModel, QuadraticModel, QuadraticShard, accuracy,
    finite_diff_gradient, gradient, loss, loss_and_gradient, power_iteration, predict,
    smoothness_constant, total_gradient, total_loss
)


def full_shard(dataset):
    return DataShard(dataset.features, dataset.labels)


def split_shards(dataset, bounds):
    total = float(dataset.num_samples)
    pieces = np.split(np.arange(dataset.num_samples), bounds)
    return [DataShard(dataset.features[idx], dataset.labels[idx], total) for idx in pieces]


def test_quadratic_examples():
    model = QuadraticModel(3)
    shard = QuadraticShard(np.eye(3), np.zeros(3))
    assert loss(model, np.zeros(3), shard) == 0.0

    shard = QuadraticShard(np.eye(2), np.array([1.0, 0.0]))
    value, grad = loss_and_gradient(QuadraticModel(2), np.zeros(2), shard)
    assert value == 0.0
    np.testing.assert_array_equal(grad, [-1.0, 0.0])
    assert loss(QuadraticModel(2), np.array([1.0, 0.0]), shard) == pytest.approx(-0.5)


def test_logistic_at_zero_is_log_two(small_logistic):
    binary = small_logistic.subset(np.arange(10))
    labels = one_hot(np.argmax(binary.labels, axis=1) % 2, 2)
    model = LogisticModel(2, binary.num_features, lam=0.5)
    shard = DataShard(binary.features, labels)
    assert loss(model, np.zeros(model.dimension), shard) == pytest.approx(math.log(2.0))


def test_regularizer_only_gradient(small_logistic):
    model = LogisticModel(3, 4, lam=0.1)
    shard = full_shard(small_logistic)
    params = np.random.default_rng(0).standard_normal(model.dimension)
    zeroed = DataShard(np.zeros_like(shard.features), shard.labels)
    # zero features leave softmax uniform, so only the regularizer depends on theta
    grad_a = gradient(model, params, zeroed)
    grad_b = gradient(model, np.zeros(model.dimension), zeroed)
    np.testing.assert_allclose(grad_a - grad_b, 0.1 * params, atol=1e-12)


def test_logistic_gradient_matches_finite_differences(small_logistic):
    model = LogisticModel(3, 4, lam=0.01)
    shard = full_shard(small_logistic)
    rng = np.random.default_rng(1)
    for _ in range(5):
        params = rng.standard_normal(model.dimension)
        np.testing.assert_allclose(gradient(model, params, shard),
                                   finite_diff_gradient(model, params, shard),
                                   rtol=1e-5, atol=1e-7)


def test_mlp_gradient_matches_finite_differences(small_logistic):
    model = MLPModel((4, 5, 3), lam=0.01)
    shard = full_shard(small_logistic.subset(np.arange(20)))
    params = model.initial_params(seed=2) + 0.1
    np.testing.assert_allclose(gradient(model, params, shard),
                               finite_diff_gradient(model, params, shard),
                               rtol=1e-4, atol=1e-6)


def test_quadratic_gradient_matches_finite_differences(small_quadratic):
    model = QuadraticModel(6)
    params = np.random.default_rng(3).standard_normal(6)
    for shard in small_quadratic.shards:
        np.testing.assert_allclose(gradient(model, params, shard),
                                   finite_diff_gradient(model, params, shard), atol=1e-6)


def test_mlp_layout():
    model = MLPModel((784, 200, 10))
    assert model.dimension == 159010
    w1, b1, w2, b2 = model.unflatten(np.arange(model.dimension, dtype=float))
    assert w1.shape == (200, 784) and b1.shape == (200,)
    assert w2.shape == (10, 200) and b2.shape == (10,)


def test_power_iteration():
    assert power_iteration(lambda v: np.diag([1.0, 10.0]) @ v, 2) == pytest.approx(10.0, rel=1e-6)
    assert power_iteration(lambda v: v, 5) == pytest.approx(1.0)
    assert power_iteration(lambda v: np.zeros_like(v), 3) == 0.0


def test_quadratic_smoothness_is_top_eigenvalue(small_quadratic):
    model = QuadraticModel(6)
    for shard, expected in zip(small_quadratic.shards, small_quadratic.smoothness):
        assert smoothness_constant(model, shard) == pytest.approx(expected, rel=1e-5)


def test_logistic_smoothness_bound(small_logistic):
    model = LogisticModel(3, 4, lam=0.01)
    shard = full_shard(small_logistic)
    X = shard.features
    expected = 0.5 * np.linalg.eigvalsh(X.T @ X)[-1] / X.shape[0] + 0.01
    assert smoothness_constant(model, shard) == pytest.approx(expected, rel=1e-4)


def test_logistic_witnesses(small_logistic):
    model = LogisticModel(3, 4, lam=0.01)
    shard = full_shard(small_logistic)
    L = smoothness_constant(model, shard)
    rng = np.random.default_rng(4)
    for _ in range(50):
        x, y = rng.standard_normal((2, model.dimension))
        gx, gy = gradient(model, x, shard), gradient(model, y, shard)
        assert np.linalg.norm(gx - gy) <= L * np.linalg.norm(x - y) * (1 + 1e-6)
        assert loss(model, y, shard) >= loss(model, x, shard) + gx @ (y - x) - 1e-12
        mid = loss(model, 0.5 * (x + y), shard)
        assert mid <= 0.5 * (loss(model, x, shard) + loss(model, y, shard)) + 1e-12


def test_local_losses_sum_to_global(small_logistic):
    model = LogisticModel(3, 4, lam=0.05)
    params = np.random.default_rng(5).standard_normal(model.dimension)
    shards = split_shards(small_logistic, [7, 30, 41])
    whole = full_shard(small_logistic)
    assert total_loss(model, params, shards) == pytest.approx(loss(model, params, whole), rel=1e-12)
    np.testing.assert_allclose(total_gradient(model, params, shards),
                               gradient(model, params, whole), atol=1e-12)


def test_mlp_has_no_smoothness_constant(small_logistic):
    with pytest.raises(UnsupportedModelError):
        smoothness_constant(MLPModel((4, 5, 3)), full_shard(small_logistic))


def test_rejects_bad_params_and_shards(small_logistic):
    model = LogisticModel(3, 4)
    shard = full_shard(small_logistic)
    with pytest.raises(ConfigError):
        loss(model, np.zeros(5), shard)
    with pytest.raises(ConfigError):
        loss(model, np.full(model.dimension, np.nan), shard)
    with pytest.raises(ConfigError):
        loss(LogisticModel(3, 5), np.zeros(15), shard)
    with pytest.raises(ConfigError):
        loss(QuadraticModel(12), np.zeros(12), shard)


def test_accuracy():
    model = LogisticModel(2, 2, lam=0.0)
    features = np.array([[1.0, 0.0], [0.0, 1.0]])
    params = np.eye(2).ravel()
    np.testing.assert_array_equal(predict(model, params, features), [0, 1])
    assert accuracy(model, params, features, one_hot(np.array([0, 1]), 2)) == 1.0
    assert accuracy(model, params, features, one_hot(np.array([0, 0]), 2)) == 0.5
    with pytest.raises(UnsupportedModelError):
        predict(QuadraticModel(2), np.zeros(2), features)
