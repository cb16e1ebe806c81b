"""
Loss and gradient oracles.
Three model families share one calling convention: a flat parameter vector
and a shard of local data. Data shards carry the global sample count so that
the local losses sum to the globally 1/N-normalized objective.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, ClassVar, List, Optional, Tuple, Union

import numpy as np

from laq_sim.constants import (
    DEFAULT_LAMBDA, DEFAULT_HIDDEN, MNIST_FEATURES, MNIST_CLASSES,
    FINITE_DIFF_STEP, POWER_ITERATION_TOL, POWER_ITERATION_MAX, ModelKind, Errors
)
from laq_sim.exceptions import ConfigError, UnsupportedModelError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class QuadraticShard:
    """Local quadratic f_m(theta) = 1/2 theta'A theta - b'theta"""
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
            raise ConfigError(Errors.SHAPE_MISMATCH.value.format(
                what="quadratic shard", expected="(p, p) and (p,)", actual=(A.shape, b.shape)))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True, eq=False)
class DataShard:
    """Features and one-hot labels held by one worker"""
    features: np.ndarray
    labels: np.ndarray
    total_samples: Optional[float] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.float64)
        if features.ndim != 2 or labels.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise ConfigError(Errors.SHAPE_MISMATCH.value.format(
                what="data shard", expected="(N, F) and (N, C)",
                actual=(features.shape, labels.shape)))
        if features.shape[0] < 1:
            raise ConfigError(Errors.EMPTY_DATASET.value.format(path="shard"))
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.total_samples is None:
            object.__setattr__(self, "total_samples", float(features.shape[0]))

    @property
    def num_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def weight(self) -> float:
        """N_m / N, the share of the regularizer carried by this shard"""
        return self.num_samples / self.total_samples

    def subset(self, indices: np.ndarray) -> 'DataShard':
        """Minibatch view whose loss is an unbiased estimate of this shard's loss"""
        scale = len(indices) / self.num_samples
        return DataShard(self.features[indices], self.labels[indices],
                         self.total_samples * scale)


Shard = Union[QuadraticShard, DataShard]


@dataclass(frozen=True)
class QuadraticModel:
    """Quadratic objective; data lives in the shards"""
    dimension: int
    kind: ClassVar[ModelKind] = ModelKind.QUADRATIC

    def initial_params(self, seed: int = 0) -> np.ndarray:
        return np.zeros(self.dimension)


@dataclass(frozen=True)
class LogisticModel:
    """Regularized multiclass logistic regression with theta in R^{C x F}"""
    num_classes: int = MNIST_CLASSES
    num_features: int = MNIST_FEATURES
    lam: float = DEFAULT_LAMBDA
    kind: ClassVar[ModelKind] = ModelKind.LOGISTIC

    @property
    def dimension(self) -> int:
        return self.num_classes * self.num_features

    def initial_params(self, seed: int = 0) -> np.ndarray:
        return np.zeros(self.dimension)


@dataclass(frozen=True)
class MLPModel:
    """One-hidden-layer ReLU network with softmax output"""
    layer_sizes: Tuple[int, int, int] = (MNIST_FEATURES, DEFAULT_HIDDEN, MNIST_CLASSES)
    lam: float = DEFAULT_LAMBDA
    kind: ClassVar[ModelKind] = ModelKind.MLP

    def __post_init__(self):
        if len(self.layer_sizes) != 3 or min(self.layer_sizes) < 1:
            raise ConfigError(Errors.INVALID_VALUE.value.format(
                key="layer_sizes", value=self.layer_sizes))

    @property
    def dimension(self) -> int:
        inputs, hidden, outputs = self.layer_sizes
        return hidden * inputs + hidden + outputs * hidden + outputs

    def unflatten(self, params: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Split the flat vector into W1 (H x F), b1, W2 (C x H), b2"""
        inputs, hidden, outputs = self.layer_sizes
        sizes = [hidden * inputs, hidden, outputs * hidden, outputs]
        w1, b1, w2, b2 = np.split(params, np.cumsum(sizes)[:-1])
        return w1.reshape(hidden, inputs), b1, w2.reshape(outputs, hidden), b2

    def initial_params(self, seed: int = 0) -> np.ndarray:
        """Glorot-uniform weights, zero biases"""
        rng = np.random.default_rng(seed)
        inputs, hidden, outputs = self.layer_sizes
        parts = []
        for fan_in, fan_out in ((inputs, hidden), (hidden, outputs)):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-limit, limit, size=fan_out * fan_in))
            parts.append(np.zeros(fan_out))
        return np.concatenate(parts)


Model = Union[QuadraticModel, LogisticModel, MLPModel]


def _check_params(model: Model, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (model.dimension,):
        raise ConfigError(Errors.DIMENSION_MISMATCH.value.format(
            expected=model.dimension, actual=params.shape))
    if not np.all(np.isfinite(params)):
        raise ConfigError(Errors.NON_FINITE.value.format(what="parameters"))
    return params


def _check_shard(model: Model, shard: Shard) -> None:
    if isinstance(model, QuadraticModel):
        if not isinstance(shard, QuadraticShard) or shard.b.size != model.dimension:
            raise ConfigError(Errors.SHAPE_MISMATCH.value.format(
                what="quadratic shard", expected=model.dimension, actual=shard))
        return
    if not isinstance(shard, DataShard):
        raise ConfigError(Errors.SHAPE_MISMATCH.value.format(
            what="data shard", expected="DataShard", actual=type(shard).__name__))
    if isinstance(model, LogisticModel):
        features, classes = model.num_features, model.num_classes
    else:
        features, classes = model.layer_sizes[0], model.layer_sizes[2]
    if shard.features.shape[1] != features or shard.labels.shape[1] != classes:
        raise ConfigError(Errors.SHAPE_MISMATCH.value.format(
            what="data shard", expected=(features, classes),
            actual=(shard.features.shape[1], shard.labels.shape[1])))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _logistic(model: LogisticModel, params: np.ndarray, shard: DataShard,
              with_gradient: bool) -> Tuple[float, Optional[np.ndarray]]:
    theta = params.reshape(model.num_classes, model.num_features)
    log_probs = _log_softmax(shard.features @ theta.T)
    value = -float(np.sum(shard.labels * log_probs)) / shard.total_samples
    value += shard.weight * 0.5 * model.lam * float(np.sum(theta * theta))
    if not with_gradient:
        return value, None
    residual = np.exp(log_probs) - shard.labels
    grad = residual.T @ shard.features / shard.total_samples + shard.weight * model.lam * theta
    return value, grad.ravel()


def _mlp(model: MLPModel, params: np.ndarray, shard: DataShard,
         with_gradient: bool) -> Tuple[float, Optional[np.ndarray]]:
    w1, b1, w2, b2 = model.unflatten(params)
    pre = shard.features @ w1.T + b1
    hidden = np.maximum(pre, 0.0)
    log_probs = _log_softmax(hidden @ w2.T + b2)
    value = -float(np.sum(shard.labels * log_probs)) / shard.total_samples
    value += shard.weight * 0.5 * model.lam * float(params @ params)
    if not with_gradient:
        return value, None

    # backpropagation
    d_logits = (np.exp(log_probs) - shard.labels) / shard.total_samples
    g_w2 = d_logits.T @ hidden
    g_b2 = d_logits.sum(axis=0)
    d_pre = (d_logits @ w2) * (pre > 0.0)
    g_w1 = d_pre.T @ shard.features
    g_b1 = d_pre.sum(axis=0)
    grad = np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])
    return value, grad + shard.weight * model.lam * params


def _quadratic(model: QuadraticModel, params: np.ndarray, shard: QuadraticShard,
               with_gradient: bool) -> Tuple[float, Optional[np.ndarray]]:
    a_theta = shard.A @ params
    value = 0.5 * float(params @ a_theta) - float(shard.b @ params)
    return value, (a_theta - shard.b) if with_gradient else None


def _evaluate(model: Model, params: np.ndarray, shard: Shard,
              with_gradient: bool) -> Tuple[float, Optional[np.ndarray]]:
    params = _check_params(model, params)
    _check_shard(model, shard)
    if isinstance(model, QuadraticModel):
        return _quadratic(model, params, shard, with_gradient)
    if isinstance(model, LogisticModel):
        return _logistic(model, params, shard, with_gradient)
    return _mlp(model, params, shard, with_gradient)


def loss(model: Model, params: np.ndarray, shard: Shard) -> float:
    """Local loss f_m(theta)"""
    return _evaluate(model, params, shard, with_gradient=False)[0]


def gradient(model: Model, params: np.ndarray, shard: Shard) -> np.ndarray:
    """Exact gradient of `loss`"""
    return _evaluate(model, params, shard, with_gradient=True)[1]


def loss_and_gradient(model: Model, params: np.ndarray, shard: Shard) -> Tuple[float, np.ndarray]:
    return _evaluate(model, params, shard, with_gradient=True)


def finite_diff_gradient(model: Model, params: np.ndarray, shard: Shard,
                         h: float = FINITE_DIFF_STEP) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time"""
    if not h > 0.0:
        raise ConfigError(Errors.INVALID_VALUE.value.format(key="h", value=h))
    params = _check_params(model, params)
    estimate = np.empty_like(params)
    shifted = params.copy()
    for i in range(params.size):
        shifted[i] = params[i] + h
        upper = loss(model, shifted, shard)
        shifted[i] = params[i] - h
        lower = loss(model, shifted, shard)
        shifted[i] = params[i]
        estimate[i] = (upper - lower) / (2.0 * h)
    return estimate


def power_iteration(apply: Callable[[np.ndarray], np.ndarray], dimension: int,
                    tol: float = POWER_ITERATION_TOL,
                    max_iterations: int = POWER_ITERATION_MAX, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD operator"""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dimension)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max_iterations):
        w = apply(v)
        previous, estimate = estimate, float(v @ w)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(estimate - previous) <= tol * max(1.0, abs(estimate)):
            break
    else:
        logger.warning("Power iteration stopped after %d iterations", max_iterations)
    return float(v @ apply(v))


def smoothness_constant(model: Model, shard: Shard) -> float:
    """Lipschitz constant of the local gradient (exact for quadratics, an upper bound for logistic)"""
    _check_shard(model, shard)
    if isinstance(model, QuadraticModel):
        return power_iteration(lambda v: shard.A @ v, model.dimension)
    if isinstance(model, LogisticModel):
        X = shard.features
        gram_max = power_iteration(lambda v: X.T @ (X @ v), model.num_features)
        return 0.5 * gram_max / shard.total_samples + shard.weight * model.lam
    raise UnsupportedModelError(Errors.UNSUPPORTED_MODEL.value.format(
        operation="smoothness_constant", model=model.kind.value))


def predict(model: Model, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Predicted class index per row"""
    params = _check_params(model, params)
    if isinstance(model, LogisticModel):
        theta = params.reshape(model.num_classes, model.num_features)
        return np.argmax(features @ theta.T, axis=1)
    if isinstance(model, MLPModel):
        w1, b1, w2, b2 = model.unflatten(params)
        hidden = np.maximum(features @ w1.T + b1, 0.0)
        return np.argmax(hidden @ w2.T + b2, axis=1)
    raise UnsupportedModelError(Errors.UNSUPPORTED_MODEL.value.format(
        operation="predict", model=model.kind.value))


def accuracy(model: Model, params: np.ndarray, features: np.ndarray,
             labels: np.ndarray) -> float:
    """Fraction of rows whose predicted class matches the one-hot label"""
    predicted = predict(model, params, features)
    return float(np.mean(predicted == np.argmax(labels, axis=1)))


def total_loss(model: Model, params: np.ndarray, shards: List[Shard]) -> float:
    """f(theta) = sum_m f_m(theta)"""
    return sum(loss(model, params, shard) for shard in shards)


def total_gradient(model: Model, params: np.ndarray, shards: List[Shard]) -> np.ndarray:
    grads = [gradient(model, params, shard) for shard in shards]
    return np.sum(grads, axis=0)
