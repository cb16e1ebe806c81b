"""
Distributed training loop.
A server and M workers exchange messages in process. The same loop realizes
GD, QGD, LAG, LAQ, SGD and SLAQ; the algorithm only decides whether the codec
is used, whether workers may skip and whether gradients are minibatched.
"""

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, replace, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from laq_sim.codec import WireMessage, granularity, quantize_innovation
from laq_sim.constants import (
    DEFAULT_ALPHA, DEFAULT_BITS, DEFAULT_D, DEFAULT_MAX_STALENESS, DEFAULT_WORKERS,
    DEFAULT_ITERATIONS, DEFAULT_MINIBATCH, DEFAULT_SEED, DEFAULT_LAMBDA, DEFAULT_HIDDEN,
    DEFAULT_LOG_EVERY, DEFAULT_DIMENSION, DEFAULT_MU, DEFAULT_SAMPLES, FLOAT_BITS,
    DIVERGENCE_LIMIT, DESCENT_SLACK, REFERENCE_ITERATIONS, REFERENCE_CACHE_FILENAME,
    BOUNDARY_RTOL, Algorithm, ModelKind, PartitionMode, Messages, Errors
)
from laq_sim.criterion import (
    SkipConfig, WorkerState, experiment_xi, record_parameter_change, should_skip,
    on_upload, on_skip
)
from laq_sim.data import Dataset, SyntheticQuadratic, partition
from laq_sim.exceptions import ConfigError, CodecError, DivergenceError, SyncError, UnsupportedModelError
from laq_sim.losses import (
    Model, Shard, QuadraticModel, LogisticModel, MLPModel, gradient, loss_and_gradient,
    total_loss, smoothness_constant, accuracy
)
from laq_sim.metrics import TelemetryLog, TelemetryRecord, lyapunov

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run"""
    algorithm: Algorithm = Algorithm.LAQ
    alpha: float = DEFAULT_ALPHA
    bits: int = DEFAULT_BITS
    xi: Tuple[float, ...] = experiment_xi(DEFAULT_D)
    max_staleness: int = DEFAULT_MAX_STALENESS
    num_workers: int = DEFAULT_WORKERS
    max_iterations: int = DEFAULT_ITERATIONS
    target_residual: Optional[float] = None
    minibatch: int = DEFAULT_MINIBATCH
    seed: int = DEFAULT_SEED
    model: ModelKind = ModelKind.LOGISTIC
    dataset: str = "mnist"
    lam: float = DEFAULT_LAMBDA
    hidden: int = DEFAULT_HIDDEN
    partition: PartitionMode = PartitionMode.UNIFORM
    dimension: int = DEFAULT_DIMENSION
    mu: float = DEFAULT_MU
    worker_smoothness: Tuple[float, ...] = ()
    samples: int = DEFAULT_SAMPLES
    smoothness: Optional[float] = None
    check_descent: bool = False
    log_every: int = DEFAULT_LOG_EVERY

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "model", ModelKind(self.model))
        object.__setattr__(self, "partition", PartitionMode(self.partition))
        object.__setattr__(self, "xi", tuple(float(x) for x in self.xi))
        object.__setattr__(self, "worker_smoothness", tuple(float(x) for x in self.worker_smoothness))

    @property
    def depth(self) -> int:
        return len(self.xi)

    def skip_config(self) -> SkipConfig:
        return SkipConfig(self.alpha, self.num_workers, self.xi, self.max_staleness)

    def validate(self) -> 'RunConfig':
        """Raise ConfigError on any inconsistent field"""
        def positive(key, value, strict=True):
            if value is None or not (value > 0 if strict else value >= 0):
                raise ConfigError(Errors.INVALID_VALUE.value.format(key=key, value=value))

        positive("alpha", self.alpha)
        positive("num_workers", self.num_workers)
        positive("max_iterations", self.max_iterations, strict=False)
        positive("minibatch", self.minibatch)
        positive("log_every", self.log_every)
        positive("lam", self.lam, strict=False)
        positive("hidden", self.hidden)
        positive("dimension", self.dimension)
        positive("samples", self.samples)
        if self.target_residual is not None:
            positive("target_residual", self.target_residual)
        if self.smoothness is not None:
            positive("smoothness", self.smoothness)
        if self.algorithm.quantized:
            try:
                granularity(self.bits)
            except CodecError as e:
                raise ConfigError(str(e)) from e
        if self.algorithm.lazy:
            self.skip_config()
        return self

    def with_overrides(self, **overrides) -> 'RunConfig':
        """Copy with every non-None override applied"""
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(Errors.INVALID_VALUE.value.format(key="override", value=sorted(unknown)))
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> Dict[str, str]:
        """Flat string echo used in CSV headers"""
        echo = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (Algorithm, ModelKind, PartitionMode)):
                value = value.value
            elif isinstance(value, tuple):
                value = " ".join(repr(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            elif value is None:
                value = ""
            echo[f.name] = str(value)
        return echo


@dataclass(frozen=True, eq=False)
class ExactMessage:
    """Full-precision innovation used by gd, lag and sgd"""
    worker_id: int
    iteration: int
    delta: np.ndarray

    @property
    def dimension(self) -> int:
        return int(self.delta.size)

    @property
    def accounted_bits(self) -> int:
        return FLOAT_BITS * self.dimension

    def innovation(self) -> np.ndarray:
        return self.delta


Message = Union[WireMessage, ExactMessage]


@dataclass(frozen=True, eq=False)
class ServerState:
    """Parameters, running aggregate and the server's copy of each stored quantization"""
    params: np.ndarray
    aggregate: np.ndarray
    stored: np.ndarray
    iteration: int = 0

    @classmethod
    def initial(cls, params: np.ndarray, num_workers: int) -> 'ServerState':
        p = params.size
        return cls(np.array(params, dtype=np.float64), np.zeros(p), np.zeros((num_workers, p)), 0)

    @property
    def num_workers(self) -> int:
        return int(self.stored.shape[0])


def server_apply(server: ServerState, messages: Sequence[Message], alpha: float) -> ServerState:
    """Refine the aggregate with the received innovations, then take a gradient step"""
    ordered = sorted(messages, key=lambda m: m.worker_id)
    p = server.params.size
    for previous, message in zip([None] + ordered, ordered):
        if previous is not None and previous.worker_id == message.worker_id:
            raise ConfigError(Errors.DUPLICATE_WORKER.value.format(
                worker_id=message.worker_id, iteration=server.iteration))
        if not 0 <= message.worker_id < server.num_workers:
            raise ConfigError(Errors.INVALID_VALUE.value.format(
                key="worker_id", value=message.worker_id))
        if message.dimension != p:
            raise ConfigError(Errors.DIMENSION_MISMATCH.value.format(
                expected=p, actual=message.dimension))

    stored = server.stored.copy()
    aggregate = server.aggregate.copy()
    for message in ordered:
        delta = message.innovation()
        stored[message.worker_id] = stored[message.worker_id] + delta
        aggregate += delta
    params = server.params - alpha * aggregate
    return ServerState(params, aggregate, stored, server.iteration + 1)


class MinibatchSampler:
    """Seeded per-worker minibatches, drawn without replacement within an epoch"""

    def __init__(self, num_samples: int, batch_size: int, seed: int, worker_id: int):
        self.num_samples = num_samples
        self.batch_size = min(batch_size, num_samples)
        self._rng = np.random.default_rng([seed, worker_id])
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def next_batch(self) -> np.ndarray:
        if self._cursor + self.batch_size > self._order.size:
            self._order = self._rng.permutation(self.num_samples)
            self._cursor = 0
        batch = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return np.sort(batch)


@dataclass(frozen=True, eq=False)
class WorkerRound:
    """Outcome of one worker's turn"""
    message: Optional[Message]
    state: WorkerState
    gradient: np.ndarray
    candidate: np.ndarray
    error_sq: float
    delta_sq: float

    @property
    def uploaded(self) -> bool:
        return self.message is not None


def worker_round(worker_id: int, params: np.ndarray, state: WorkerState, config: RunConfig,
                 shard: Shard, model: Model, iteration: int = 0, diff_sq: float = 0.0,
                 sampler: Optional[MinibatchSampler] = None,
                 local_gradient: Optional[np.ndarray] = None) -> WorkerRound:
    """Compute the local gradient, form a candidate upload and decide whether to send it.
    `diff_sq` is ||theta^k - theta^{k-1}||^2 from the broadcast; `local_gradient` may carry
    an already computed full gradient at `params`"""
    algorithm = config.algorithm
    if algorithm.stochastic:
        if sampler is None:
            raise ConfigError(Errors.INVALID_VALUE.value.format(key="sampler", value=None))
        grad = gradient(model, params, shard.subset(sampler.next_batch()))
    elif local_gradient is not None:
        grad = local_gradient
    else:
        grad = gradient(model, params, shard)
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(Errors.NON_FINITE.value.format(what=f"gradient of worker {worker_id}"),
                              iteration, math.nan)

    if algorithm.lazy:
        state = record_parameter_change(state, diff_sq)

    stored = state.stored_quantization
    if algorithm.quantized:
        message = WireMessage.from_innovation(
            worker_id, iteration, quantize_innovation(grad, stored, config.bits))
        delta = message.innovation()
        candidate = stored + delta
        residual = grad - candidate
        error_sq = float(residual @ residual)
    else:
        delta = grad - stored
        message = ExactMessage(worker_id, iteration, delta)
        candidate = stored + delta
        error_sq = 0.0
    delta_sq = float(delta @ delta)

    upload = True
    if algorithm.lazy and iteration > 0:
        upload = not should_skip(delta_sq, state, config.skip_config(), error_sq)
    if upload:
        return WorkerRound(message, on_upload(state, candidate, error_sq), grad, candidate, error_sq, delta_sq)
    return WorkerRound(None, on_skip(state), grad, candidate, error_sq, delta_sq)


@dataclass(frozen=True, eq=False)
class Problem:
    """A model with its per-worker shards and, when known, its optimum"""
    model: Model
    shards: Tuple[Shard, ...]
    name: str
    optimal_loss: Optional[float] = None
    smoothness: Optional[float] = None
    worker_smoothness: Optional[Tuple[float, ...]] = None
    test_features: Optional[np.ndarray] = None
    test_labels: Optional[np.ndarray] = None

    @property
    def num_workers(self) -> int:
        return len(self.shards)

    @property
    def dimension(self) -> int:
        return self.model.dimension

    def with_optimal_loss(self, value: Optional[float]) -> 'Problem':
        return replace(self, optimal_loss=value)


def build_model(config: RunConfig, num_features: int, num_classes: int) -> Model:
    if config.model == ModelKind.LOGISTIC:
        return LogisticModel(num_classes, num_features, config.lam)
    if config.model == ModelKind.MLP:
        return MLPModel((num_features, config.hidden, num_classes), config.lam)
    raise UnsupportedModelError(Errors.UNSUPPORTED_MODEL.value.format(
        operation="build_model from a dataset", model=config.model.value))


def problem_from_dataset(config: RunConfig, dataset: Dataset,
                         test: Optional[Dataset] = None) -> Problem:
    """Partition a labelled dataset across the configured workers"""
    model = build_model(config, dataset.num_features, dataset.num_classes)
    plan = partition(dataset, config.num_workers, config.partition, config.seed)
    logger.debug("Partition sizes: %s", plan.sizes)
    return Problem(
        model=model,
        shards=tuple(plan.apply(dataset)),
        name=dataset.name,
        smoothness=config.smoothness,
        test_features=None if test is None else test.features,
        test_labels=None if test is None else test.labels,
    )


def quadratic_problem(config: RunConfig, synthetic: SyntheticQuadratic) -> Problem:
    return Problem(
        model=QuadraticModel(synthetic.dimension),
        shards=synthetic.shards,
        name="synthetic-quadratic",
        optimal_loss=synthetic.optimal_loss(),
        smoothness=config.smoothness or synthetic.global_smoothness,
        worker_smoothness=synthetic.smoothness,
    )


def _check_sync(server: ServerState, workers: List[WorkerState], iteration: int) -> None:
    for worker_id, state in enumerate(workers):
        if not np.array_equal(server.stored[worker_id], state.stored_quantization):
            message = Errors.OUT_OF_SYNC.value.format(worker_id=worker_id, iteration=iteration)
            logger.error(message)
            raise SyncError(message)


def _descent_gap(grad_norm_sq: float, skipped_gap: np.ndarray, error: np.ndarray,
                 step: np.ndarray, alpha: float, smoothness: float) -> float:
    """Upper bound on f(theta^{k+1}) - f(theta^k) for one lazy quantized step"""
    return (-0.5 * alpha * grad_norm_sq
            + alpha * float(skipped_gap @ skipped_gap)
            + (0.5 * smoothness - 0.5 / alpha) * float(step @ step)
            + alpha * float(error @ error))


def run(config: RunConfig, problem: Problem) -> Tuple[np.ndarray, TelemetryLog]:
    """Execute up to max_iterations rounds; returns the final parameters and the telemetry"""
    config.validate()
    if problem.num_workers != config.num_workers:
        raise ConfigError(Errors.DIMENSION_MISMATCH.value.format(
            expected=config.num_workers, actual=problem.num_workers))

    algorithm = config.algorithm
    model = problem.model
    shards = problem.shards
    num_workers = config.num_workers
    skip_cfg = config.skip_config() if algorithm.lazy else SkipConfig(config.alpha, num_workers)
    depth = skip_cfg.depth

    params = model.initial_params(config.seed)
    server = ServerState.initial(params, num_workers)
    workers = [WorkerState.initial(params.size, depth) for _ in range(num_workers)]
    samplers: List[Optional[MinibatchSampler]] = [None] * num_workers
    if algorithm.stochastic:
        samplers = [MinibatchSampler(shard.num_samples, config.minibatch, config.seed, worker_id)
                    for worker_id, shard in enumerate(shards)]

    check_descent = config.check_descent and not algorithm.stochastic
    if check_descent and problem.smoothness is None:
        logger.warning("Descent check disabled: no smoothness constant for %s", problem.name)
        check_descent = False

    log = TelemetryLog(config=config.to_dict(), worker_uploads=[0] * num_workers)
    history = deque([params], maxlen=depth + 1)
    logger.info(Messages.RUN_STARTED.value.format(
        algorithm=algorithm.value, problem=problem.name, workers=num_workers,
        dimension=params.size, iterations=config.max_iterations))

    uploads = cumulative_uploads = cumulative_bits = 0
    diff_sq = quant_error = 0.0
    pending_bound: Optional[Tuple[float, float]] = None
    iteration = 0
    while True:
        evaluated = [loss_and_gradient(model, params, shard) for shard in shards]
        loss_value = float(sum(value for value, _ in evaluated))
        if not math.isfinite(loss_value) or abs(loss_value) > DIVERGENCE_LIMIT:
            message = Errors.DIVERGED.value.format(iteration=iteration, loss=loss_value)
            logger.error(message)
            raise DivergenceError(message, iteration, loss_value)
        full_gradient = np.sum([g for _, g in evaluated], axis=0)

        if pending_bound is not None:
            previous_loss, bound = pending_bound
            if loss_value - previous_loss > bound + DESCENT_SLACK:
                log.descent_violations += 1
                logger.warning("Descent bound violated at iteration %d: change %.3e > bound %.3e",
                               iteration, loss_value - previous_loss, bound)

        residual = None if problem.optimal_loss is None else loss_value - problem.optimal_loss
        log.append(TelemetryRecord(
            iteration=iteration,
            loss=loss_value,
            residual=residual,
            grad_norm=float(np.linalg.norm(full_gradient)),
            quant_error=quant_error,
            uploads=uploads,
            cumulative_uploads=cumulative_uploads,
            cumulative_bits=cumulative_bits,
            lyapunov=None if residual is None else lyapunov(list(history)[::-1], residual, skip_cfg),
            clocks=tuple(state.clock for state in workers),
        ))
        if iteration % config.log_every == 0:
            logger.debug("k=%d loss=%.6e uploads=%d bits=%d", iteration, loss_value,
                         cumulative_uploads, cumulative_bits)

        if config.target_residual is not None and residual is not None \
                and residual <= config.target_residual:
            logger.info(Messages.TARGET_REACHED.value.format(residual=residual, iteration=iteration))
            break
        if iteration >= config.max_iterations:
            break

        rounds = [
            worker_round(worker_id, params, workers[worker_id], config, shards[worker_id], model,
                         iteration=iteration, diff_sq=diff_sq, sampler=samplers[worker_id],
                         local_gradient=evaluated[worker_id][1])
            for worker_id in range(num_workers)
        ]
        previous_stored = [state.stored_quantization for state in workers]
        messages = [r.message for r in rounds if r.uploaded]
        server = server_apply(server, messages, config.alpha)
        workers = [r.state for r in rounds]
        _check_sync(server, workers, iteration)

        uploads = len(messages)
        cumulative_uploads += uploads
        cumulative_bits += sum(m.accounted_bits for m in messages)
        for m in messages:
            log.worker_uploads[m.worker_id] += 1
        if algorithm.quantized:
            round_error = np.sum([r.gradient - r.candidate for r in rounds], axis=0)
            quant_error = float(np.linalg.norm(round_error))

        step = server.params - params
        if check_descent:
            skipped_gap = np.zeros(params.size)
            error = np.zeros(params.size)
            for worker_id, r in enumerate(rounds):
                error += r.gradient - r.candidate
                if not r.uploaded:
                    skipped_gap += previous_stored[worker_id] - r.candidate
            bound = _descent_gap(float(full_gradient @ full_gradient), skipped_gap, error,
                                 step, config.alpha, problem.smoothness)
            pending_bound = (loss_value, bound)

        diff_sq = float(step @ step)
        params = server.params
        history.append(params)
        iteration += 1

    if problem.test_features is not None and not isinstance(model, QuadraticModel):
        log.final_accuracy = accuracy(model, params, problem.test_features, problem.test_labels)
    logger.info(Messages.RUN_FINISHED.value.format(
        algorithm=algorithm.value, iterations=log.iterations,
        uploads=log.total_uploads, bits=log.total_bits))
    return params, log


@dataclass(frozen=True)
class RecipeDiagnostics:
    """Result of checking stepsize and xi against the linear-rate conditions"""
    xi_sum: float
    xi_bound: float
    alpha: float
    alpha_bound: float
    simple_choice: bool

    @property
    def literal(self) -> bool:
        tol = 1.0 + BOUNDARY_RTOL
        return self.xi_sum <= self.xi_bound * tol and self.alpha <= self.alpha_bound * tol

    @property
    def passed(self) -> bool:
        return self.literal or self.simple_choice

    @property
    def message(self) -> str:
        if self.literal:
            return Messages.RECIPE_PASS.value
        if self.simple_choice:
            return Messages.RECIPE_SIMPLE.value
        return Messages.RECIPE_WARN.value


def validate_recipe(config: RunConfig, smoothness: float,
                    rho1: float = 0.5, rho2: float = 1.0) -> RecipeDiagnostics:
    """Advisory check of alpha and xi; never raises for out-of-range parameters"""
    if not smoothness > 0.0:
        raise ConfigError(Errors.INVALID_VALUE.value.format(key="smoothness", value=smoothness))
    first = (1.0 - rho1) / (4.0 * (1.0 + rho2))
    second = 1.0 / (2.0 * (1.0 + 1.0 / rho2))
    xi_sum = float(sum(config.xi))
    alpha_bound = max(0.0, (2.0 / smoothness) * (min(first, second) - xi_sum))

    tol = 1.0 + BOUNDARY_RTOL
    depth = config.depth
    simple = (all(x <= tol / (16.0 * depth) for x in config.xi)
              and config.alpha <= tol / (8.0 * smoothness))
    diagnostics = RecipeDiagnostics(xi_sum, min(first, second), config.alpha, alpha_bound, simple)
    if diagnostics.passed:
        logger.info(diagnostics.message)
    else:
        logger.warning("%s: sum(xi)=%.4g, alpha=%.4g, L=%.4g", diagnostics.message,
                       xi_sum, config.alpha, smoothness)
    return diagnostics


def reference_optimum(problem: Problem, iterations: int = REFERENCE_ITERATIONS,
                      alpha: Optional[float] = None, cache_dir: Optional[Path] = None,
                      key: Optional[str] = None) -> float:
    """f(theta*) estimated by a long gradient descent run, cached as JSON under `key`"""
    if isinstance(problem.model, MLPModel):
        raise UnsupportedModelError(Errors.UNSUPPORTED_MODEL.value.format(
            operation="reference_optimum", model=problem.model.kind.value))

    cache_file = None if cache_dir is None else Path(cache_dir).expanduser() / REFERENCE_CACHE_FILENAME
    cache: Dict[str, float] = {}
    if cache_file is not None and cache_file.exists():
        try:
            with open(cache_file, "r", encoding="utf-8") as f:
                cache = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("Ignoring unreadable reference cache %s: %s", cache_file, e)
            cache = {}
        if key is not None and key in cache:
            return float(cache[key])

    if alpha is None:
        alpha = 1.0 / sum(smoothness_constant(problem.model, shard) for shard in problem.shards)
    logger.info("Computing reference optimum for %s with %d iterations", problem.name, iterations)
    params = problem.model.initial_params(0)
    best = total_loss(problem.model, params, list(problem.shards))
    for _ in range(iterations):
        grad = np.sum([gradient(problem.model, params, s) for s in problem.shards], axis=0)
        if float(grad @ grad) == 0.0:
            break
        params = params - alpha * grad
        best = min(best, total_loss(problem.model, params, list(problem.shards)))

    if cache_file is not None and key is not None:
        cache[key] = best
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        with open(cache_file, "w", encoding="utf-8") as f:
            json.dump(cache, f, indent=2, sort_keys=True)
    return best
