"""
Skip-communication criterion.
Each worker keeps a small state machine: the last uploaded quantization, its
error, a staleness clock and the recent history of squared parameter
differences. A round is skipped when the quantized innovation is small
compared with that history and the clock still allows it.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence, Tuple

import numpy as np

from laq_sim.constants import DEFAULT_XI_TOTAL, Errors
from laq_sim.exceptions import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SkipConfig:
    """Parameters of the skip rule"""
    alpha: float
    num_workers: int
    xi: Tuple[float, ...] = ()
    max_staleness: int = 0

    def __post_init__(self):
        object.__setattr__(self, "xi", tuple(float(x) for x in self.xi))
        if not self.alpha > 0.0:
            raise ConfigError(Errors.INVALID_VALUE.value.format(key="alpha", value=self.alpha))
        if self.num_workers < 1:
            raise ConfigError(Errors.INVALID_VALUE.value.format(
                key="num_workers", value=self.num_workers))
        if self.max_staleness < 0:
            raise ConfigError(Errors.INVALID_VALUE.value.format(
                key="max_staleness", value=self.max_staleness))
        if any(not x >= 0.0 for x in self.xi):
            raise ConfigError(Errors.INVALID_VALUE.value.format(key="xi", value=self.xi))
        if self.depth > self.max_staleness:
            raise ConfigError(
                f"History depth D={self.depth} must not exceed max_staleness={self.max_staleness}")

    @property
    def depth(self) -> int:
        """D, the number of parameter differences the rule looks back over"""
        return len(self.xi)

    @property
    def is_monotone(self) -> bool:
        return all(a >= b for a, b in zip(self.xi, self.xi[1:]))


def recipe_xi(depth: int) -> Tuple[float, ...]:
    """xi_d = 1/(16D), the simple choice satisfying the linear-rate conditions"""
    return tuple(1.0 / (16 * depth) for _ in range(depth))


def experiment_xi(depth: int, total: float = DEFAULT_XI_TOTAL) -> Tuple[float, ...]:
    """xi_d = 0.8/D, the setting used in the published experiments"""
    return tuple(total / depth for _ in range(depth))


@dataclass(frozen=True, eq=False)
class WorkerState:
    """Per-worker memory of the lazy rule"""
    stored_quantization: np.ndarray
    stored_error_sq: float = 0.0
    clock: int = 0
    diff_history: Tuple[float, ...] = field(default=())

    @classmethod
    def initial(cls, dimension: int, depth: int) -> 'WorkerState':
        """All-zero stored quantization and history"""
        return cls(np.zeros(dimension, dtype=np.float64), 0.0, 0, (0.0,) * depth)


def record_parameter_change(state: WorkerState, diff_sq: float) -> WorkerState:
    """Shift ||theta^k - theta^{k-1}||^2 into the history; runs every round, skip or not.
    diff_history[0] is the newest (d = 1) entry"""
    if not state.diff_history:
        return state
    history = (float(diff_sq),) + state.diff_history[:-1]
    return replace(state, diff_history=history)


def rhs_threshold(state: WorkerState, cfg: SkipConfig, current_error_sq: float) -> float:
    """Right-hand side of the skip inequality"""
    if len(state.diff_history) != cfg.depth:
        raise ConfigError(Errors.DIMENSION_MISMATCH.value.format(
            expected=cfg.depth, actual=len(state.diff_history)))
    weighted = float(np.dot(cfg.xi, state.diff_history)) if cfg.depth else 0.0
    scale = 1.0 / (cfg.alpha ** 2 * cfg.num_workers ** 2)
    return scale * weighted + 3.0 * (current_error_sq + state.stored_error_sq)


def should_skip(candidate_delta_sq: float, state: WorkerState, cfg: SkipConfig,
                current_error_sq: float) -> bool:
    """True when the worker may reuse its last upload this round"""
    if state.clock > cfg.max_staleness:
        return False
    return candidate_delta_sq <= rhs_threshold(state, cfg, current_error_sq)


def on_upload(state: WorkerState, new_quantization: np.ndarray,
              new_error_sq: float) -> WorkerState:
    """Store the uploaded quantization and reset the clock"""
    return replace(state, stored_quantization=new_quantization,
                   stored_error_sq=float(new_error_sq), clock=0)


def on_skip(state: WorkerState) -> WorkerState:
    """Keep the stored quantization and advance the clock"""
    return replace(state, clock=state.clock + 1)


def upload_history_ok(upload_rounds: Sequence[int], max_staleness: int) -> bool:
    """No run of consecutive skipped rounds longer than max_staleness + 1"""
    return all(b - a - 1 <= max_staleness + 1 for a, b in zip(upload_rounds, upload_rounds[1:]))
