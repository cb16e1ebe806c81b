"""
Telemetry and run analysis.
Holds the per-iteration records of a run, their CSV form and the checks that
are computed from them: Lyapunov values, bit accounting, linear-rate fits and
per-worker upload bounds.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from laq_sim.constants import (
    FLOAT_BITS, RADIUS_BITS, MIN_RATE_BURN_IN, MIN_RATE_POINTS, BOUNDARY_RTOL,
    Algorithm, Errors
)
from laq_sim.criterion import SkipConfig
from laq_sim.exceptions import ConfigError

logger = logging.getLogger(__name__)

RECORD_FIELDS: Tuple[str, ...] = (
    "iteration", "loss", "residual", "grad_norm", "quant_error", "uploads",
    "cumulative_uploads", "cumulative_bits", "lyapunov", "clocks",
)
RUN_KEYS: Tuple[str, ...] = ("worker_uploads", "descent_violations", "final_accuracy")


@dataclass
class TelemetryRecord:
    """Snapshot of one iteration; uploads and quant_error (norm of the summed quantization
    error) belong to the round that produced theta^k"""
    iteration: int
    loss: float
    residual: Optional[float] = None
    grad_norm: float = 0.0
    quant_error: float = 0.0
    uploads: int = 0
    cumulative_uploads: int = 0
    cumulative_bits: int = 0
    lyapunov: Optional[float] = None
    clocks: Tuple[int, ...] = ()

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["clocks"] = list(self.clocks)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'TelemetryRecord':
        return cls(
            iteration=int(data["iteration"]),
            loss=float(data["loss"]),
            residual=None if data.get("residual") is None else float(data["residual"]),
            grad_norm=float(data.get("grad_norm", 0.0)),
            quant_error=float(data.get("quant_error", 0.0)),
            uploads=int(data.get("uploads", 0)),
            cumulative_uploads=int(data.get("cumulative_uploads", 0)),
            cumulative_bits=int(data.get("cumulative_bits", 0)),
            lyapunov=None if data.get("lyapunov") is None else float(data["lyapunov"]),
            clocks=tuple(int(c) for c in data.get("clocks", ())),
        )


@dataclass
class TelemetryLog:
    """Everything a run reports: config echo, one record per iteration, upload counts"""
    config: Dict[str, str] = field(default_factory=dict)
    records: List[TelemetryRecord] = field(default_factory=list)
    worker_uploads: List[int] = field(default_factory=list)
    descent_violations: int = 0
    final_accuracy: Optional[float] = None

    @property
    def iterations(self) -> int:
        """Number of executed iterations (records minus the k = 0 snapshot)"""
        return max(0, len(self.records) - 1)

    @property
    def total_uploads(self) -> int:
        return self.records[-1].cumulative_uploads if self.records else 0

    @property
    def total_bits(self) -> int:
        return self.records[-1].cumulative_bits if self.records else 0

    @property
    def residuals(self) -> List[Optional[float]]:
        return [r.residual for r in self.records]

    def append(self, record: TelemetryRecord) -> None:
        self.records.append(record)

    def to_dict(self) -> Dict:
        return {
            "config": dict(self.config),
            "records": [r.to_dict() for r in self.records],
            "worker_uploads": list(self.worker_uploads),
            "descent_violations": self.descent_violations,
            "final_accuracy": self.final_accuracy,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'TelemetryLog':
        return cls(
            config=dict(data.get("config", {})),
            records=[TelemetryRecord.from_dict(r) for r in data.get("records", [])],
            worker_uploads=[int(u) for u in data.get("worker_uploads", [])],
            descent_violations=int(data.get("descent_violations", 0)),
            final_accuracy=data.get("final_accuracy"),
        )


def lyapunov(params_history: Sequence[np.ndarray], residual: Optional[float],
             cfg: SkipConfig) -> float:
    """V = residual + sum_d (sum_{j>=d} xi_j / alpha) ||theta^{k+1-d} - theta^{k-d}||^2.
    `params_history` is newest first; missing snapshots count as zero differences"""
    if residual is None:
        raise ConfigError(Errors.OPTIMUM_UNAVAILABLE.value)
    value = float(residual)
    if cfg.depth == 0:
        return value
    weights = np.cumsum(cfg.xi[::-1])[::-1] / cfg.alpha
    for d in range(min(cfg.depth, len(params_history) - 1)):
        step = np.asarray(params_history[d]) - np.asarray(params_history[d + 1])
        value += float(weights[d]) * float(step @ step)
    return value


def upload_bits(algorithm: Algorithm, p: int, bits: int) -> int:
    """Bits accounted for a single upload"""
    if algorithm.quantized:
        return RADIUS_BITS + bits * p
    return FLOAT_BITS * p


def bits_accounting(algorithm: Algorithm, p: int, bits: int, uploads: int) -> int:
    """Total bits for `uploads` uploads of a p-dimensional gradient"""
    return uploads * upload_bits(algorithm, p, bits)


def recomputed_bits(log: TelemetryLog, algorithm: Algorithm, p: int, bits: int) -> List[int]:
    """Cumulative bits rebuilt from the per-round upload counts alone"""
    per_upload = upload_bits(algorithm, p, bits)
    return [int(v) for v in np.cumsum([r.uploads for r in log.records]) * per_upload]


def rate_burn_in(depth: int) -> int:
    """Leading iterations left out of rate fits"""
    return max(depth, MIN_RATE_BURN_IN)


def fit_linear_rate(residuals: Sequence[float]) -> Tuple[float, float]:
    """Least-squares fit of log residual against iteration; returns (rate, R^2)"""
    values = np.asarray(residuals, dtype=np.float64)
    if values.size < MIN_RATE_POINTS:
        raise ConfigError(Errors.TOO_FEW_RESIDUALS.value.format(
            needed=MIN_RATE_POINTS, actual=values.size))
    bad = values[~(values > 0.0)]
    if bad.size:
        raise ConfigError(Errors.NON_POSITIVE_RESIDUAL.value.format(value=float(bad[0])))

    steps = np.arange(values.size, dtype=np.float64)
    logs = np.log(values)
    if np.ptp(logs) == 0.0:
        return 1.0, 1.0
    fit = stats.linregress(steps, logs)
    return math.exp(fit.slope), float(fit.rvalue) ** 2


@dataclass(frozen=True)
class UploadBound:
    """Per-worker upload count against its frequency bound"""
    worker_id: int
    depth: int
    bound: int
    actual: int

    @property
    def passed(self) -> bool:
        return self.actual <= self.bound


def clearance_depth(smoothness: float, cfg: SkipConfig) -> int:
    """Largest d with L_m^2 <= xi_d / (3 alpha^2 M^2 D), or 0"""
    if cfg.depth == 0:
        return 0
    scale = 3.0 * cfg.alpha ** 2 * cfg.num_workers ** 2 * cfg.depth
    cleared = 0
    for d, xi in enumerate(cfg.xi, start=1):
        if smoothness ** 2 <= (xi / scale) * (1.0 + BOUNDARY_RTOL):
            cleared = d
    return cleared


def prop1_check(log: TelemetryLog, worker_smoothness: Sequence[float],
                cfg: SkipConfig) -> List[UploadBound]:
    """Compare each worker's uploads with ceil(k/(d_m+1)) + 1"""
    if not cfg.is_monotone:
        raise ConfigError(Errors.NON_MONOTONE_XI.value.format(xi=cfg.xi))
    if len(worker_smoothness) != len(log.worker_uploads):
        raise ConfigError(Errors.DIMENSION_MISMATCH.value.format(
            expected=len(log.worker_uploads), actual=len(worker_smoothness)))
    rounds = log.iterations
    results = []
    for worker_id, (smoothness, actual) in enumerate(zip(worker_smoothness, log.worker_uploads)):
        depth = clearance_depth(smoothness, cfg)
        bound = math.ceil(rounds / (depth + 1)) + 1
        results.append(UploadBound(worker_id, depth, bound, actual))
    return results


def max_consecutive_skips(log: TelemetryLog) -> int:
    """Longest run of skipped rounds by any worker, read from the clock snapshots"""
    return max((max(r.clocks, default=0) for r in log.records), default=0)


def staleness_ok(log: TelemetryLog, max_staleness: int) -> bool:
    return max_consecutive_skips(log) <= max_staleness + 1


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return " ".join(str(v) for v in value)
    return str(value)


def export_csv(log: TelemetryLog, path: Union[str, Path]) -> Path:
    """Write config and run totals as `# key=value` lines, then one row per record"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        for key, value in log.config.items():
            f.write(f"# {key}={value}\n")
        f.write(f"# worker_uploads={_format_cell(log.worker_uploads)}\n")
        f.write(f"# descent_violations={log.descent_violations}\n")
        f.write(f"# final_accuracy={_format_cell(log.final_accuracy)}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for record in log.records:
            writer.writerow([_format_cell(getattr(record, name)) for name in RECORD_FIELDS])
    logger.debug("Wrote %d telemetry rows to %s", len(log.records), path)
    return path


def read_csv(path: Union[str, Path]) -> TelemetryLog:
    """Parse a file written by export_csv"""
    log = TelemetryLog()
    comments: Dict[str, str] = {}
    with open(path, "r", newline="", encoding="utf-8") as f:
        lines = []
        for line in f:
            if line.startswith("# "):
                key, _, value = line[2:].rstrip("\n").partition("=")
                comments[key] = value
            else:
                lines.append(line)

    for key, value in comments.items():
        if key not in RUN_KEYS:
            log.config[key] = value
    log.worker_uploads = [int(v) for v in comments.get("worker_uploads", "").split()]
    log.descent_violations = int(comments.get("descent_violations", "0") or 0)
    accuracy = comments.get("final_accuracy", "")
    log.final_accuracy = float(accuracy) if accuracy else None

    for row in csv.DictReader(lines):
        data = dict(row)
        for name in ("residual", "lyapunov"):
            if data[name] == "":
                data[name] = None
        data["clocks"] = [int(c) for c in data["clocks"].split()]
        log.append(TelemetryRecord.from_dict(data))
    return log


def _aligned(rows: Sequence[Tuple[str, ...]]) -> List[str]:
    """Left-align the first column, right-align the rest, rule under the header"""
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(width) if i == 0 else cell.rjust(width)
                       for i, (cell, width) in enumerate(zip(row, widths)))
             for row in rows]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return lines


def format_summary(runs: Sequence[Tuple[str, TelemetryLog]]) -> str:
    """Aligned table with iterations, uploads, bits and accuracy per run, followed by
    each run's upload count per worker"""
    totals = [("Algorithm", "Iteration #", "Communication #", "Bit #", "Accuracy")]
    per_worker = [("Algorithm", "Uploads per worker")]
    for label, log in runs:
        accuracy = "-" if log.final_accuracy is None else f"{log.final_accuracy:.4f}"
        totals.append((label, str(log.iterations), str(log.total_uploads),
                       f"{log.total_bits:.3e}", accuracy))
        per_worker.append((label, " ".join(str(u) for u in log.worker_uploads) or "-"))
    return "\n".join(_aligned(totals) + [""] + _aligned(per_worker)) + "\n"
