"""
Constants for the LAQ simulator.
"""

from enum import Enum, IntEnum
from typing import Dict, Final, Tuple

# File paths and directories
DEFAULT_CACHE_DIR: Final[str] = "~/.cache/laq_sim"
DEFAULT_OUTPUT_DIR: Final[str] = "runs"
DEFAULT_SETTINGS_FILE: Final[str] = "~/.laq_sim_settings.json"
CACHE_DIR_ENV: Final[str] = "LAQ_SIM_CACHE_DIR"

# Output formats
CSV_EXTENSION: Final[str] = ".csv"
SUMMARY_FILENAME: Final[str] = "summary.txt"
REFERENCE_CACHE_FILENAME: Final[str] = "reference_optimum.json"

# Wire format: worker_id u16, iteration u32, bits u8, dimension u32, then radius binary32
HEADER_FORMAT: Final[str] = "<HIBI"
RADIUS_FORMAT: Final[str] = "<f"
MIN_BITS: Final[int] = 1
MAX_BITS: Final[int] = 32
RADIUS_BITS: Final[int] = 32
FLOAT_BITS: Final[int] = 32

# IDX format
IDX_IMAGE_MAGIC: Final[int] = 2051
IDX_LABEL_MAGIC: Final[int] = 2049
MNIST_CLASSES: Final[int] = 10
MNIST_PIXEL_SCALE: Final[float] = 255.0

# Model defaults
DEFAULT_LAMBDA: Final[float] = 0.01
DEFAULT_HIDDEN: Final[int] = 200
MNIST_FEATURES: Final[int] = 784

# Algorithm defaults (MNIST experiments)
DEFAULT_ALPHA: Final[float] = 0.02
DEFAULT_SGD_ALPHA: Final[float] = 0.008
DEFAULT_BITS: Final[int] = 3
DEFAULT_MLP_BITS: Final[int] = 8
DEFAULT_D: Final[int] = 10
DEFAULT_XI_TOTAL: Final[float] = 0.8
DEFAULT_MAX_STALENESS: Final[int] = 100
DEFAULT_WORKERS: Final[int] = 10
DEFAULT_ITERATIONS: Final[int] = 1000
DEFAULT_MINIBATCH: Final[int] = 500
DEFAULT_SEED: Final[int] = 0
DEFAULT_LOG_EVERY: Final[int] = 100

# Synthetic problem defaults
DEFAULT_DIMENSION: Final[int] = 20
DEFAULT_MU: Final[float] = 1.0
DEFAULT_SAMPLES: Final[int] = 500

# Numerical guards
DIVERGENCE_LIMIT: Final[float] = 1e12
POWER_ITERATION_TOL: Final[float] = 1e-9
POWER_ITERATION_MAX: Final[int] = 100_000
DESCENT_SLACK: Final[float] = 1e-9
FINITE_DIFF_STEP: Final[float] = 1e-6
REFERENCE_ITERATIONS: Final[int] = 100_000
MIN_RATE_BURN_IN: Final[int] = 20
MIN_RATE_POINTS: Final[int] = 10
BOUNDARY_RTOL: Final[float] = 1e-12


class Algorithm(Enum):
    """Training algorithms"""
    GD = "gd"
    QGD = "qgd"
    LAG = "lag"
    LAQ = "laq"
    SGD = "sgd"
    SLAQ = "slaq"

    @property
    def quantized(self) -> bool:
        return self in (Algorithm.QGD, Algorithm.LAQ, Algorithm.SLAQ)

    @property
    def lazy(self) -> bool:
        return self in (Algorithm.LAG, Algorithm.LAQ, Algorithm.SLAQ)

    @property
    def stochastic(self) -> bool:
        return self in (Algorithm.SGD, Algorithm.SLAQ)


class ModelKind(Enum):
    """Model families"""
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"
    MLP = "mlp"


class PartitionMode(Enum):
    """Data partition modes"""
    UNIFORM = "uniform"
    HETEROGENEOUS = "heterogeneous"


class VerifyTarget(Enum):
    """Property suites runnable from the command line"""
    CODEC = "codec"
    GRADIENTS = "gradients"
    REDUCTIONS = "reductions"
    PROP1 = "prop1"
    RATE = "rate"
    STALENESS = "staleness"
    DETERMINISM = "determinism"


class ExitCode(IntEnum):
    """Process exit codes"""
    SUCCESS = 0
    FAILURE = 1
    CONFIG_ERROR = 2
    DIVERGENCE = 3
    DATA_ERROR = 4


class Messages(Enum):
    """Status message constants"""
    RUN_STARTED = "Running {algorithm} on {problem}: M={workers}, p={dimension}, K={iterations}"
    RUN_FINISHED = "{algorithm} finished after {iterations} iterations, {uploads} uploads, {bits} bits"
    TARGET_REACHED = "Loss residual {residual:.3e} reached target at iteration {iteration}"
    RECIPE_PASS = "Parameters satisfy the linear-rate conditions"
    RECIPE_SIMPLE = "Parameters lie within the simple choice xi_d <= 1/(16D), alpha <= 1/(8L)"
    RECIPE_WARN = "Parameters exceed the linear-rate conditions (allowed, no rate guarantee)"
    DATASET_OK = "{name}: {path} ok"
    FETCH_HINT = "Dataset {name} not found in {cache_dir}; run `laq-sim dataset fetch {name}`"


class Errors(Enum):
    """Error message templates"""
    DIMENSION_MISMATCH = "Dimension mismatch: expected {expected}, got {actual}"
    BITS_OUT_OF_RANGE = "Bits per coordinate must lie in [1, 32], got {bits}"
    CODE_TOO_WIDE = "Code {code} does not fit in {bits} bits"
    PACKED_LENGTH = "Packed length {actual} does not match ceil({p}*{bits}/8) = {expected}"
    NONZERO_PADDING = "Nonzero padding bits in final byte"
    TRUNCATED_MESSAGE = "Truncated message: {actual} bytes, need at least {expected}"
    MESSAGE_LENGTH = "Declared dimension {dimension} implies {expected} bytes, buffer has {actual}"
    RADIUS_OVERFLOW = "Radius {radius} is not representable as binary32"
    DUPLICATE_WORKER = "Duplicate message from worker {worker_id} in iteration {iteration}"
    NON_FINITE = "Non-finite values in {what}"
    UNSUPPORTED_MODEL = "Operation {operation} does not support model {model}"
    SHAPE_MISMATCH = "Shape mismatch in {what}: expected {expected}, got {actual}"
    BAD_MAGIC = "Bad IDX magic number in {path}: expected {expected}, got {actual}"
    TRUNCATED_FILE = "Truncated file {path}: expected {expected} bytes of payload, got {actual}"
    EMPTY_DATASET = "Dataset {path} contains no samples"
    LABEL_RANGE = "Label {label} out of range [0, {classes}) in {path}"
    MALFORMED_LINE = "{path}:{line}: malformed entry {token!r}"
    INDEX_RANGE = "{path}:{line}: feature index {index} outside [1, {feature_dim}]"
    TOO_MANY_WORKERS = "Cannot partition {samples} samples across {workers} workers"
    INFEASIBLE_SPECTRUM = "Infeasible spectrum: each L_m must be >= mu/M = {floor}, got {value}"
    NON_MONOTONE_XI = "xi must be non-increasing, got {xi}"
    OPTIMUM_UNAVAILABLE = "Lyapunov value requires a known optimum"
    TOO_FEW_RESIDUALS = "Rate fit needs at least {needed} residuals, got {actual}"
    NON_POSITIVE_RESIDUAL = "Rate fit window contains non-positive residual {value}"
    DIVERGED = "Divergence at iteration {iteration}: loss = {loss}"
    OUT_OF_SYNC = "Server and worker {worker_id} disagree on stored quantization at iteration {iteration}"
    UNKNOWN_KEY = "Unknown key {key!r} in section [{section}] of {path}"
    UNKNOWN_SECTION = "Unknown section [{section}] in {path}"
    INVALID_VALUE = "Invalid value for {key}: {value!r}"
    CHECKSUM_MISMATCH = "Checksum mismatch for {path}: expected {expected}, got {actual}"
    UNKNOWN_DATASET = "Unknown dataset {name!r}"
    FETCH_UNSUPPORTED = "Dataset {name} has no pinned download; place it in {cache_dir} manually"


# Dataset registry: (file name, SHA-256 of the file as distributed). An empty digest means check-only.
MNIST_BASE_URL: Final[str] = "https://ossci-datasets.s3.amazonaws.com/mnist/"
DIGEST_ALGORITHM: Final[str] = "sha256"
DATASETS: Final[Dict[str, Dict[str, Tuple[str, str]]]] = {
    "mnist": {
        "train-images": ("train-images-idx3-ubyte.gz",
                         "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609"),
        "train-labels": ("train-labels-idx1-ubyte.gz",
                         "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c"),
        "test-images": ("t10k-images-idx3-ubyte.gz",
                        "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6"),
        "test-labels": ("t10k-labels-idx1-ubyte.gz",
                        "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaaeb9d6e7ad3ed0d0"),
    },
    "ijcnn1": {
        "train": ("ijcnn1", ""),
        "test": ("ijcnn1.t", ""),
    },
    "covtype": {
        "train": ("covtype", ""),
    },
}
LIBSVM_FEATURES: Final[Dict[str, int]] = {"ijcnn1": 22, "covtype": 54}
SYNTHETIC_DATASETS: Final[Tuple[str, ...]] = ("synthetic-logistic", "synthetic-quadratic")
