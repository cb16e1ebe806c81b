"""
Dataset loading, partitioning and synthetic problem generation.
Handles MNIST IDX files (optionally gzip-compressed), LIBSVM text files, the
split of a dataset across workers and quadratic/logistic problems with known
constants.
"""

import gzip
import hashlib
import logging
import math
import os
import shutil
import struct
import tempfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from laq_sim.constants import (
    IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, MNIST_CLASSES, MNIST_PIXEL_SCALE,
    DATASETS, DIGEST_ALGORITHM, LIBSVM_FEATURES, MNIST_BASE_URL, PartitionMode, Errors
)
from laq_sim.exceptions import ConfigError, DataError
from laq_sim.losses import DataShard, QuadraticShard

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Dense features with one-hot labels"""
    features: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0], self.num_classes):
            raise DataError(Errors.SHAPE_MISMATCH.value.format(
                what=f"dataset {self.name}", expected=("N x F", f"N x {self.num_classes}"),
                actual=(self.features.shape, self.labels.shape)))
        if not np.all(np.isfinite(self.features)):
            raise DataError(Errors.NON_FINITE.value.format(what=f"features of {self.name}"))
        if not (np.all((self.labels == 0) | (self.labels == 1))
                and np.all(self.labels.sum(axis=1) == 1)):
            raise DataError(f"Labels of {self.name} are not one-hot")

    @property
    def num_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: np.ndarray, name: Optional[str] = None) -> 'Dataset':
        return Dataset(self.features[indices], self.labels[indices],
                       name or self.name, self.num_classes)


def one_hot(classes: np.ndarray, num_classes: int) -> np.ndarray:
    encoded = np.zeros((classes.size, num_classes))
    encoded[np.arange(classes.size), classes] = 1.0
    return encoded


def _read_idx(path: PathLike, magic: int, ndims: int) -> Tuple[Tuple[int, ...], np.ndarray]:
    """Return the dimension header and the uint8 payload of an IDX file"""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError as e:
        raise DataError(f"File not found: {path}") from e
    except (OSError, EOFError) as e:
        raise DataError(f"Cannot read {path}: {e}") from e

    header = 4 + 4 * ndims
    if len(raw) < header:
        raise DataError(Errors.TRUNCATED_FILE.value.format(
            path=path, expected=header, actual=len(raw)))
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise DataError(Errors.BAD_MAGIC.value.format(path=path, expected=magic, actual=found))

    dims = struct.unpack_from(">" + "I" * ndims, raw, 4)
    expected = math.prod(dims)
    payload = len(raw) - header
    if payload < expected:
        raise DataError(Errors.TRUNCATED_FILE.value.format(
            path=path, expected=expected, actual=payload))
    if payload > expected:
        logger.warning("%s has %d trailing bytes after the declared payload", path, payload - expected)
    return dims, np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header)


def load_mnist_idx(images_path: PathLike, labels_path: PathLike) -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1], labels one-hot over 10 classes"""
    (count, rows, cols), pixels = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    (label_count,), labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if count == 0:
        raise DataError(Errors.EMPTY_DATASET.value.format(path=images_path))
    if label_count != count:
        raise DataError(f"{images_path} holds {count} images but {labels_path} holds {label_count} labels")
    if labels.size and int(labels.max()) >= MNIST_CLASSES:
        raise DataError(Errors.LABEL_RANGE.value.format(
            label=int(labels.max()), classes=MNIST_CLASSES, path=labels_path))

    features = pixels.reshape(count, rows * cols).astype(np.float64) / MNIST_PIXEL_SCALE
    logger.info("Loaded %d IDX images of %dx%d from %s", count, rows, cols, images_path)
    return Dataset(features, one_hot(labels.astype(np.int64), MNIST_CLASSES),
                   Path(images_path).name, MNIST_CLASSES)


def load_libsvm(path: PathLike, feature_dim: int) -> Dataset:
    """Parse `label idx:val ...` lines with 1-based indices into a dense dataset.
    Classes are assigned in sorted label order; at least two classes are always allocated"""
    path = Path(path)
    rows: List[Dict[int, float]] = []
    raw_labels: List[float] = []
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e

    with handle:
        for line_no, line in enumerate(handle, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            tokens = text.split()
            try:
                label = float(tokens[0])
            except ValueError:
                raise DataError(Errors.MALFORMED_LINE.value.format(
                    path=path, line=line_no, token=tokens[0])) from None

            row: Dict[int, float] = {}
            for token in tokens[1:]:
                index_text, sep, value_text = token.partition(":")
                try:
                    if not sep:
                        raise ValueError(token)
                    index, value = int(index_text), float(value_text)
                except ValueError:
                    raise DataError(Errors.MALFORMED_LINE.value.format(
                        path=path, line=line_no, token=token)) from None
                if not math.isfinite(value) or not math.isfinite(label):
                    raise DataError(Errors.MALFORMED_LINE.value.format(
                        path=path, line=line_no, token=token))
                if not 1 <= index <= feature_dim:
                    raise DataError(Errors.INDEX_RANGE.value.format(
                        path=path, line=line_no, index=index, feature_dim=feature_dim))
                if index in row:
                    logger.warning("%s:%d: duplicate feature index %d, keeping the last value",
                                   path, line_no, index)
                row[index] = value
            rows.append(row)
            raw_labels.append(label)

    if not rows:
        raise DataError(Errors.EMPTY_DATASET.value.format(path=path))

    classes = sorted(set(raw_labels))
    class_of = {value: i for i, value in enumerate(classes)}
    features = np.zeros((len(rows), feature_dim))
    for i, row in enumerate(rows):
        for index, value in row.items():
            features[i, index - 1] = value
    num_classes = max(2, len(classes))
    label_ids = np.array([class_of[v] for v in raw_labels], dtype=np.int64)
    logger.info("Loaded %d LIBSVM rows with %d classes from %s", len(rows), len(classes), path)
    return Dataset(features, one_hot(label_ids, num_classes), path.name, num_classes)


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    """Disjoint row-index ranges, one per worker"""
    shards: Tuple[np.ndarray, ...]
    mode: PartitionMode
    seed: int

    @property
    def num_workers(self) -> int:
        return len(self.shards)

    @property
    def sizes(self) -> List[int]:
        return [int(s.size) for s in self.shards]

    def apply(self, dataset: Dataset) -> List[DataShard]:
        """Build per-worker shards normalized by the global sample count"""
        total = float(dataset.num_samples)
        return [DataShard(dataset.features[idx], dataset.labels[idx], total) for idx in self.shards]


def partition(dataset: Union[Dataset, int], num_workers: int,
              mode: PartitionMode = PartitionMode.UNIFORM, seed: int = 0) -> PartitionPlan:
    """Shuffle rows under `seed` and split them across workers"""
    samples = dataset if isinstance(dataset, int) else dataset.num_samples
    if num_workers < 1 or num_workers > samples:
        raise ConfigError(Errors.TOO_MANY_WORKERS.value.format(samples=samples, workers=num_workers))

    rng = np.random.default_rng(seed)
    order = rng.permutation(samples)
    if mode == PartitionMode.UNIFORM:
        return PartitionPlan(tuple(np.array_split(order, num_workers)), mode, seed)

    # seeded Dirichlet shares with a floor of one sample per worker
    shares = rng.dirichlet(np.ones(num_workers))
    spare = samples - num_workers
    raw = shares * spare
    counts = np.floor(raw).astype(np.int64)
    leftover = spare - int(counts.sum())
    by_fraction = np.argsort(-(raw - counts), kind="stable")
    counts[by_fraction[:leftover]] += 1
    counts += 1
    bounds = np.cumsum(counts)[:-1]
    return PartitionPlan(tuple(np.split(order, bounds)), mode, seed)


@dataclass(frozen=True, eq=False)
class SyntheticQuadratic:
    """Per-worker quadratics sharing one eigenbasis, with known constants"""
    shards: Tuple[QuadraticShard, ...]
    smoothness: Tuple[float, ...]
    mu: float

    @property
    def dimension(self) -> int:
        return int(self.shards[0].b.size)

    @property
    def hessian(self) -> np.ndarray:
        return np.sum([s.A for s in self.shards], axis=0)

    @property
    def global_smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.hessian)[-1])

    @property
    def strong_convexity(self) -> float:
        return float(np.linalg.eigvalsh(self.hessian)[0])

    def optimum(self) -> np.ndarray:
        rhs = np.sum([s.b for s in self.shards], axis=0)
        return np.linalg.solve(self.hessian, rhs)

    def optimal_loss(self) -> float:
        theta = self.optimum()
        rhs = np.sum([s.b for s in self.shards], axis=0)
        return -0.5 * float(rhs @ theta)


def synthetic_quadratic(p: int, num_workers: int, smoothness: Sequence[float],
                        mu: float, seed: int = 0) -> SyntheticQuadratic:
    """A_m = U diag(s_m) U' with top eigenvalue exactly L_m and smallest mu/M"""
    if p < 1:
        raise ConfigError(Errors.INVALID_VALUE.value.format(key="p", value=p))
    if len(smoothness) != num_workers:
        raise ConfigError(Errors.DIMENSION_MISMATCH.value.format(
            expected=num_workers, actual=len(smoothness)))
    if not mu > 0.0:
        raise ConfigError(Errors.INVALID_VALUE.value.format(key="mu", value=mu))
    floor = mu / num_workers
    for value in smoothness:
        if not value >= floor:
            raise ConfigError(Errors.INFEASIBLE_SPECTRUM.value.format(floor=floor, value=value))

    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((p, p)))
    shards = []
    for top in smoothness:
        rest = np.linspace(max(floor, top / 2.0), floor, p - 1)
        spectrum = np.concatenate([[top], rest])
        A = (basis * spectrum) @ basis.T
        shards.append(QuadraticShard(0.5 * (A + A.T), rng.standard_normal(p)))
    return SyntheticQuadratic(tuple(shards), tuple(float(v) for v in smoothness), float(mu))


def synthetic_logistic(num_samples: int, num_features: int, num_classes: int = 2,
                       seed: int = 0, separation: float = 1.0) -> Dataset:
    """Gaussian class clusters around seeded centers"""
    if num_samples < 1 or num_features < 1 or num_classes < 2:
        raise ConfigError(Errors.INVALID_VALUE.value.format(
            key="synthetic_logistic", value=(num_samples, num_features, num_classes)))
    rng = np.random.default_rng(seed)
    centers = separation * rng.standard_normal((num_classes, num_features))
    classes = rng.integers(num_classes, size=num_samples)
    features = centers[classes] + rng.standard_normal((num_samples, num_features))
    return Dataset(features, one_hot(classes, num_classes), "synthetic-logistic", num_classes)


def train_test_split(dataset: Dataset, test_fraction: float = 0.1,
                     seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Seeded hold-out split for datasets without a separate test file"""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(Errors.INVALID_VALUE.value.format(key="test_fraction", value=test_fraction))
    order = np.random.default_rng(seed).permutation(dataset.num_samples)
    held = max(1, int(round(test_fraction * dataset.num_samples)))
    return dataset.subset(np.sort(order[held:])), dataset.subset(np.sort(order[:held]), dataset.name + "-test")


def dataset_dir(name: str, cache_dir: PathLike) -> Path:
    if name not in DATASETS:
        raise DataError(Errors.UNKNOWN_DATASET.value.format(name=name))
    return Path(cache_dir).expanduser() / name


def _resolve(directory: Path, filename: str) -> Optional[Path]:
    """Prefer the file as registered, fall back to its decompressed twin"""
    for candidate in (directory / filename, directory / filename.removesuffix(".gz")):
        if candidate.exists():
            return candidate
    return None


def load_mnist_split(cache_dir: PathLike, split: str = "train") -> Dataset:
    directory = dataset_dir("mnist", cache_dir)
    files = DATASETS["mnist"]
    images = _resolve(directory, files[f"{split}-images"][0])
    labels = _resolve(directory, files[f"{split}-labels"][0])
    if images is None or labels is None:
        raise DataError(f"MNIST {split} files not found in {directory}")
    return load_mnist_idx(images, labels)


def load_named_dataset(name: str, cache_dir: PathLike, seed: int = 0,
                       samples: Optional[int] = None,
                       features: Optional[int] = None) -> Tuple[Dataset, Dataset]:
    """Return (train, test) for a registered or synthetic dataset"""
    if name == "synthetic-logistic":
        full = synthetic_logistic(int(samples or 500) * 2, int(features or 10), 2, seed)
        half = full.num_samples // 2
        return (full.subset(np.arange(half)),
                full.subset(np.arange(half, full.num_samples), "synthetic-logistic-test"))
    if name == "mnist":
        return load_mnist_split(cache_dir, "train"), load_mnist_split(cache_dir, "test")
    if name in LIBSVM_FEATURES:
        directory = dataset_dir(name, cache_dir)
        files = DATASETS[name]
        train_path = _resolve(directory, files["train"][0])
        if train_path is None:
            raise DataError(f"{name} not found in {directory}")
        train = load_libsvm(train_path, LIBSVM_FEATURES[name])
        test_path = _resolve(directory, files["test"][0]) if "test" in files else None
        if test_path is None:
            return train_test_split(train, 0.1, seed)
        return train, load_libsvm(test_path, LIBSVM_FEATURES[name])
    raise DataError(Errors.UNKNOWN_DATASET.value.format(name=name))


def file_digest(path: PathLike, algorithm: str = DIGEST_ALGORITHM) -> str:
    digest = hashlib.new(algorithm)
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def check_dataset(name: str, cache_dir: PathLike) -> List[str]:
    """Validate presence and integrity of a cached dataset; returns a list of problems"""
    directory = dataset_dir(name, cache_dir)
    problems: List[str] = []
    for key, (filename, expected) in DATASETS[name].items():
        path = _resolve(directory, filename)
        if path is None:
            if key != "test" or name == "mnist":
                problems.append(f"missing {directory / filename}")
            continue
        if path.name == filename and expected:
            actual = file_digest(path)
            if actual != expected:
                problems.append(Errors.CHECKSUM_MISMATCH.value.format(
                    path=path, expected=expected, actual=actual))
                continue
        try:
            if name == "mnist":
                magic = IDX_IMAGE_MAGIC if key.endswith("images") else IDX_LABEL_MAGIC
                _read_idx(path, magic, 3 if key.endswith("images") else 1)
            else:
                load_libsvm(path, LIBSVM_FEATURES[name])
        except DataError as e:
            problems.append(str(e))
    return problems


def fetch_dataset(name: str, cache_dir: PathLike) -> List[Path]:
    """Download the pinned files of a dataset and verify their digests"""
    directory = dataset_dir(name, cache_dir)
    if name != "mnist":
        raise DataError(Errors.FETCH_UNSUPPORTED.value.format(name=name, cache_dir=directory))
    directory.mkdir(parents=True, exist_ok=True)
    fetched = []
    for filename, expected in DATASETS[name].values():
        target = directory / filename
        if target.exists() and file_digest(target) == expected:
            fetched.append(target)
            continue
        url = MNIST_BASE_URL + filename
        logger.info("Fetching %s", url)
        fd, temp_name = tempfile.mkstemp(dir=directory, suffix=".part")
        os.close(fd)
        try:
            with urllib.request.urlopen(url) as response, open(temp_name, "wb") as out:
                shutil.copyfileobj(response, out)
            actual = file_digest(temp_name)
            if actual != expected:
                raise DataError(Errors.CHECKSUM_MISMATCH.value.format(
                    path=url, expected=expected, actual=actual))
            os.replace(temp_name, target)
        except OSError as e:
            raise DataError(f"Download of {url} failed: {e}") from e
        finally:
            if os.path.exists(temp_name):
                os.unlink(temp_name)
        fetched.append(target)
    return fetched
