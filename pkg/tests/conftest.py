import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from laq_sim.constants import IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC
from laq_sim.data import synthetic_logistic, synthetic_quadratic


def write_idx_images(path: Path, images: np.ndarray, compress: bool = False,
                     magic: int = IDX_IMAGE_MAGIC) -> Path:
    count, rows, cols = images.shape
    payload = struct.pack(">IIII", magic, count, rows, cols) + images.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(payload)
    return path


def write_idx_labels(path: Path, labels: np.ndarray, compress: bool = False,
                     magic: int = IDX_LABEL_MAGIC) -> Path:
    payload = struct.pack(">II", magic, labels.size) + labels.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(payload)
    return path


@pytest.fixture
def idx_pair(tmp_path):
    """Five 28x28 images with labels 0..4"""
    rng = np.random.default_rng(7)
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = np.arange(5, dtype=np.uint8)
    return (write_idx_images(tmp_path / "images-idx3-ubyte", images),
            write_idx_labels(tmp_path / "labels-idx1-ubyte", labels),
            images, labels)


@pytest.fixture
def mnist_cache(tmp_path):
    """Cache directory with small gzip-compressed MNIST-named files"""
    directory = tmp_path / "cache" / "mnist"
    directory.mkdir(parents=True)
    rng = np.random.default_rng(11)
    for split, count in (("train", 40), ("t10k", 10)):
        write_idx_images(directory / f"{split}-images-idx3-ubyte.gz",
                         rng.integers(0, 256, size=(count, 28, 28), dtype=np.uint8), compress=True)
        write_idx_labels(directory / f"{split}-labels-idx1-ubyte.gz",
                         rng.integers(0, 10, size=count, dtype=np.uint8), compress=True)
    return tmp_path / "cache"


@pytest.fixture
def libsvm_file(tmp_path):
    path = tmp_path / "tiny.libsvm"
    path.write_text("+1 1:0.5 3:1.25\n"
                    "-1 2:2.0\n"
                    "\n"
                    "+1 1:-1 2:1 3:1 # trailing comment\n", encoding="utf-8")
    return path


@pytest.fixture
def small_logistic():
    return synthetic_logistic(60, 4, 3, seed=5)


@pytest.fixture
def small_quadratic():
    return synthetic_quadratic(6, 3, (1.0, 2.0, 4.0), 0.6, seed=2)
