import os
from pathlib import Path

import numpy as np
import pytest

from darkreplay.data import MNIST_FILES, Dataset
from darkreplay.harness import default_data_dir


def _mnist_present(path) -> bool:
    return all((Path(path) / f).is_file() for pair in MNIST_FILES.values() for f in pair)


MNIST_DIR = default_data_dir()
HAVE_MNIST = _mnist_present(MNIST_DIR)
needs_mnist = pytest.mark.skipif(not HAVE_MNIST, reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture(scope="session")
def mnist():
    if not HAVE_MNIST:
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    from darkreplay.data import load_mnist
    return load_mnist(MNIST_DIR)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_dataset(n_per_class=20, classes=range(10), seed=0, split="train") -> Dataset:
    """Random byte images with a faint class-dependent pattern, enough to learn."""
    gen = np.random.default_rng(seed)
    labels = np.repeat(np.array(list(classes)), n_per_class)
    pixels = gen.integers(0, 60, size=(labels.size, 784), dtype=np.int64)
    for c in classes:
        rows = labels == c
        pixels[np.ix_(rows, np.arange(c * 70, c * 70 + 70))] += 180
    return Dataset(np.clip(pixels, 0, 255).astype(np.uint8), labels.astype(np.int64), split)


@pytest.fixture
def toy():
    return toy_dataset()


def write_idx_pair(directory, images_name, labels_name, ds: Dataset):
    import struct
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = len(ds)
    (directory / images_name).write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + ds.pixels.tobytes())
    (directory / labels_name).write_bytes(struct.pack(">II", 0x801, n) + ds.labels.astype(np.uint8).tobytes())


@pytest.fixture(scope="session")
def toy_mnist_dir(tmp_path_factory):
    """A miniature MNIST in IDX format: 40 train and 20 test images per digit."""
    root = tmp_path_factory.mktemp("toy_mnist")
    write_idx_pair(root, *MNIST_FILES["train"], toy_dataset(40, seed=10))
    write_idx_pair(root, *MNIST_FILES["test"], toy_dataset(20, seed=11, split="test"))
    return str(root)
