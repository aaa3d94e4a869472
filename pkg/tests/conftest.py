"""Shared fixtures: seeded streams, toy datasets, a miniature CIFAR-10 directory."""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import config
from engine.rng import derive_stream
from pipeline.cifar import RECORD_BYTES, Dataset

FIXTURE_RECORDS = 40


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: statistical or search-quality checks that take minutes")


@pytest.fixture
def rng():
    return derive_stream(1234, "tests")


def make_separable(n: int, seed: int, split: str) -> Dataset:
    """Two classes of 2x2 single-channel 'images', separated along the first pixel."""
    stream = derive_stream(seed, "separable", split)
    labels = stream.integers(0, 2, size=n)
    images = stream.normal(0.0, 0.3, size=(n, 1, 2, 2))
    images[:, 0, 0, 0] += np.where(labels == 1, 1.5, -1.5)
    return Dataset(images.astype(np.float32), labels.astype(np.int64), split, np.arange(n))


@pytest.fixture
def separable():
    return make_separable(200, 0, "train"), make_separable(100, 1, "validation")


@pytest.fixture
def images(rng):
    return rng.random((6, 3, 32, 32)).astype(np.float32)


def write_cifar_fixture(directory: Path, records: int = FIXTURE_RECORDS, seed: int = 0) -> Path:
    """Binary batches in the CIFAR-10 layout with structured (learnable) content."""
    directory.mkdir(parents=True, exist_ok=True)
    stream = derive_stream(seed, "cifar-fixture")
    for name in config.CIFAR_TRAIN_FILES + [config.CIFAR_TEST_FILE]:
        labels = stream.integers(0, config.NUM_CLASSES, size=records).astype(np.uint8)
        pixels = stream.integers(0, 64, size=(records, RECORD_BYTES - 1)).astype(np.uint8)
        # brighten one colour plane per class so labels are predictable from pixels
        plane = (labels % 3).astype(int)
        for i in range(records):
            start = plane[i] * 1024
            pixels[i, start:start + 1024] += np.uint8(120 + 10 * (labels[i] // 3))
        raw = np.concatenate([labels[:, None], pixels], axis=1)
        (directory / name).write_bytes(raw.tobytes())
    return directory


@pytest.fixture
def cifar_dir(tmp_path, monkeypatch):
    monkeypatch.setattr(config, "CIFAR_RECORDS_PER_FILE", FIXTURE_RECORDS)
    return write_cifar_fixture(tmp_path / "cifar")
