"""
CIFAR-10 ingest

Reads the standard binary batches (1 label byte + 3072 pixel bytes, stored
as R, G, B planes), scales pixels to [0, 1], and splits the 50,000 training
images into a seeded 40,000/10,000 train/validation pair.
"""
import logging
import tarfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests
from tqdm import tqdm

import config
from engine.errors import DataError
from engine.rng import derive_stream

logger = logging.getLogger(__name__)

RECORD_BYTES = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray   # (N, 3, 32, 32) float32 in [0, 1]
    labels: np.ndarray   # (N,) int64
    split: str           # train | validation | test
    indices: np.ndarray = None  # positions in the source file set, for manifests

    def __len__(self):
        return len(self.labels)

    def take(self, index: np.ndarray, split: str = None) -> "Dataset":
        source = self.indices if self.indices is not None else np.arange(len(self))
        return Dataset(self.images[index], self.labels[index], split or self.split, source[index])


def _read_batch(path: Path) -> tuple:
    if not path.exists():
        raise DataError(f"{path}: CIFAR-10 batch file not found")
    raw = path.read_bytes()
    expected = config.CIFAR_RECORDS_PER_FILE * RECORD_BYTES
    if len(raw) != expected:
        raise DataError(f"{path}: truncated or corrupt batch ({len(raw):,} bytes, expected {expected:,})")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= config.NUM_CLASSES:
        raise DataError(f"{path}: label byte out of range")
    images = records[:, 1:].reshape(-1, *config.IMAGE_SHAPE).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar10(directory, seed: int = 0, validation_size: int = None) -> tuple:
    """
    Return (train, validation, test) datasets; nothing is returned unless every file reads cleanly.

    validation_size defaults to a fifth of the training files (10,000 of 50,000).
    """
    directory = Path(directory)
    parts = [_read_batch(directory / name) for name in config.CIFAR_TRAIN_FILES]
    test_images, test_labels = _read_batch(directory / config.CIFAR_TEST_FILE)

    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    full = Dataset(images, labels, "train", np.arange(len(labels)))
    if validation_size is None:
        validation_size = len(labels) // 5

    perm = derive_stream(seed, "cifar-split").permutation(len(labels))
    validation_index = np.sort(perm[:validation_size])
    train_index = np.sort(perm[validation_size:])
    train = full.take(train_index, "train")
    validation = full.take(validation_index, "validation")
    test = Dataset(test_images, test_labels, "test", np.arange(len(test_labels)))
    logger.info("CIFAR-10 loaded: %d train / %d validation / %d test", len(train), len(validation), len(test))
    return train, validation, test


def subsample(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Deterministic subset of n items, original order preserved."""
    if n >= len(dataset):
        return dataset
    index = np.sort(derive_stream(seed, "subsample", dataset.split).choice(len(dataset), n, replace=False))
    return dataset.take(index)


def has_cifar10(directory) -> bool:
    directory = Path(directory)
    names = config.CIFAR_TRAIN_FILES + [config.CIFAR_TEST_FILE]
    return all((directory / name).exists() for name in names)


def download_cifar10(directory, url: str = config.CIFAR10_URL) -> Path:
    """Fetch and unpack the binary archive unless the batch files are already present."""
    directory = Path(directory)
    if has_cifar10(directory):
        return directory
    directory.mkdir(parents=True, exist_ok=True)
    archive = directory / "cifar-10-binary.tar.gz.part"
    logger.info("Downloading %s", url)
    try:
        with requests.get(url, stream=True, timeout=config.DOWNLOAD_TIMEOUT) as response:
            response.raise_for_status()
            total = int(response.headers.get("content-length", 0)) or None
            with open(archive, "wb") as f, tqdm(total=total, unit="B", unit_scale=True, desc="cifar-10") as bar:
                for chunk in response.iter_content(chunk_size=1 << 20):
                    f.write(chunk)
                    bar.update(len(chunk))
    except requests.RequestException as e:
        archive.unlink(missing_ok=True)
        raise DataError(f"{url}: download failed: {e}") from e

    wanted = set(config.CIFAR_TRAIN_FILES + [config.CIFAR_TEST_FILE])
    try:
        with tarfile.open(archive, "r:gz") as tar:
            for member in tar.getmembers():
                name = Path(member.name).name
                if member.isfile() and name in wanted:
                    with tar.extractfile(member) as src:
                        (directory / name).write_bytes(src.read())
    except tarfile.TarError as e:
        raise DataError(f"{archive}: cannot unpack: {e}") from e
    finally:
        archive.unlink(missing_ok=True)
    if not has_cifar10(directory):
        raise DataError(f"{url}: archive did not contain the CIFAR-10 binary batches")
    return directory


def normalize_per_image(images: np.ndarray, eps: float = config.NORMALIZE_EPS) -> np.ndarray:
    """Subtract each image's mean and divide by its (population) standard deviation."""
    single = images.ndim == 3
    batch = images[None] if single else images
    flat = batch.reshape(len(batch), -1).astype(np.float64)
    mean = flat.mean(axis=1, keepdims=True)
    std = flat.std(axis=1, keepdims=True)
    out = ((flat - mean) / (std + eps)).reshape(batch.shape).astype(images.dtype)
    return out[0] if single else out
