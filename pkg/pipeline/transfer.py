"""
Transfer sets: augmented training images labeled with ensemble logits.

File layout (little-endian):

    b"MBTS" | u32 version | u64 record count | AugmentConfig (56 bytes)
    | 32-byte ensemble fingerprint | u32 epochs | u64 seed
    | records: 3x32x32 float32 image (post-augmentation, pre-normalization), 10 float32 logits
    | u64 checksum (blake2b-64 over everything before it)

Writers go through a temporary file that only replaces the target once the
checksum is written, so a failed run never leaves a readable partial set.
"""
import hashlib
import itertools
import logging
import os
import struct
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

import config
from distill.ensemble import ensemble_logits
from engine.errors import DataError
from pipeline.augment import CONFIG_BYTES, AugmentConfig, augment_batch
from pipeline.cifar import Dataset, normalize_per_image

logger = logging.getLogger(__name__)

VERSION = 1
RECORD_DTYPE = np.dtype([("image", "<f4", config.IMAGE_SHAPE), ("logits", "<f4", (config.NUM_CLASSES,))])
_HEAD = struct.Struct("<4sIQ")
_TAIL = struct.Struct("<32sIQ")
HEADER_BYTES = _HEAD.size + CONFIG_BYTES + _TAIL.size
CHUNK_BYTES = 1 << 24


@dataclass(frozen=True)
class TransferHeader:
    count: int
    config: AugmentConfig
    fingerprint: bytes
    epochs: int
    seed: int
    version: int = VERSION

    def to_bytes(self) -> bytes:
        if len(self.fingerprint) != 32:
            raise ValueError("ensemble fingerprint must be 32 bytes")
        return (_HEAD.pack(config.TRANSFER_MAGIC, self.version, self.count) + self.config.to_bytes()
                + _TAIL.pack(self.fingerprint, self.epochs, self.seed))

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "TransferHeader":
        magic, version, count = _HEAD.unpack_from(raw, 0)
        if magic != config.TRANSFER_MAGIC:
            raise DataError(f"{source}: not a transfer set (bad magic)")
        if version != VERSION:
            raise DataError(f"{source}: unsupported transfer-set version {version}")
        aug = AugmentConfig.from_bytes(raw[_HEAD.size:_HEAD.size + CONFIG_BYTES])
        fingerprint, epochs, seed = _TAIL.unpack_from(raw, _HEAD.size + CONFIG_BYTES)
        return cls(count, aug, fingerprint, epochs, seed, version)

    @property
    def split_size(self) -> int:
        return self.count // self.epochs if self.epochs else 0


@dataclass
class TransferSet:
    header: TransferHeader
    records: np.ndarray  # structured RECORD_DTYPE, usually a read-only memmap
    path: Path = None

    def __len__(self):
        return self.header.count

    @property
    def images(self) -> np.ndarray:
        return self.records["image"]

    @property
    def logits(self) -> np.ndarray:
        return self.records["logits"]

    def epoch(self, epoch: int) -> np.ndarray:
        """Records of one stored epoch, in file order."""
        size = self.header.split_size
        start = (epoch % self.header.epochs) * size
        return self.records[start:start + size]


class TransferSetWriter:
    """Context manager that streams records and commits atomically on success."""

    def __init__(self, path, header: TransferHeader):
        self.path = Path(path)
        self.header = header
        self.tmp = self.path.with_name(self.path.name + ".tmp")
        self.written = 0
        self._file = None
        self._hash = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.tmp, "wb")
        self._hash = hashlib.blake2b(digest_size=8)
        self._emit(self.header.to_bytes())
        return self

    def _emit(self, raw: bytes):
        self._file.write(raw)
        self._hash.update(raw)

    def write(self, images: np.ndarray, logits: np.ndarray):
        block = np.empty(len(images), dtype=RECORD_DTYPE)
        block["image"] = images
        block["logits"] = logits
        self._emit(block.tobytes())
        self.written += len(block)

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                if self.written != self.header.count:
                    raise DataError(f"{self.path}: wrote {self.written} records, header says {self.header.count}")
                self._file.write(self._hash.digest())
                self._file.flush()
                os.fsync(self._file.fileno())
        except BaseException:
            self._file.close()
            self.tmp.unlink(missing_ok=True)
            raise
        self._file.close()
        if exc_type is not None:
            self.tmp.unlink(missing_ok=True)
            logger.error("Transfer set %s aborted: %s", self.path, exc)
            return False
        os.replace(self.tmp, self.path)
        return False


def write_transfer_set(path, header: TransferHeader, images: np.ndarray, logits: np.ndarray) -> Path:
    with TransferSetWriter(path, header) as writer:
        writer.write(images, logits)
    return Path(path)


def file_checksum(path: Path, length: int) -> bytes:
    digest = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as f:
        remaining = length
        while remaining:
            chunk = f.read(min(CHUNK_BYTES, remaining))
            if not chunk:
                break
            digest.update(chunk)
            remaining -= len(chunk)
    return digest.digest()


def read_transfer_set(path, verify: bool = True) -> TransferSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: transfer set not found")
    size = path.stat().st_size
    if size < HEADER_BYTES + 8:
        raise DataError(f"{path}: truncated transfer set")
    with open(path, "rb") as f:
        header = TransferHeader.from_bytes(f.read(HEADER_BYTES), str(path))
    expected = HEADER_BYTES + header.count * RECORD_DTYPE.itemsize + 8
    if size != expected:
        raise DataError(f"{path}: size {size:,} bytes, header implies {expected:,}")
    if verify:
        with open(path, "rb") as f:
            f.seek(size - 8)
            stored = f.read(8)
        if file_checksum(path, size - 8) != stored:
            raise DataError(f"{path}: checksum mismatch")
    if header.count:
        records = np.memmap(path, dtype=RECORD_DTYPE, mode="r", offset=HEADER_BYTES, shape=(header.count,))
    else:
        records = np.empty(0, dtype=RECORD_DTYPE)
    return TransferSet(header, records, path)


def generate_transfer_set(train: Dataset, ensemble, epochs: int, aug: AugmentConfig, seed: int, path,
                          batch_size: int = 256, workers: int = 1, progress: bool = True) -> TransferSet:
    """Augment every training image once per epoch and label it with the ensemble's mean logits."""
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    n = len(train)
    header = TransferHeader(epochs * n, aug, ensemble.fingerprint, epochs, seed)
    batches = [(epoch, start) for epoch in range(epochs) for start in range(0, n, batch_size)]

    def augment_chunk(job):
        epoch, start = job
        stop = min(start + batch_size, n)
        return augment_batch(train.images[start:stop], aug, seed, epoch, range(start, stop))

    workers = max(1, workers)
    window = 2 * workers
    logger.info("Generating transfer set: %d epochs x %d images -> %s", epochs, n, path)
    with TransferSetWriter(path, header) as writer, ThreadPoolExecutor(max_workers=workers) as pool, \
            tqdm(total=len(batches), disable=not progress, desc="transfer set") as bar:
        jobs = iter(batches)
        pending = deque(pool.submit(augment_chunk, job) for job in itertools.islice(jobs, window))
        # oldest first, so records land in index order; at most `window` chunks held at once
        while pending:
            images = pending.popleft().result()
            job = next(jobs, None)
            if job is not None:
                pending.append(pool.submit(augment_chunk, job))
            logits = ensemble_logits(ensemble, normalize_per_image(images))
            writer.write(images, logits)
            bar.update(1)
    return read_transfer_set(path)
