"""
Named, splittable random streams.

Every stochastic operation takes an explicit numpy Generator. Streams are
derived from (seed, *path) with a Philox counter-based bit generator, so the
stream for e.g. ("transfer", epoch, index) is the same no matter which worker
draws it or in which order.
"""
import hashlib

import numpy as np


def _path_key(part) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_stream(seed: int, *path) -> np.random.Generator:
    """Return a Philox stream keyed by the seed and a name path."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_path_key(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, *path) -> int:
    """Integer seed for libraries that want one (scikit-learn, scipy.qmc)."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_path_key(p) for p in path))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
