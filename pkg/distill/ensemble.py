"""
Teacher ensembles: logit averaging, greedy selection, manifests.

An ensemble is identified by a fingerprint, the SHA-256 of its members'
checkpoint bytes in member order. Transfer sets record it so students can
refuse targets produced by a different ensemble.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from engine.checkpoint import checkpoint_bytes, load_checkpoint
from engine.errors import DataError, FingerprintMismatch

logger = logging.getLogger(__name__)


def fingerprint_models(models: list) -> bytes:
    digest = hashlib.sha256()
    for model in models:
        digest.update(checkpoint_bytes(model))
    return digest.digest()


@dataclass
class Ensemble:
    members: list
    paths: list = field(default_factory=list)
    val_accuracy: float = None
    fingerprint: bytes = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if self.fingerprint is None:
            self.fingerprint = fingerprint_models(self.members)

    def __len__(self):
        return len(self.members)

    @property
    def hexdigest(self) -> str:
        return self.fingerprint.hex()

    def check(self, fingerprint: bytes):
        """Raise FingerprintMismatch unless fingerprint names this ensemble."""
        if fingerprint != self.fingerprint:
            raise FingerprintMismatch(
                f"transfer set was generated by ensemble {fingerprint.hex()[:12]}, "
                f"current ensemble is {self.hexdigest[:12]}; regenerate the transfer set")


def average_logits(stacked: np.ndarray) -> np.ndarray:
    """Per-class mean over the first axis, accumulated in float64 in member order."""
    return stacked.astype(np.float64).mean(axis=0).astype(stacked.dtype)


def ensemble_logits(ensemble, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Mean evaluation-mode logits of an Ensemble (or a plain list of models)."""
    members = ensemble.members if isinstance(ensemble, Ensemble) else ensemble
    if not members:
        raise ValueError("ensemble has no members")
    return average_logits(np.stack([model.predict(batch, batch_size) for model in members]))


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(logits.argmax(axis=1) == labels))


def select_ensemble(candidates: list, inputs: np.ndarray, labels: np.ndarray, max_size: int,
                    paths: list = None) -> Ensemble:
    """
    Greedy forward selection without replacement.

    inputs are the already-normalized validation images. Each round adds the
    candidate whose inclusion gives the best averaged-logit accuracy; ties go
    to the earlier candidate. Selection ends at max_size or when nothing
    strictly improves on the current accuracy.
    """
    if not candidates:
        raise ValueError("no candidate models to select from")
    if max_size < 1:
        raise ValueError(f"max_size must be >= 1, got {max_size}")
    logits = np.stack([model.predict(inputs) for model in candidates]).astype(np.float64)

    chosen, total, best = [], np.zeros_like(logits[0]), -1.0
    while len(chosen) < min(max_size, len(candidates)):
        scores = {i: _accuracy((total + logits[i]) / (len(chosen) + 1), labels)
                  for i in range(len(candidates)) if i not in chosen}
        pick = max(scores, key=lambda i: (scores[i], -i))
        if chosen and scores[pick] <= best:
            break
        chosen.append(pick)
        total = total + logits[pick]
        best = scores[pick]
        logger.info("Ensemble member %d: candidate %d -> validation accuracy %.4f", len(chosen), pick, best)

    members = [candidates[i] for i in chosen]
    member_paths = [paths[i] for i in chosen] if paths else []
    return Ensemble(members, member_paths, val_accuracy=best)


def write_ensemble_manifest(path, ensemble: Ensemble) -> Path:
    path = Path(path)
    payload = {
        "members": [str(p) for p in ensemble.paths],
        "fingerprint": ensemble.hexdigest,
        "val_accuracy": ensemble.val_accuracy,
        "archs": [m.arch for m in ensemble.members],
    }
    path.write_text(json.dumps(payload, indent=2))
    return path


def load_ensemble(path) -> Ensemble:
    """Load every member checkpoint listed in a manifest and verify the fingerprint."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: ensemble manifest not found")
    payload = json.loads(path.read_text())
    members = [load_checkpoint(member) for member in payload["members"]]
    ensemble = Ensemble(members, [Path(p) for p in payload["members"]], payload.get("val_accuracy"))
    if ensemble.hexdigest != payload["fingerprint"]:
        raise FingerprintMismatch(f"{path}: member checkpoints changed since the manifest was written")
    return ensemble
