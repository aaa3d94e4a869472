"""
Training loop and evaluation.

A run trains either on labeled images (softmax cross-entropy, optionally
augmented on the fly) or on a transfer set (L2 regression on stored logits).
After every epoch the validation classification error drives the plateau
schedule; the best-validation parameters are restored at the end.
"""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from engine.checkpoint import save_checkpoint
from engine.errors import DataError, NonFiniteError, TrainingDiverged
from engine.losses import LOSSES, softmax_xent
from engine.model import Model
from engine.rng import derive_stream
from pipeline.augment import AugmentConfig, augment_batch
from pipeline.cifar import Dataset, normalize_per_image
from pipeline.transfer import TransferSet
from training.optimizer import NesterovSGD
from training.schedule import HALVE, STOP, LRSchedule, LRScheduleState

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_err", "lr"]


@dataclass
class TrainConfig:
    initial_lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    dropout_rates: list = field(default_factory=list)
    batch_size: int = config.BATCH_SIZE
    max_epochs: int = config.MAX_EPOCHS
    loss: str = "softmax_xent"
    input_scale: float = 1.0
    augment: AugmentConfig = None
    normalize: bool = True
    progress: bool = True

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {sorted(LOSSES)}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["augment"] = self.augment.to_dict() if self.augment else None
        return out


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    n: int

    @property
    def error(self) -> float:
        return 1.0 - self.accuracy


@dataclass
class TrainResult:
    model: Model
    history: pd.DataFrame
    best_epoch: int
    best_val_err: float
    stop_reason: str
    wall_seconds: float = 0.0

    @property
    def val_accuracy(self) -> float:
        return 1.0 - self.best_val_err

    def summary(self) -> dict:
        return {
            "arch": self.model.arch,
            "params": self.model.num_params,
            "best_epoch": self.best_epoch,
            "val_err": self.best_val_err,
            "val_accuracy": self.val_accuracy,
            "epochs": int(self.history["epoch"].max()) if len(self.history) else 0,
            "stop_reason": self.stop_reason,
            "wall_seconds": round(self.wall_seconds, 3),
        }

    def save(self, directory) -> Path:
        """Write checkpoint, history CSV and result JSON into directory."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.model, directory / config.CHECKPOINT_FILE)
        self.history.to_csv(directory / config.HISTORY_FILE, index=False)
        (directory / config.RESULT_FILE).write_text(json.dumps(self.summary(), indent=2))
        return directory


def prepare_inputs(images: np.ndarray, input_scale: float = 1.0, normalize: bool = True,
                   dtype=np.float32) -> np.ndarray:
    x = np.asarray(images, dtype=dtype)
    if normalize:
        x = normalize_per_image(x)
    if input_scale != 1.0:
        x = x * x.dtype.type(input_scale)
    return x


def evaluate(model: Model, dataset: Dataset, input_scale: float = 1.0, normalize: bool = True,
             batch_size: int = 256) -> EvalResult:
    """Accuracy (argmax over logits) and mean cross-entropy, in evaluation mode."""
    if len(dataset) == 0:
        raise DataError(f"cannot evaluate on an empty {dataset.split} set")
    logits = model.predict(prepare_inputs(dataset.images, input_scale, normalize, model.dtype), batch_size)
    accuracy = float(np.mean(logits.argmax(axis=1) == dataset.labels))
    loss, _ = softmax_xent(logits, dataset.labels)
    return EvalResult(accuracy, loss, len(dataset))


def _epoch_batches(data, cfg: TrainConfig, seed: int, epoch: int):
    """Yield (inputs, targets) for one epoch."""
    if isinstance(data, TransferSet):
        records = data.epoch(epoch - 1)
        for start in range(0, len(records), cfg.batch_size):
            block = records[start:start + cfg.batch_size]
            yield prepare_inputs(block["image"], cfg.input_scale, cfg.normalize), np.asarray(block["logits"])
        return
    order = derive_stream(seed, "shuffle", epoch).permutation(len(data))
    for start in range(0, len(order), cfg.batch_size):
        index = np.sort(order[start:start + cfg.batch_size])
        images = data.images[index]
        if cfg.augment is not None:
            images = augment_batch(images, cfg.augment, seed, epoch, index)
        yield prepare_inputs(images, cfg.input_scale, cfg.normalize), data.labels[index]


def _history_frame(rows: list) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def train(model: Model, data, cfg: TrainConfig, validation: Dataset, seed: int = 0,
          schedule: LRSchedule = None) -> TrainResult:
    """
    Train until the schedule stops or max_epochs is reached.

    data is a labeled Dataset or a TransferSet. A non-finite loss or gradient
    restores the best parameters and raises TrainingDiverged carrying them.
    """
    is_transfer = isinstance(data, TransferSet)
    if is_transfer and cfg.loss != "l2_logit_loss":
        raise ValueError("transfer sets carry logits; train them with l2_logit_loss")
    if not is_transfer and cfg.loss != "softmax_xent":
        raise ValueError("labeled data carries class indices; train it with softmax_xent")
    if len(data) == 0:
        raise DataError("cannot train on an empty dataset")

    loss_fn = LOSSES[cfg.loss]
    schedule = schedule or LRSchedule()
    optimizer = NesterovSGD(model.parameters(), cfg.initial_lr, cfg.momentum, cfg.weight_decay)
    started = time.perf_counter()

    val_err = evaluate(model, validation, cfg.input_scale, cfg.normalize).error
    _, state = schedule.update(LRScheduleState.start(cfg.initial_lr), val_err)
    rows = [(0, math.nan, val_err, cfg.initial_lr)]
    best_state, best_err, best_epoch = model.state_dict(), val_err, 0
    stop_reason = "max_epochs"

    def result(reason):
        model.load_state_dict(best_state)
        model.eval()
        return TrainResult(model, _history_frame(rows), best_epoch, best_err, reason,
                           time.perf_counter() - started)

    epochs = tqdm(range(1, cfg.max_epochs + 1), disable=not cfg.progress, desc=model.arch, leave=False)
    for epoch in epochs:
        model.train()
        rng = derive_stream(seed, "dropout", epoch)
        lr = optimizer.lr
        total, seen = 0.0, 0
        try:
            for x, target in _epoch_batches(data, cfg, seed, epoch):
                optimizer.zero_grad()
                logits = model.forward(x, rng)
                loss, grad = loss_fn(logits, target)
                if not math.isfinite(loss):
                    raise NonFiniteError(f"loss is {loss}")
                model.backward(grad)
                optimizer.step()
                total += loss * len(x)
                seen += len(x)
        except (NonFiniteError, TrainingDiverged) as e:
            logger.warning("Run diverged at epoch %d (lr=%g): %s", epoch, lr, e)
            raise TrainingDiverged(f"diverged at epoch {epoch}: {e}", result("diverged")) from e

        val_err = evaluate(model, validation, cfg.input_scale, cfg.normalize).error
        rows.append((epoch, total / seen, val_err, lr))
        if val_err < best_err:
            best_state, best_err, best_epoch = model.state_dict(), val_err, epoch
        logger.debug("epoch %d: loss %.5f, val_err %.4f, lr %g", epoch, total / seen, val_err, lr)
        epochs.set_postfix(val_err=f"{val_err:.4f}", lr=f"{lr:g}")

        action, state = schedule.update(state, val_err)
        if action == HALVE:
            optimizer.lr = state.current_lr
            logger.info("epoch %d: learning rate halved to %g", epoch, state.current_lr)
        elif action == STOP:
            stop_reason = "schedule"
            break

    out = result(stop_reason)
    logger.info("Trained %s: best val_err %.4f at epoch %d (%s)", model.arch, best_err, best_epoch, stop_reason)
    return out
