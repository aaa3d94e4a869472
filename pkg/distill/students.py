"""
Training runs for teachers, mimic students and hard-target twins.

Students regress the ensemble's logits with no dropout and no weight decay.
Hard-target twins train the same architecture on class labels, with dropout
and a fixed weight decay, so the two can be compared cell by cell.
"""
import logging
from dataclasses import dataclass

import config
from distill.families import StudentFamily, TeacherFamily, make_student, student_spec
from engine.errors import BoundsError, FingerprintMismatch
from engine.layers import Dropout
from engine.model import build_model, dropout_site_names
from engine.rng import derive_stream
from pipeline.augment import AugmentConfig
from pipeline.cifar import Dataset
from pipeline.transfer import TransferSet
from training.bottleneck import absorb_bottleneck
from training.trainer import TrainConfig, TrainResult, train

logger = logging.getLogger(__name__)

STUDENT_HYPER_BOUNDS = {
    "lr": (0.0013, 0.016),
    "momentum": (0.68, 0.97),
    "input_scale": (0.8, 1.25),
    "init_scale": (0.4, 2.0),
}
HARD_HYPER_BOUNDS = {
    "lr": (0.0015, 0.025),
    "momentum": (0.68, 0.97),
}


def check_hyperparams(point: dict, bounds: dict, what: str):
    for name, (lo, hi) in bounds.items():
        if name not in point:
            raise BoundsError(f"{what}: missing hyperparameter {name!r}")
        if not lo <= point[name] <= hi:
            raise BoundsError(f"{what}: {name}={point[name]:g} outside [{lo:g}, {hi:g}]")


@dataclass
class StudentResult:
    family: StudentFamily
    result: TrainResult
    point: dict
    soft_targets: bool = True
    absorbed_params: int = None

    @property
    def val_accuracy(self) -> float:
        return self.result.val_accuracy

    def summary(self) -> dict:
        out = self.result.summary()
        out.update(family=self.family.family_id, budget=self.family.budget,
                   targets="soft" if self.soft_targets else "hard", absorbed_params=self.absorbed_params)
        return out


def _fingerprint(source) -> bytes:
    return source if isinstance(source, (bytes, bytearray)) else source.fingerprint


def train_student(family: StudentFamily, transfer: TransferSet, validation: Dataset, point: dict, seed: int,
                  ensemble, max_epochs: int = config.MAX_EPOCHS, batch_size: int = config.BATCH_SIZE,
                  progress: bool = True) -> StudentResult:
    """
    Train a mimic student on a transfer set.

    ensemble is the Ensemble (or its fingerprint) the transfer set must have
    been generated from; any other set is refused before training starts.
    """
    expected = _fingerprint(ensemble)
    if transfer.header.fingerprint != expected:
        raise FingerprintMismatch(
            f"transfer set {transfer.path} was generated by ensemble {transfer.header.fingerprint.hex()[:12]}, "
            f"expected {expected.hex()[:12]}; regenerate it")
    check_hyperparams(point, STUDENT_HYPER_BOUNDS, str(family))

    values = [point[key] for key in family.width_keys]
    model = make_student(family, derive_stream(seed, "student-init"), values, init_scale=point["init_scale"])
    assert not any(isinstance(layer, Dropout) for layer in model.layers), "students never use dropout"

    cfg = TrainConfig(initial_lr=point["lr"], momentum=point["momentum"], weight_decay=0.0,
                      batch_size=batch_size, max_epochs=max_epochs, loss="l2_logit_loss",
                      input_scale=point["input_scale"], progress=progress)
    logger.info("Training student %s: %s (%s params)", family, model.arch, f"{model.num_params:,}")
    result = train(model, transfer, cfg, validation, seed)
    absorbed = absorb_bottleneck(result.model).num_params if family.bottleneck else None
    return StudentResult(family, result, point, soft_targets=True, absorbed_params=absorbed)


def train_hard_twin(family: StudentFamily, train_set: Dataset, validation: Dataset, point: dict, seed: int,
                    augment: AugmentConfig = None, max_epochs: int = config.MAX_EPOCHS,
                    batch_size: int = config.BATCH_SIZE, progress: bool = True) -> StudentResult:
    """Train the student architecture on 0/1 labels with dropout and weight decay 2e-4."""
    check_hyperparams(point, HARD_HYPER_BOUNDS, f"{family} (hard targets)")
    values = [point[key] for key in family.width_keys]
    sites = dropout_site_names(student_spec(family, values))
    rates = {site: point[site] for site in sites if site in point}
    model = make_student(family, derive_stream(seed, "hard-init"), values,
                         init_scale=point.get("init_scale", 1.0), dropout_rates=rates)

    cfg = TrainConfig(initial_lr=point["lr"], momentum=point["momentum"], weight_decay=config.HARD_WEIGHT_DECAY,
                      dropout_rates=list(rates.values()), batch_size=batch_size, max_epochs=max_epochs,
                      loss="softmax_xent", input_scale=point.get("input_scale", 1.0),
                      augment=augment or AugmentConfig.best_model(), progress=progress)
    logger.info("Training hard-target twin %s: %s", family, model.arch)
    result = train(model, train_set, cfg, validation, seed)
    return StudentResult(family, result, point, soft_targets=False)


def train_teacher(family: TeacherFamily, train_set: Dataset, validation: Dataset, point: dict, seed: int,
                  max_epochs: int = config.MAX_EPOCHS, batch_size: int = config.BATCH_SIZE,
                  progress: bool = True) -> TrainResult:
    """Cross-entropy training with weight decay, dropout and on-the-fly augmentation."""
    spec = family.spec(point)
    rates = {site: point[site] for site in dropout_site_names(spec) if site in point}
    model = build_model(spec, derive_stream(seed, "teacher-init"), point["init_scale"], rates)
    cfg = TrainConfig(initial_lr=point["lr"], momentum=point["momentum"], weight_decay=point["weight_decay"],
                      dropout_rates=list(rates.values()), batch_size=batch_size, max_epochs=max_epochs,
                      loss="softmax_xent", augment=AugmentConfig.from_point(point), progress=progress)
    logger.info("Training teacher %s (%s params)", model.arch, f"{model.num_params:,}")
    return train(model, train_set, cfg, validation, seed)


def compression_gap(student_acc_soft: float, same_arch_acc_hard: float) -> float:
    """Soft-target accuracy minus hard-target accuracy of the identical architecture."""
    return student_acc_soft - same_arch_acc_hard
