"""
Centralized configuration for the mimic-budget pipeline.
"""
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Project paths
PROJECT_ROOT = Path(__file__).parent
DATA_DIR = Path(os.getenv("MIMIC_DATA_DIR", PROJECT_ROOT / "data" / "cifar-10-batches-bin"))
WORK_DIR = Path(os.getenv("MIMIC_WORK_DIR", PROJECT_ROOT / "work"))

# Defaults overridable from .env
DEFAULT_SEED = int(os.getenv("MIMIC_SEED", "0"))
DEFAULT_SCALE = os.getenv("MIMIC_SCALE", "desk")
DEFAULT_WORKERS = int(os.getenv("MIMIC_WORKERS", "1"))
CIFAR10_URL = os.getenv("CIFAR10_URL", "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz")
DOWNLOAD_TIMEOUT = 60  # seconds

# CIFAR-10 layout
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORDS_PER_FILE = 10_000
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10

# Training
BATCH_SIZE = 128
MAX_EPOCHS = 500
NORMALIZE_EPS = 1e-8
PATIENCE_EPOCHS = 10      # halve after this many epochs without a drop
COOLDOWN_EPOCHS = 8       # no halving within this many epochs after a halving
STOP_EPOCHS = 30          # stop after this many epochs without a drop
MAX_LR_REDUCTION = 2000   # stop once the learning rate was reduced by more than this
HARD_WEIGHT_DECAY = 2e-4  # fixed weight decay for hard-target twins

# Hyperparameter optimization
HPO_INITIAL_DESIGN = 8
HPO_CANDIDATES = 2048
HPO_TOP_K = 5
HPO_RESTARTS = 3

# File formats
CHECKPOINT_MAGIC = b"MBCK"
TRANSFER_MAGIC = b"MBTS"

# Artifact names
MANIFEST_FILE = "manifest.json"
HISTORY_FILE = "history.csv"
CHECKPOINT_FILE = "model.mbck"
RESULT_FILE = "result.json"
LEDGER_FILE = "ledger.jsonl"
SUMMARY_FILE = "best5.csv"
ENSEMBLE_FILE = "ensemble.json"
TRANSFER_FILE = "transfer.mbts"
GRID_OUTPUT = "accuracy_grid.csv"
GAP_OUTPUT = "compression_gap.csv"
SERIES_OUTPUT = "budget_series.json"
REPRODUCTION_OUTPUT = "reproduction.csv"
REPRODUCTION_SUMMARY = "reproduction.json"

# Student budgets
FULL_BUDGETS = [1_000_000, 3_160_000, 10_000_000, 31_600_000]
DESK_BUDGETS = [30_000, 100_000, 300_000]


@dataclass(frozen=True)
class ScalePreset:
    name: str
    train_size: int
    validation_size: int
    transfer_epochs: int
    ensemble_size: int
    teacher_trials: int
    student_trials: int
    budgets: tuple
    teacher_family: str
    max_epochs: int = MAX_EPOCHS
    batch_size: int = BATCH_SIZE


PRESETS = {
    "full": ScalePreset("full", 40_000, 10_000, 160, 16, 129, 30, tuple(FULL_BUDGETS), "teacher-full"),
    "desk": ScalePreset("desk", 5_000, 1_000, 4, 2, 12, 12, tuple(DESK_BUDGETS), "teacher-desk",
                        max_epochs=60),
}


@dataclass
class ExperimentConfig:
    data_dir: Path = DATA_DIR
    work_dir: Path = WORK_DIR
    scale: str = DEFAULT_SCALE
    seed: int = DEFAULT_SEED
    workers: int = DEFAULT_WORKERS
    force: bool = False
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scale not in PRESETS:
            raise ValueError(f"unknown scale preset {self.scale!r}; choose from {sorted(PRESETS)}")
        self.data_dir = Path(self.data_dir)
        self.work_dir = Path(self.work_dir)

    @property
    def preset(self) -> ScalePreset:
        return PRESETS[self.scale]

    def get(self, key: str):
        """Per-stage override, falling back to the preset value."""
        return self.overrides.get(key, getattr(self.preset, key))

    def stage_dir(self, *parts) -> Path:
        path = self.work_dir.joinpath(*parts)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def to_manifest(self) -> dict:
        return {
            "data_dir": str(self.data_dir),
            "work_dir": str(self.work_dir),
            "scale": self.scale,
            "preset": asdict(self.preset),
            "seed": self.seed,
            "workers": self.workers,
            "overrides": self.overrides,
        }


def package_versions() -> dict:
    import numpy
    import pandas
    import scipy
    import sklearn

    return {
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "pandas": pandas.__version__,
    }


def write_manifest(directory: Path, payload: dict) -> Path:
    path = Path(directory) / MANIFEST_FILE
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    return path


def read_manifest(directory: Path) -> dict:
    path = Path(directory) / MANIFEST_FILE
    if not path.exists():
        return {}
    return json.loads(path.read_text())
