"""
Desk-scale reproductions.

Three checks on real searches and training runs at one student budget:

  conv gap         best-of-N soft-target CNN-1 beats the best MLP by >= 5 points
  compression gap  soft minus hard accuracy of identical architectures, median
                   over 3 seeds: >= 0 for CNN-1, and no smaller for the MLP
                   than for CNN-2
  determinism      rerunning the conv-gap searches with the same seeds moves no
                   best accuracy by more than 0.2 points

Training is injected as two callables, soft(family_id, point, seed) and
hard(family_id, point, seed), each returning validation accuracy, so the
orchestration runs the same with real runs or stand-ins.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

import config
from distill.families import StudentFamily
from distill.students import HARD_HYPER_BOUNDS
from engine.errors import MimicError
from hpo.search import run_search
from hpo.space import hard_space, student_space

logger = logging.getLogger(__name__)

CONV_FAMILY, MLP_FAMILY, DEEP_FAMILY = "CNN-1", "MLP-1", "CNN-2"
DESK_BUDGET = 100_000
SEARCH_TRIALS = 5
GAP_SEEDS = 3
MIN_CONV_GAP = 5.0      # accuracy points
MAX_DRIFT = 0.2         # accuracy points

FRAME_COLUMNS = ["family", "best", "repeat", "soft_median", "hard_median", "gap"]


def twin_point(family_id: str, soft_point: dict) -> dict:
    """Hard-target hyperparameters for the architecture a soft-target point selects."""
    space = hard_space(family_id)
    point = space.untransform_point(np.full(len(space), 0.5))
    for name, (lo, hi) in HARD_HYPER_BOUNDS.items():
        point[name] = float(np.clip(soft_point[name], lo, hi))
    for key in StudentFamily(family_id, DESK_BUDGET).width_keys:
        point[key] = soft_point[key]
    return space.check(point)


@dataclass
class Reproduction:
    budget: int
    best: dict = field(default_factory=dict)     # family -> best accuracy over the search
    points: dict = field(default_factory=dict)   # family -> best soft point
    soft: dict = field(default_factory=dict)     # family -> accuracy per seed
    hard: dict = field(default_factory=dict)
    repeat: dict = field(default_factory=dict)   # family -> best accuracy of the repeated search

    @property
    def conv_gap(self) -> float:
        return 100 * (self.best[CONV_FAMILY] - self.best[MLP_FAMILY])

    def compression_gaps(self) -> dict:
        """Median over seeds of soft minus hard accuracy, in points."""
        return {family: 100 * float(np.median(np.subtract(self.soft[family], self.hard[family])))
                for family in self.soft}

    @property
    def drift(self) -> float:
        if not self.repeat:
            return None
        return 100 * max(abs(self.best[family] - self.repeat[family]) for family in self.repeat)

    def checks(self) -> dict:
        gaps = self.compression_gaps()
        out = {
            "conv_gap": self.conv_gap >= MIN_CONV_GAP,
            "soft_beats_hard": gaps[CONV_FAMILY] >= 0,
            "gap_shrinks_with_depth": gaps[MLP_FAMILY] >= gaps[DEEP_FAMILY],
        }
        if self.repeat:
            out["deterministic"] = self.drift <= MAX_DRIFT
        return out

    def to_frame(self) -> pd.DataFrame:
        gaps = self.compression_gaps()
        rows = [(family, self.best.get(family), self.repeat.get(family),
                 float(np.median(self.soft[family])), float(np.median(self.hard[family])), gaps[family])
                for family in self.soft]
        return pd.DataFrame(rows, columns=FRAME_COLUMNS)

    def summary(self) -> dict:
        return {
            "budget": self.budget,
            "conv_gap": self.conv_gap,
            "compression_gaps": self.compression_gaps(),
            "drift": self.drift,
            "checks": self.checks(),
            "points": self.points,
        }


def _search(soft, family_id: str, budget: int, trials: int, ledger_path: Path, seed: int) -> dict:
    best = run_search(lambda point, trial_seed: 1.0 - soft(family_id, point, trial_seed),
                      student_space(family_id), trials, ledger_path, seed=seed, noise=True, progress=False)
    if best is None:
        raise MimicError(f"every {family_id} trial failed at budget {budget:,}")
    return best


def reproduce(soft, hard, out_dir, seed: int = 0, budget: int = DESK_BUDGET, trials: int = SEARCH_TRIALS,
              seeds: int = GAP_SEEDS, repeat: bool = True) -> Reproduction:
    out_dir = Path(out_dir)
    result = Reproduction(budget)

    for family_id in (CONV_FAMILY, MLP_FAMILY, DEEP_FAMILY):
        best = _search(soft, family_id, budget, trials, out_dir / "search" / family_id / config.LEDGER_FILE, seed)
        result.best[family_id] = 1.0 - best["value"]
        result.points[family_id] = best["point"]
        logger.info("%s at %s params: best of %d trials %.4f", family_id, f"{budget:,}", trials,
                    result.best[family_id])

    for family_id, point in result.points.items():
        hard_point = twin_point(family_id, point)
        run_seeds = [seed + offset for offset in range(seeds)]
        result.soft[family_id] = [soft(family_id, point, s) for s in run_seeds]
        result.hard[family_id] = [hard(family_id, hard_point, s) for s in run_seeds]

    if repeat:
        for family_id in (CONV_FAMILY, MLP_FAMILY):
            best = _search(soft, family_id, budget, trials, out_dir / "repeat" / family_id / config.LEDGER_FILE,
                           seed)
            result.repeat[family_id] = 1.0 - best["value"]
    return result


def write_reproduction(result: Reproduction, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"table": out_dir / config.REPRODUCTION_OUTPUT, "summary": out_dir / config.REPRODUCTION_SUMMARY}
    result.to_frame().to_csv(paths["table"], index=False)
    paths["summary"].write_text(json.dumps(result.summary(), indent=2, default=float))
    return paths
