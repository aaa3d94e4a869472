"""
Append-only trial ledger (JSON lines).

The first line is a header holding the space definition and its hash; every
further line is one finished trial:

    {"index", "point", "unit_point", "value", "status", "wall_seconds", "seed"}

A failed trial is stored with status "failed" and, as its value, the worst
error observed so far (null when nothing has succeeded yet).
"""
import json
import logging
import os
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd

from engine.errors import DataError, SpaceMismatch
from hpo.space import Space

logger = logging.getLogger(__name__)

OK = "ok"
FAILED = "failed"


class Ledger:
    def __init__(self, path, space: Space, seed: int = 0):
        self.path = Path(path)
        self.space = space
        self.seed = seed
        self.trials = []

    # -- persistence ---------------------------------------------------------

    @classmethod
    def open(cls, path, space: Space, seed: int = 0) -> "Ledger":
        """Resume an existing ledger (space hash must match) or start a new one."""
        ledger = cls(path, space, seed)
        if ledger.path.exists() and ledger.path.stat().st_size:
            header, trials = _read_lines(ledger.path)
            if header.get("space_hash") != space.hash:
                raise SpaceMismatch(f"{ledger.path}: written for space {header.get('space', {}).get('name')!r} "
                                    f"({header.get('space_hash', '')[:12]}), configured space is "
                                    f"{space.name!r} ({space.hash[:12]})")
            ledger.seed = header.get("seed", seed)
            ledger.trials = trials
            logger.info("Resuming %s: %d trials on record", ledger.path, len(trials))
        else:
            ledger.path.parent.mkdir(parents=True, exist_ok=True)
            header = {"type": "header", "space": space.to_dict(), "space_hash": space.hash, "seed": seed,
                      "created": datetime.now().isoformat()}
            ledger._write_line(header, mode="w")
        return ledger

    @classmethod
    def read(cls, path) -> "Ledger":
        """Load a ledger using the space stored in its header."""
        header, trials = _read_lines(Path(path))
        ledger = cls(path, Space.from_dict(header["space"]), header.get("seed", 0))
        ledger.trials = trials
        return ledger

    def _write_line(self, record: dict, mode: str = "a"):
        with open(self.path, mode) as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
            f.flush()
            os.fsync(f.fileno())

    # -- recording -------------------------------------------------------------

    def __len__(self):
        return len(self.trials)

    @property
    def worst_value(self):
        values = [t["value"] for t in self.trials if t["status"] == OK]
        return max(values) if values else None

    def record(self, point: dict, unit_point, value, status: str = OK, wall_seconds: float = 0.0,
               seed: int = None, **meta) -> dict:
        self.space.check(point)
        if status == FAILED:
            value = self.worst_value
        trial = {
            "type": "trial",
            "index": len(self.trials),
            "point": point,
            "unit_point": [float(u) for u in unit_point],
            "value": None if value is None else float(value),
            "status": status,
            "wall_seconds": round(float(wall_seconds), 3),
            "seed": seed,
        }
        if meta:
            trial["meta"] = meta
        self._write_line(trial)
        self.trials.append(trial)
        return trial

    # -- views ---------------------------------------------------------------

    def observations(self) -> tuple:
        """(unit points, values) for the surrogate; failures take the current worst error."""
        worst = self.worst_value
        rows, values = [], []
        for trial in self.trials:
            value = trial["value"] if trial["status"] == OK else worst
            if value is None:
                continue
            rows.append(trial["unit_point"])
            values.append(value)
        return np.array(rows, dtype=float).reshape(-1, len(self.space)), np.array(values, dtype=float)

    def to_frame(self) -> pd.DataFrame:
        if not self.trials:
            return pd.DataFrame(columns=["index", "value", "status", "wall_seconds", "seed"] + self.space.names)
        frame = pd.json_normalize(self.trials)
        frame.columns = [c.removeprefix("point.") for c in frame.columns]
        return frame.drop(columns=["type"], errors="ignore")

    def best(self) -> dict:
        ok = [t for t in self.trials if t["status"] == OK]
        if not ok:
            return None
        return min(ok, key=lambda t: (t["value"], t["index"]))

    def top(self, k: int = 5) -> pd.DataFrame:
        """The k best successful trials, best first."""
        frame = self.to_frame()
        if frame.empty:
            return frame
        return frame[frame["status"] == OK].nsmallest(k, "value", keep="first")


def _read_lines(path: Path) -> tuple:
    if not path.exists():
        raise DataError(f"{path}: ledger not found")
    lines = path.read_text().splitlines()
    records = []
    for number, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            if number == len(lines) - 1:
                # interrupted mid-write; drop the partial line
                logger.warning("%s: ignoring truncated final line", path)
                path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
                break
            raise DataError(f"{path}: line {number + 1} is not valid JSON: {e}") from e
    if not records or records[0].get("type") != "header":
        raise DataError(f"{path}: ledger has no header line")
    return records[0], [r for r in records[1:] if r.get("type") == "trial"]
