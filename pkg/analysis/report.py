#!/usr/bin/env python3
"""
Report Builder

Collects student results from the work directory and writes:

  accuracy_grid.csv       best soft-target accuracy per family (rows) and budget (columns)
  compression_gap.csv   soft vs hard-target accuracy of identical architectures
  budget_series.json   per-family best / 5th-best / top-5 mean accuracy against budget

Results come from HPO ledgers (work/<students|hard>/<family>/<budget>/ledger.jsonl)
and single runs (.../runs/<seed>/result.json).
"""
import json
from pathlib import Path

import pandas as pd

import sys
sys.path.insert(0, str(Path(__file__).parent.parent))
import config
from distill.families import STUDENT_FAMILIES
from distill.students import compression_gap
from hpo.ledger import OK, Ledger

RECORD_COLUMNS = ["family", "budget", "targets", "accuracy", "source"]
GAP_COLUMNS = ["family", "budget", "soft_accuracy", "hard_accuracy", "gap"]
STAGES = {"students": "soft", "hard": "hard"}


def load_records(work_dir) -> pd.DataFrame:
    """One row per finished student run: family, budget, soft|hard, validation accuracy."""
    work_dir = Path(work_dir)
    rows = []
    for stage, targets in STAGES.items():
        root = work_dir / stage
        if not root.exists():
            continue
        for ledger_path in sorted(root.glob("*/*/" + config.LEDGER_FILE)):
            family, budget = ledger_path.parent.parent.name, int(ledger_path.parent.name)
            for trial in Ledger.read(ledger_path).trials:
                if trial["status"] == OK:
                    rows.append((family, budget, targets, 1.0 - trial["value"], f"hpo:{trial['index']}"))
        for result_path in sorted(root.glob("*/*/runs/*/" + config.RESULT_FILE)):
            family, budget = result_path.parents[2].name, int(result_path.parents[1].name)
            result = json.loads(result_path.read_text())
            rows.append((family, budget, targets, result["val_accuracy"], f"run:{result_path.parent.name}"))
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def accuracy_grid(records: pd.DataFrame, budgets, families=STUDENT_FAMILIES) -> pd.DataFrame:
    """Best soft-target accuracy per cell; cells without results stay empty."""
    soft = records[records["targets"] == "soft"]
    best = soft.groupby(["family", "budget"])["accuracy"].max()
    grid = pd.DataFrame(index=pd.Index(list(families), name="family"), columns=list(budgets), dtype=float)
    for (family, budget), accuracy in best.items():
        if family in grid.index and budget in grid.columns:
            grid.loc[family, budget] = accuracy
    return grid


def gap_table(records: pd.DataFrame) -> pd.DataFrame:
    """Compression gap for every cell with both soft and hard results (best of each)."""
    if records.empty:
        return pd.DataFrame(columns=GAP_COLUMNS)
    best = records.groupby(["family", "budget", "targets"])["accuracy"].max().unstack("targets")
    rows = []
    for (family, budget), row in best.iterrows():
        soft, hard = row.get("soft"), row.get("hard")
        if pd.notna(soft) and pd.notna(hard):
            rows.append((family, budget, soft, hard, compression_gap(soft, hard)))
    return pd.DataFrame(rows, columns=GAP_COLUMNS)


def budget_series(records: pd.DataFrame, k: int = config.HPO_TOP_K) -> dict:
    """Per family: for each budget the best, k-th best and mean of the k best accuracies."""
    series = {}
    soft = records[records["targets"] == "soft"]
    for (family, budget), group in soft.groupby(["family", "budget"]):
        top = group["accuracy"].nlargest(k)
        series.setdefault(family, []).append({
            "params": int(budget),
            "best": float(top.iloc[0]),
            "kth_best": float(top.iloc[-1]),
            "mean_top": float(top.mean()),
            "n": int(len(group)),
        })
    for points in series.values():
        points.sort(key=lambda p: p["params"])
    return series


def write_reports(work_dir, budgets, out_dir=None) -> dict:
    """Write all three reports; returns {name: path}."""
    work_dir = Path(work_dir)
    out_dir = Path(out_dir) if out_dir else work_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    records = load_records(work_dir)

    paths = {
        "grid": out_dir / config.GRID_OUTPUT,
        "gap": out_dir / config.GAP_OUTPUT,
        "series": out_dir / config.SERIES_OUTPUT,
    }
    accuracy_grid(records, budgets).to_csv(paths["grid"])
    gap_table(records).to_csv(paths["gap"], index=False)
    paths["series"].write_text(json.dumps(budget_series(records), indent=2))
    print(f"  {len(records)} student results from {work_dir}")
    return paths


def main():
    """Build reports for the default work directory."""
    print("\n[Report Builder]")
    print("=" * 50)
    preset = config.PRESETS[config.DEFAULT_SCALE]
    paths = write_reports(config.WORK_DIR, preset.budgets)

    grid = pd.read_csv(paths["grid"], index_col="family")
    print("\n" + "=" * 50)
    print("BEST ACCURACY BY FAMILY AND BUDGET")
    print("=" * 50)
    print(grid.to_string())


if __name__ == "__main__":
    main()
