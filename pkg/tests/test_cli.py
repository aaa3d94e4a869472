"""
Tests for the command-line stages and the report builder.
"""
import json

import pandas as pd
import pytest

import config
from analysis.report import accuracy_grid, budget_series, gap_table, load_records, write_reports
from analysis.reproduce import (CONV_FAMILY, DEEP_FAMILY, MLP_FAMILY, Reproduction, reproduce, twin_point,
                                write_reproduction)
from distill.families import StudentFamily
from distill.students import HARD_HYPER_BOUNDS
from engine.errors import MimicError
from hpo.ledger import FAILED, Ledger
from hpo.space import hard_space, student_space, teacher_space
from main import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main


@pytest.fixture
def workdir(tmp_path):
    return tmp_path / "work"


def run(workdir, datadir, *argv):
    return main(["--workdir", str(workdir), "--datadir", str(datadir), "--quiet", *argv])


class TestDescribe:
    def test_prints_breakdown(self, workdir, tmp_path, capsys):
        assert run(workdir, tmp_path, "describe", "k5-8c-mp3-4lfc-6fc") == EXIT_OK
        info = json.loads(capsys.readouterr().out)
        assert info["arch"] == "k5-8c-mp3-4lfc-6fc"
        assert info["total"] == 3912

    def test_solves_dependent_width(self, workdir, tmp_path, capsys):
        assert run(workdir, tmp_path, "describe", "64c-mp-lfc-1200fc", "--budget", "1000000") == EXIT_OK
        info = json.loads(capsys.readouterr().out)
        assert 0.99e6 < info["total"] <= 1_000_000

    def test_dependent_without_budget(self, workdir, tmp_path):
        assert run(workdir, tmp_path, "describe", "64c-mp-lfc-1200fc") == EXIT_CONFIG

    def test_bad_arch(self, workdir, tmp_path, capsys):
        assert run(workdir, tmp_path, "describe", "64c-xx-10fc") == EXIT_CONFIG
        assert "position 4" in capsys.readouterr().out


class TestIngest:
    def test_writes_splits_and_manifest(self, workdir, cifar_dir):
        assert run(workdir, cifar_dir, "--scale", "desk", "ingest", "--no-download") == EXIT_OK
        splits = pd.read_csv(workdir / "ingest" / "splits.csv")
        total = 5 * config.CIFAR_RECORDS_PER_FILE
        assert len(splits) == total
        assert (splits["split"] == "validation").sum() == total // 5
        manifest = config.read_manifest(workdir / "ingest")
        assert manifest["command"] == "ingest"
        assert manifest["sizes"]["test"] == config.CIFAR_RECORDS_PER_FILE

    def test_overrides_reach_the_stage(self, workdir, cifar_dir):
        assert run(workdir, cifar_dir, "--set", "train_size=50", "ingest", "--no-download") == EXIT_OK
        manifest = config.read_manifest(workdir / "ingest")
        assert manifest["sizes"]["train"] == 50
        assert manifest["config"]["overrides"] == {"train_size": 50}

    def test_missing_data(self, workdir, tmp_path):
        assert run(workdir, tmp_path / "nowhere", "ingest", "--no-download") == EXIT_DATA

    def test_malformed_override(self, workdir, cifar_dir):
        assert run(workdir, cifar_dir, "--set", "train_size", "ingest", "--no-download") == EXIT_CONFIG

    def test_unknown_scale(self, workdir, cifar_dir):
        with pytest.raises(SystemExit):
            run(workdir, cifar_dir, "--scale", "huge", "ingest")


def fill_work_dir(work_dir):
    space = student_space("CNN-2")
    ledger = Ledger.open(work_dir / "students" / "CNN-2" / "30000" / config.LEDGER_FILE, space)
    for value in (0.4, 0.3):
        ledger.record(space.untransform_point([0.5] * len(space)), [0.5] * len(space), value)
    ledger.record(space.untransform_point([0.2] * len(space)), [0.2] * len(space), None, FAILED)
    run_dir = work_dir / "hard" / "CNN-2" / "30000" / "runs" / "0"
    run_dir.mkdir(parents=True)
    (run_dir / config.RESULT_FILE).write_text(json.dumps({"val_accuracy": 0.6}))


class TestReport:
    def test_empty_work_dir(self, workdir, tmp_path):
        assert run(workdir, tmp_path, "report") == EXIT_OK
        out = workdir / "report"
        grid = pd.read_csv(out / config.GRID_OUTPUT, index_col="family")
        assert grid.isna().all().all()
        assert len(grid) == 9
        assert json.loads((out / config.SERIES_OUTPUT).read_text()) == {}

    def test_records_from_ledgers_and_runs(self, workdir):
        fill_work_dir(workdir)
        records = load_records(workdir)
        assert len(records) == 3
        assert set(records["targets"]) == {"soft", "hard"}

        grid = accuracy_grid(records, [30_000, 100_000])
        assert grid.loc["CNN-2", 30_000] == pytest.approx(0.7)
        assert pd.isna(grid.loc["CNN-2", 100_000])

        gap = gap_table(records)
        assert gap.iloc[0]["gap"] == pytest.approx(0.1)

        series = budget_series(records)
        assert series["CNN-2"] == [{"params": 30_000, "best": pytest.approx(0.7), "kth_best": pytest.approx(0.6),
                                    "mean_top": pytest.approx(0.65), "n": 2}]

    def test_write_reports(self, workdir, tmp_path):
        fill_work_dir(workdir)
        paths = write_reports(workdir, [30_000], tmp_path / "out")
        assert all(path.exists() for path in paths.values())
        gap = pd.read_csv(paths["gap"])
        assert gap["family"].tolist() == ["CNN-2"]


class TestStageErrors:
    def test_ensemble_without_candidates(self, workdir, cifar_dir):
        assert run(workdir, cifar_dir, "build-ensemble") == EXIT_DATA

    def test_unknown_hpo_stage(self, workdir, cifar_dir):
        assert run(workdir, cifar_dir, "hpo", "--stage", "pupil") == EXIT_CONFIG

    def test_student_stage_needs_budget(self, workdir, cifar_dir):
        assert run(workdir, cifar_dir, "hpo", "--stage", "student:CNN-2") == EXIT_CONFIG

    def test_point_outside_space(self, workdir, cifar_dir):
        point = json.dumps({"lr": 0.5, "momentum": 0.9, "DOf1": 0.3, "w1": 0.5})
        assert run(workdir, cifar_dir, "train-student", "--family", "MLP-1", "--budget", "30000",
                   "--hard", "--point", point) == EXIT_CONFIG

    def test_teacher_point_from_file(self, workdir, cifar_dir, tmp_path):
        path = tmp_path / "point.json"
        path.write_text(json.dumps({"lr": 0.02}))
        assert run(workdir, cifar_dir, "--scale", "desk", "train-teacher", "--point", str(path)) == EXIT_CONFIG


ACCURACY = {CONV_FAMILY: 0.70, MLP_FAMILY: 0.60, DEEP_FAMILY: 0.72}
HARD_DROP = {CONV_FAMILY: 0.02, MLP_FAMILY: 0.04, DEEP_FAMILY: 0.01}


class CountingRuns:
    """Stand-in training: accuracy depends on family and learning rate only."""

    def __init__(self, accuracy=ACCURACY):
        self.accuracy = accuracy
        self.soft_calls, self.hard_calls = [], []

    def soft(self, family_id, point, seed):
        self.soft_calls.append((family_id, seed))
        return self.accuracy[family_id] - 0.05 * point["lr"]

    def hard(self, family_id, point, seed):
        self.hard_calls.append((family_id, seed))
        return self.accuracy[family_id] - HARD_DROP[family_id]


class TestReproduce:
    def test_twin_point_keeps_architecture(self):
        soft = student_space(CONV_FAMILY).untransform_point([0.9] * len(student_space(CONV_FAMILY)))
        hard = twin_point(CONV_FAMILY, soft)
        hard_space(CONV_FAMILY).check(hard)
        for key in StudentFamily(CONV_FAMILY, 100_000).width_keys:
            assert hard[key] == soft[key]
        for name, (lo, hi) in HARD_HYPER_BOUNDS.items():
            assert lo <= hard[name] <= hi

    def test_checks_pass_on_expected_ordering(self, tmp_path):
        runs = CountingRuns()
        result = reproduce(runs.soft, runs.hard, tmp_path, seed=4)
        assert result.conv_gap == pytest.approx(10.0, abs=0.1)
        gaps = result.compression_gaps()
        assert gaps[CONV_FAMILY] == pytest.approx(2.0, abs=0.1)
        assert gaps[MLP_FAMILY] > gaps[DEEP_FAMILY]
        assert result.drift == 0.0
        assert result.checks() == {"conv_gap": True, "soft_beats_hard": True, "gap_shrinks_with_depth": True,
                                   "deterministic": True}

    def test_runs_best_of_five_then_three_seeds(self, tmp_path):
        runs = CountingRuns()
        reproduce(runs.soft, runs.hard, tmp_path, seed=4)
        # 3 searches, 3 soft twins per family, 2 repeated searches
        assert len(runs.soft_calls) == 5 * 3 + 3 * 3 + 5 * 2
        assert sorted(runs.hard_calls) == sorted((f, s) for f in ACCURACY for s in (4, 5, 6))
        for family in (CONV_FAMILY, MLP_FAMILY):
            assert len(Ledger.read(tmp_path / "search" / family / config.LEDGER_FILE)) == 5
            assert len(Ledger.read(tmp_path / "repeat" / family / config.LEDGER_FILE)) == 5

    def test_mlp_ahead_fails_conv_gap(self, tmp_path):
        runs = CountingRuns({CONV_FAMILY: 0.60, MLP_FAMILY: 0.62, DEEP_FAMILY: 0.65})
        result = reproduce(runs.soft, runs.hard, tmp_path, repeat=False)
        checks = result.checks()
        assert not checks["conv_gap"]
        assert "deterministic" not in checks
        assert result.drift is None

    def test_all_trials_failing(self, tmp_path):
        def broken(family_id, point, seed):
            raise FloatingPointError("diverged")

        with pytest.raises(MimicError, match="every CNN-1 trial failed"):
            reproduce(broken, broken, tmp_path, trials=2)

    def test_write_reproduction(self, tmp_path):
        result = Reproduction(100_000, best={CONV_FAMILY: 0.7, MLP_FAMILY: 0.6, DEEP_FAMILY: 0.71},
                              soft={f: [0.7, 0.6, 0.65] for f in ACCURACY},
                              hard={f: [0.6, 0.6, 0.6] for f in ACCURACY},
                              repeat={CONV_FAMILY: 0.7, MLP_FAMILY: 0.6005})
        paths = write_reproduction(result, tmp_path / "out")
        frame = pd.read_csv(paths["table"])
        assert frame["family"].tolist() == list(ACCURACY)
        assert frame["gap"].tolist() == pytest.approx([5.0] * 3)
        summary = json.loads(paths["summary"].read_text())
        assert summary["drift"] == pytest.approx(0.05)
        assert summary["checks"]["deterministic"] is True
        assert summary["checks"]["conv_gap"] is True


TINY = ["--seed", "0", "--scale", "desk", "--set", "max_epochs=1", "--set", "train_size=40"]


def build_desk_transfer(workdir, cifar_dir):
    """One desk teacher, a one-member ensemble and a one-epoch transfer set; returns the teacher point."""
    teacher = teacher_space("teacher-desk").untransform_point([0.5] * 15)
    assert run(workdir, cifar_dir, *TINY, "train-teacher", "--point", json.dumps(teacher)) == EXIT_OK
    checkpoint = workdir / "teacher" / "runs" / "0" / config.CHECKPOINT_FILE
    assert checkpoint.exists()
    assert run(workdir, cifar_dir, *TINY, "build-ensemble", "--candidates", str(checkpoint)) == EXIT_OK
    assert run(workdir, cifar_dir, *TINY, "gen-transfer", "--epochs", "1") == EXIT_OK
    return teacher


@pytest.mark.slow
def test_desk_pipeline_end_to_end(workdir, cifar_dir):
    teacher = build_desk_transfer(workdir, cifar_dir)
    checkpoint = workdir / "teacher" / "runs" / "0" / config.CHECKPOINT_FILE
    assert run(workdir, cifar_dir, *TINY, "train-student", "--family", "MLP-1", "--budget", "30000") == EXIT_OK
    assert run(workdir, cifar_dir, *TINY, "report") == EXIT_OK

    result = json.loads((workdir / "students" / "MLP-1" / "30000" / "runs" / "0" / config.RESULT_FILE).read_text())
    assert result["params"] <= 30_000
    assert result["family"] == "MLP-1"
    grid = pd.read_csv(workdir / "report" / config.GRID_OUTPUT, index_col="family")
    assert grid.loc["MLP-1", "30000"] == pytest.approx(result["val_accuracy"])
    # unchanged inputs leave outputs alone
    stamp = checkpoint.stat().st_mtime_ns
    assert run(workdir, cifar_dir, *TINY, "train-teacher", "--point", json.dumps(teacher)) == EXIT_OK
    assert checkpoint.stat().st_mtime_ns == stamp


@pytest.mark.slow
def test_desk_reproduction_is_repeatable(workdir, cifar_dir):
    build_desk_transfer(workdir, cifar_dir)
    assert run(workdir, cifar_dir, *TINY, "reproduce", "--trials", "2", "--seeds", "1") == EXIT_OK
    out = workdir / "reproduce" / "100000"
    summary = json.loads((out / config.REPRODUCTION_SUMMARY).read_text())
    assert summary["drift"] <= 0.2
    assert summary["checks"]["deterministic"] is True
    assert set(summary["compression_gaps"]) == {CONV_FAMILY, MLP_FAMILY, DEEP_FAMILY}
    frame = pd.read_csv(out / config.REPRODUCTION_OUTPUT)
    assert frame["best"].between(0.0, 1.0).all()
    assert config.read_manifest(out)["command"] == "reproduce"
