#!/usr/bin/env python3
"""
Mimic Budget Pipeline - Main Orchestrator

Stages, each a subcommand writing its outputs plus a manifest.json under the
work directory:

    ingest          download / load CIFAR-10, record the train/validation split
    train-teacher   train one teacher from a hyperparameter point
    hpo             Bayesian search for teachers, students or hard-target twins
    build-ensemble  greedy selection of teacher checkpoints
    gen-transfer    pre-generate the augmented, ensemble-labeled transfer set
    train-student   train one student (or its hard-target twin)
    report          accuracy grid, compression gaps, budget series
    reproduce       desk-scale conv-gap, compression-gap and determinism checks
    describe        parameter breakdown of an architecture string

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 run failure.
"""
import argparse
import json
import logging
import shutil
import sys
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

import config
from engine.errors import (ArchParseError, BoundsError, BudgetError, DataError, FingerprintMismatch, MimicError,
                           SpaceMismatch, TrainingDiverged)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_point(text: str) -> dict:
    """A hyperparameter point given inline as JSON or as a path to a JSON file."""
    if text is None:
        return None
    path = Path(text)
    raw = path.read_text() if path.exists() else text
    try:
        point = json.loads(raw)
    except json.JSONDecodeError as e:
        raise BoundsError(f"--point is neither a JSON object nor a JSON file: {e}") from e
    if not isinstance(point, dict):
        raise BoundsError("--point must be a JSON object")
    return point


def load_splits(cfg: config.ExperimentConfig) -> tuple:
    from pipeline.cifar import load_cifar10, subsample

    train, validation, test = load_cifar10(cfg.data_dir, cfg.seed)
    train = subsample(train, cfg.get("train_size"), cfg.seed)
    validation = subsample(validation, cfg.get("validation_size"), cfg.seed)
    return train, validation, test


def up_to_date(directory: Path, inputs: dict, outputs: list, force: bool) -> bool:
    """True when a previous run with identical inputs left every output in place."""
    if force:
        return False
    manifest = config.read_manifest(directory)
    if not manifest or manifest.get("inputs") != json.loads(json.dumps(inputs, default=str)):
        return False
    if all((directory / name).exists() for name in outputs):
        print(f"  ✓ Up to date: {directory} (use --force to rerun)")
        return True
    return False


def record_manifest(directory: Path, command: str, cfg, inputs: dict, outputs: list, **extra) -> Path:
    payload = {
        "command": command,
        "created": datetime.now().isoformat(),
        "config": cfg.to_manifest(),
        "versions": config.package_versions(),
        "inputs": inputs,
        "outputs": [str(directory / name) for name in outputs],
    }
    payload.update(extra)
    return config.write_manifest(directory, payload)


def ensemble_paths(cfg) -> tuple:
    return cfg.work_dir / "ensemble" / config.ENSEMBLE_FILE, cfg.work_dir / "transfer" / config.TRANSFER_FILE


def student_dir(cfg, hard: bool, family: str, budget: int) -> Path:
    return cfg.stage_dir("hard" if hard else "students", family, str(budget))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_ingest(args, cfg):
    """Download (if needed), load and split CIFAR-10."""
    from pipeline.cifar import download_cifar10, has_cifar10

    print("\n[1/2] Checking CIFAR-10 files...")
    if not has_cifar10(cfg.data_dir):
        if args.no_download:
            raise DataError(f"{cfg.data_dir}: CIFAR-10 binary batches not found")
        download_cifar10(cfg.data_dir)
    print(f"  ✓ Data in {cfg.data_dir}")

    print("\n[2/2] Loading and splitting...")
    train, validation, test = load_splits(cfg)
    out = cfg.stage_dir("ingest")
    splits = pd.DataFrame({
        "index": np.concatenate([train.indices, validation.indices]),
        "split": ["train"] * len(train) + ["validation"] * len(validation),
    })
    splits.to_csv(out / "splits.csv", index=False)
    record_manifest(out, "ingest", cfg, {"data_dir": str(cfg.data_dir)}, ["splits.csv"],
                    sizes={"train": len(train), "validation": len(validation), "test": len(test)})
    print(f"  ✓ {len(train)} train / {len(validation)} validation / {len(test)} test")
    return EXIT_OK


def cmd_train_teacher(args, cfg):
    from distill.families import teacher_family
    from distill.students import train_teacher
    from hpo.ledger import Ledger
    from hpo.search import propose
    from hpo.space import teacher_space

    family = teacher_family(args.family or cfg.get("teacher_family"))
    space = teacher_space(family.name)
    point = parse_point(args.point)
    if point is None:
        ledger = Ledger.open(cfg.stage_dir("teacher", "hpo") / config.LEDGER_FILE, space, cfg.seed)
        point, _ = propose(ledger, [])
        print("  Using the next HPO suggestion")
    space.check(point)

    out = cfg.stage_dir("teacher", "runs", str(cfg.seed))
    outputs = [config.CHECKPOINT_FILE, config.HISTORY_FILE, config.RESULT_FILE]
    inputs = {"family": family.name, "point": point, "seed": cfg.seed}
    if up_to_date(out, inputs, outputs, cfg.force):
        return EXIT_OK

    print("\n[1/2] Loading data...")
    train, validation, _ = load_splits(cfg)
    print(f"\n[2/2] Training teacher {family.spec(point)}...")
    result = train_teacher(family, train, validation, point, cfg.seed, cfg.get("max_epochs"),
                           cfg.get("batch_size"), progress=not args.quiet)
    result.save(out)
    record_manifest(out, "train-teacher", cfg, inputs, outputs, arch=result.model.arch,
                    result=result.summary())
    print(f"  ✓ Validation accuracy {result.val_accuracy:.4f} -> {out}")
    return EXIT_OK


def _teacher_objective(cfg, family, trials_dir):
    from distill.students import train_teacher

    train, validation, _ = load_splits(cfg)

    def objective(point, seed):
        result = train_teacher(family, train, validation, point, seed, cfg.get("max_epochs"),
                               cfg.get("batch_size"), progress=False)
        result.save(trials_dir / str(seed))
        return result.best_val_err

    return objective


def _student_objective(cfg, family, trials_dir, hard):
    from distill.ensemble import load_ensemble
    from distill.students import train_hard_twin, train_student
    from pipeline.transfer import read_transfer_set

    train, validation, _ = load_splits(cfg)
    if hard:
        def objective(point, seed):
            run = train_hard_twin(family, train, validation, point, seed, max_epochs=cfg.get("max_epochs"),
                                  batch_size=cfg.get("batch_size"), progress=False)
            run.result.save(trials_dir / str(seed))
            return run.result.best_val_err
        return objective

    manifest_path, transfer_path = ensemble_paths(cfg)
    ensemble = load_ensemble(manifest_path)
    transfer = read_transfer_set(transfer_path)
    ensemble.check(transfer.header.fingerprint)

    def objective(point, seed):
        run = train_student(family, transfer, validation, point, seed, ensemble, cfg.get("max_epochs"),
                            cfg.get("batch_size"), progress=False)
        run.result.save(trials_dir / str(seed))
        return run.result.best_val_err

    return objective


def cmd_hpo(args, cfg):
    from distill.families import StudentFamily, teacher_family
    from hpo.ledger import Ledger
    from hpo.search import run_search
    from hpo.space import get_space

    stage = args.stage
    if stage == "teacher":
        family = teacher_family(cfg.get("teacher_family"))
        space = get_space(family.name)
        out = cfg.stage_dir("teacher", "hpo")
        trials = args.trials or cfg.get("teacher_trials")
        objective_factory = lambda: _teacher_objective(cfg, family, out / "trials")
    elif stage.startswith(("student:", "hard:")):
        kind, family_id = stage.split(":", 1)
        if args.budget is None:
            raise BoundsError(f"--budget is required for stage {stage}")
        family = StudentFamily(family_id, args.budget)
        space = get_space(stage)
        hard = kind == "hard"
        out = student_dir(cfg, hard, family_id, args.budget)
        trials = args.trials or cfg.get("student_trials")
        objective_factory = lambda: _student_objective(cfg, family, out / "trials", hard)
    else:
        raise BoundsError(f"unknown stage {stage!r}; use teacher, student:<family> or hard:<family>")

    ledger_path = out / config.LEDGER_FILE
    if cfg.force and ledger_path.exists():
        ledger_path.unlink()
    print(f"\n[1/2] Searching {space.name} ({len(space)} dims, {trials} trials)...")
    best = run_search(objective_factory(), space, trials, ledger_path, seed=cfg.seed,
                      parallelism=args.parallel or cfg.workers, noise=True, progress=not args.quiet)

    print("\n[2/2] Summarizing...")
    ledger = Ledger.read(ledger_path)
    top = ledger.top(config.HPO_TOP_K)
    top.to_csv(out / config.SUMMARY_FILE, index=False)
    record_manifest(out, "hpo", cfg, {"stage": stage, "budget": args.budget, "trials": trials},
                    [config.LEDGER_FILE, config.SUMMARY_FILE], space=space.to_dict(), space_hash=space.hash,
                    best=best)
    if best:
        print(f"  ✓ Best validation error {best['value']:.4f} (trial {best['index']})")
    print(f"  ✓ {len(ledger)} trials in {ledger_path}")
    return EXIT_OK


def _candidate_checkpoints(cfg) -> list:
    teacher = cfg.work_dir / "teacher"
    found = sorted(teacher.glob("hpo/trials/*/" + config.CHECKPOINT_FILE))
    found += sorted(teacher.glob("runs/*/" + config.CHECKPOINT_FILE))
    return found


def cmd_build_ensemble(args, cfg):
    from distill.ensemble import select_ensemble, write_ensemble_manifest
    from engine.checkpoint import load_checkpoint
    from training.trainer import prepare_inputs

    paths = [Path(p) for p in args.candidates] if args.candidates else _candidate_checkpoints(cfg)
    if not paths:
        raise DataError("no candidate teacher checkpoints; run train-teacher or hpo --stage teacher first")
    max_size = args.max_size or cfg.get("ensemble_size")
    out = cfg.stage_dir("ensemble")
    inputs = {"candidates": [str(p) for p in paths], "max_size": max_size, "seed": cfg.seed}
    if up_to_date(out, inputs, [config.ENSEMBLE_FILE], cfg.force):
        return EXIT_OK

    print(f"\n[1/2] Loading {len(paths)} candidate teachers...")
    candidates = [load_checkpoint(p) for p in paths]
    _, validation, _ = load_splits(cfg)

    print(f"\n[2/2] Selecting up to {max_size} members...")
    ensemble = select_ensemble(candidates, prepare_inputs(validation.images), validation.labels, max_size, paths)
    write_ensemble_manifest(out / config.ENSEMBLE_FILE, ensemble)
    record_manifest(out, "build-ensemble", cfg, inputs, [config.ENSEMBLE_FILE], fingerprint=ensemble.hexdigest)
    print(f"  ✓ {len(ensemble)} members, validation accuracy {ensemble.val_accuracy:.4f}")
    print(f"  ✓ Fingerprint {ensemble.hexdigest[:16]}")
    return EXIT_OK


def cmd_gen_transfer(args, cfg):
    from distill.ensemble import load_ensemble
    from pipeline.augment import AugmentConfig
    from pipeline.transfer import generate_transfer_set

    manifest_path, transfer_path = ensemble_paths(cfg)
    ensemble = load_ensemble(args.ensemble or manifest_path)
    epochs = args.epochs or cfg.get("transfer_epochs")
    out = transfer_path.parent
    out.mkdir(parents=True, exist_ok=True)
    aug = AugmentConfig.best_model()
    inputs = {"ensemble": ensemble.hexdigest, "epochs": epochs, "seed": cfg.seed, "augment": aug.to_dict()}
    if up_to_date(out, inputs, [config.TRANSFER_FILE], cfg.force):
        return EXIT_OK

    print("\n[1/2] Loading training split...")
    train, _, _ = load_splits(cfg)
    print(f"\n[2/2] Generating {epochs} epochs x {len(train)} images...")
    transfer = generate_transfer_set(train, ensemble, epochs, aug, cfg.seed, transfer_path,
                                     workers=cfg.workers, progress=not args.quiet)
    record_manifest(out, "gen-transfer", cfg, inputs, [config.TRANSFER_FILE], fingerprint=ensemble.hexdigest,
                    records=len(transfer))
    print(f"  ✓ {len(transfer)} records -> {transfer_path}")
    return EXIT_OK


def cmd_train_student(args, cfg):
    from distill.ensemble import load_ensemble
    from distill.families import StudentFamily
    from distill.students import train_hard_twin, train_student
    from hpo.space import get_space
    from pipeline.transfer import read_transfer_set

    family = StudentFamily(args.family, args.budget)
    space = get_space(("hard:" if args.hard else "student:") + args.family)
    point = parse_point(args.point) or space.untransform_point(np.full(len(space), 0.5))
    space.check(point)

    out = student_dir(cfg, args.hard, args.family, args.budget) / "runs" / str(cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [config.CHECKPOINT_FILE, config.HISTORY_FILE, config.RESULT_FILE]
    inputs = {"family": args.family, "budget": args.budget, "hard": args.hard, "point": point, "seed": cfg.seed}
    if up_to_date(out, inputs, outputs, cfg.force):
        return EXIT_OK

    print("\n[1/2] Loading data...")
    train, validation, _ = load_splits(cfg)
    extra = {}
    print(f"\n[2/2] Training {'hard-target twin' if args.hard else 'student'} {family}...")
    if args.hard:
        run = train_hard_twin(family, train, validation, point, cfg.seed, max_epochs=cfg.get("max_epochs"),
                              batch_size=cfg.get("batch_size"), progress=not args.quiet)
    else:
        manifest_path, transfer_path = ensemble_paths(cfg)
        ensemble = load_ensemble(manifest_path)
        transfer = read_transfer_set(args.transfer or transfer_path)
        run = train_student(family, transfer, validation, point, cfg.seed, ensemble, cfg.get("max_epochs"),
                            cfg.get("batch_size"), progress=not args.quiet)
        extra["fingerprint"] = ensemble.hexdigest
    run.result.save(out)
    summary = run.summary()
    (out / config.RESULT_FILE).write_text(json.dumps(summary, indent=2))
    record_manifest(out, "train-student", cfg, inputs, outputs, arch=run.result.model.arch, result=summary, **extra)
    print(f"  ✓ {run.result.model.arch}: validation accuracy {run.val_accuracy:.4f}")
    return EXIT_OK


def cmd_report(args, cfg):
    from analysis import report

    print("\n[1/1] Building reports...")
    out = Path(args.out) if args.out else cfg.stage_dir("report")
    paths = report.write_reports(cfg.work_dir, cfg.get("budgets"), out)
    record_manifest(out, "report", cfg, {"work_dir": str(cfg.work_dir)}, [p.name for p in paths.values()])
    for path in paths.values():
        print(f"  ✓ {path}")
    return EXIT_OK


def cmd_reproduce(args, cfg):
    from analysis.reproduce import DESK_BUDGET, GAP_SEEDS, SEARCH_TRIALS, reproduce, write_reproduction
    from distill.ensemble import load_ensemble
    from distill.families import StudentFamily
    from distill.students import train_hard_twin, train_student
    from pipeline.transfer import read_transfer_set

    budget = args.budget or DESK_BUDGET
    out = cfg.stage_dir("reproduce", str(budget))
    if cfg.force:
        for name in ("search", "repeat"):
            shutil.rmtree(out / name, ignore_errors=True)

    print("\n[1/3] Loading data and transfer set...")
    train, validation, _ = load_splits(cfg)
    manifest_path, transfer_path = ensemble_paths(cfg)
    ensemble = load_ensemble(manifest_path)
    transfer = read_transfer_set(transfer_path)
    ensemble.check(transfer.header.fingerprint)
    max_epochs, batch_size = cfg.get("max_epochs"), cfg.get("batch_size")

    def soft(family_id, point, seed):
        return train_student(StudentFamily(family_id, budget), transfer, validation, point, seed, ensemble,
                             max_epochs, batch_size, progress=False).val_accuracy

    def hard(family_id, point, seed):
        return train_hard_twin(StudentFamily(family_id, budget), train, validation, point, seed,
                               max_epochs=max_epochs, batch_size=batch_size, progress=False).val_accuracy

    trials, seeds = args.trials or SEARCH_TRIALS, args.seeds or GAP_SEEDS
    print(f"\n[2/3] Searching ({trials} trials per family), training twins over {seeds} seeds...")
    result = reproduce(soft, hard, out, seed=cfg.seed, budget=budget, trials=trials, seeds=seeds,
                       repeat=not args.no_repeat)

    print("\n[3/3] Writing results...")
    paths = write_reproduction(result, out)
    inputs = {"budget": budget, "trials": trials, "seeds": seeds, "fingerprint": ensemble.hexdigest}
    record_manifest(out, "reproduce", cfg, inputs, [p.name for p in paths.values()], summary=result.summary())
    print(f"  Conv gap: {result.conv_gap:+.2f} points")
    for family, gap in result.compression_gaps().items():
        print(f"  Compression gap {family}: {gap:+.2f} points")
    if result.drift is not None:
        print(f"  Largest repeat drift: {result.drift:.3f} points")
    checks = result.checks()
    for name, passed in checks.items():
        print(f"  {'✓' if passed else '✗'} {name}")
    if args.strict and not all(checks.values()):
        return EXIT_RUN
    return EXIT_OK


def cmd_describe(args, cfg):
    from arch.grammar import describe, parse, solve_dependent_width

    spec = parse(args.arch)
    if spec.dependent_index is not None:
        if args.budget is None:
            raise BudgetError(f"{args.arch!r} has a dependent width; pass --budget to solve it")
        spec = solve_dependent_width(spec, args.budget)
    print(json.dumps(describe(spec), indent=2))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "train-teacher": cmd_train_teacher,
    "hpo": cmd_hpo,
    "build-ensemble": cmd_build_ensemble,
    "gen-transfer": cmd_gen_transfer,
    "train-student": cmd_train_student,
    "report": cmd_report,
    "reproduce": cmd_reproduce,
    "describe": cmd_describe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Mimic Budget Pipeline")
    parser.add_argument("--seed", type=int, default=config.DEFAULT_SEED, help="Master seed")
    parser.add_argument("--scale", choices=sorted(config.PRESETS), default=config.DEFAULT_SCALE,
                        help="Scale preset")
    parser.add_argument("--workdir", type=Path, default=config.WORK_DIR, help="Work directory")
    parser.add_argument("--datadir", type=Path, default=config.DATA_DIR, help="CIFAR-10 binary directory")
    parser.add_argument("--workers", type=int, default=config.DEFAULT_WORKERS, help="Parallel workers")
    parser.add_argument("--force", action="store_true", help="Rerun even if outputs are up to date")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a preset value (e.g. --set max_epochs=3)")
    parser.add_argument("-q", "--quiet", action="store_true", help="No progress bars")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="Download, load and split CIFAR-10")
    ingest.add_argument("--no-download", action="store_true", help="Fail instead of downloading")

    teacher = sub.add_parser("train-teacher", help="Train one teacher")
    teacher.add_argument("--point", help="Hyperparameter point (JSON or JSON file)")
    teacher.add_argument("--family", choices=["teacher-full", "teacher-desk"], help="Teacher family")

    hpo = sub.add_parser("hpo", help="Bayesian hyperparameter search")
    hpo.add_argument("--stage", required=True, help="teacher | student:<family> | hard:<family>")
    hpo.add_argument("--budget", type=int, help="Parameter budget (student stages)")
    hpo.add_argument("--trials", type=int, help="Number of trials (default: preset)")
    hpo.add_argument("--parallel", type=int, help="Concurrent trials (default: --workers)")

    ensemble = sub.add_parser("build-ensemble", help="Select teachers into an ensemble")
    ensemble.add_argument("--candidates", nargs="*", help="Candidate checkpoints (default: all teachers)")
    ensemble.add_argument("--max-size", type=int, help="Maximum ensemble size (default: preset)")

    transfer = sub.add_parser("gen-transfer", help="Generate the transfer set")
    transfer.add_argument("--ensemble", type=Path, help="Ensemble manifest (default: work/ensemble)")
    transfer.add_argument("--epochs", type=int, help="Epochs worth of augmented images (default: preset)")

    student = sub.add_parser("train-student", help="Train one student")
    student.add_argument("--family", required=True, help="MLP-1..5 or CNN-1..4")
    student.add_argument("--budget", type=int, required=True, help="Parameter budget")
    student.add_argument("--point", help="Hyperparameter point (JSON or JSON file)")
    student.add_argument("--hard", action="store_true", help="Train the hard-target twin instead")
    student.add_argument("--transfer", type=Path, help="Transfer set (default: work/transfer)")

    report = sub.add_parser("report", help="Write report tables")
    report.add_argument("--out", help="Output directory (default: work/report)")

    reproduce = sub.add_parser("reproduce", help="Desk-scale gap and determinism checks")
    reproduce.add_argument("--budget", type=int, help="Student budget (default: 100000)")
    reproduce.add_argument("--trials", type=int, help="Search trials per family (default: 5)")
    reproduce.add_argument("--seeds", type=int, help="Seeds per soft/hard twin pair (default: 3)")
    reproduce.add_argument("--no-repeat", action="store_true", help="Skip the determinism repeat")
    reproduce.add_argument("--strict", action="store_true", help="Exit 4 when a check fails")

    describe = sub.add_parser("describe", help="Describe an architecture string")
    describe.add_argument("arch", help='e.g. "k5-64c-mp3-lfc-1200fc"')
    describe.add_argument("--budget", type=int, help="Solve the dependent width under this budget")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command != "describe":
        print("=" * 50)
        print(f"MIMIC BUDGET PIPELINE: {args.command}")
        print("=" * 50)

    try:
        overrides = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise BoundsError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key] = parse_value(value)
        cfg = config.ExperimentConfig(args.datadir, args.workdir, args.scale, args.seed, args.workers,
                                      args.force, overrides)
        return COMMANDS[args.command](args, cfg)
    except (DataError, FingerprintMismatch) as e:
        print(f"  ✗ Data error: {e}")
        return EXIT_DATA
    except (BoundsError, ArchParseError, BudgetError, SpaceMismatch) as e:
        print(f"  ✗ Config error: {e}")
        return EXIT_CONFIG
    except (TrainingDiverged, MimicError) as e:
        print(f"  ✗ Error: {e}")
        return EXIT_RUN
    except ValueError as e:
        print(f"  ✗ Config error: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
