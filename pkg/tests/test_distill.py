"""
Tests for ensembles, student/teacher families and the student training runs.
"""
import itertools
from dataclasses import replace

import numpy as np
import pytest

import config
from arch.grammar import count_params, parse, render
from distill.ensemble import (Ensemble, average_logits, ensemble_logits, load_ensemble, select_ensemble,
                              write_ensemble_manifest)
from distill.families import (STUDENT_FAMILIES, StudentFamily, make_student, student_bounds, student_spec,
                              teacher_family)
from distill.students import compression_gap, train_hard_twin, train_student, train_teacher
from engine.checkpoint import save_checkpoint
from engine.errors import BoundsError, FingerprintMismatch
from engine.layers import Affine, Dropout, Flatten
from engine.model import Model, build_model, dropout_site_names
from engine.rng import derive_stream
from hpo.space import hard_space, student_space, teacher_space
from pipeline.augment import AugmentConfig
from pipeline.cifar import Dataset, load_cifar10
from pipeline.transfer import RECORD_DTYPE, TransferHeader, TransferSet
from training.trainer import prepare_inputs


def constant_model(logits) -> Model:
    """A model that ignores its 4-feature input and always emits the given logits."""
    bias = np.asarray(logits, dtype=np.float32)
    out = Affine.from_arrays("out", np.zeros((4, len(bias)), dtype=np.float32), bias, "linear")
    return Model([Flatten("flatten"), out], arch=None)


def toy_inputs(n=3):
    return np.zeros((n, 1, 2, 2), dtype=np.float32)


def lookup_model(table) -> Model:
    """A model whose input is a one-hot row index and whose logits are that row of table."""
    table = np.asarray(table, dtype=np.float32)
    out = Affine.from_arrays("out", table, np.zeros(table.shape[1], dtype=np.float32), "linear")
    return Model([Flatten("flatten"), out], arch=None)


def block_experts(sizes, labels):
    """One model per block of points: confident and right inside its block, mildly wrong outside it."""
    experts, start = [], 0
    for size in sizes:
        table = np.zeros((len(labels), config.NUM_CLASSES))
        table[np.arange(len(labels)), 1 - labels] = 1.0
        block = np.arange(start, start + size)
        table[block, 1 - labels[block]] = 0.0
        table[block, labels[block]] = 10.0
        experts.append(lookup_model(table))
        start += size
    return experts


class TestEnsembleLogits:
    def test_two_member_mean(self):
        a = constant_model([0, 2, 0, 2, 0, 2, 0, 2, 0, 2])
        b = constant_model([2, 0, 2, 0, 2, 0, 2, 0, 2, 0])
        np.testing.assert_array_equal(ensemble_logits([a, b], toy_inputs()), np.ones((3, 10)))

    def test_single_member_identity(self, rng):
        model = build_model(replace(parse("8fc"), input_shape=(1, 2, 2)), rng)
        x = rng.normal(size=(5, 1, 2, 2)).astype(np.float32)
        np.testing.assert_array_equal(ensemble_logits(Ensemble([model]), x), model.predict(x))

    def test_average_can_disagree_with_majority_vote(self):
        members = [constant_model([1.0, 0.9] + [0] * 8), constant_model([1.0, 0.9] + [0] * 8),
                   constant_model([0.0, 5.0] + [0] * 8)]
        votes = [m.predict(toy_inputs(1)).argmax() for m in members]
        assert max(set(votes), key=votes.count) == 0
        assert ensemble_logits(members, toy_inputs(1)).argmax() == 1

    def test_permutation_invariant(self, rng):
        members = [constant_model(rng.normal(size=10)) for _ in range(3)]
        forward = ensemble_logits(members, toy_inputs())
        backward = ensemble_logits(members[::-1], toy_inputs())
        np.testing.assert_allclose(forward, backward, rtol=1e-6)

    def test_average_in_float64(self):
        stacked = np.array([[[1e8]], [[1.0]], [[-1e8]]], dtype=np.float32)
        assert average_logits(stacked).dtype == np.float32
        assert average_logits(stacked)[0, 0] == np.float32(1 / 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            ensemble_logits([], toy_inputs())


def random_candidates(n, seed=0):
    spec = replace(parse("4fc"), input_shape=(1, 2, 2))
    return [build_model(spec, derive_stream(seed, "candidate", i)) for i in range(n)]


def subset_accuracy(models, x, labels):
    return float(np.mean(ensemble_logits(models, x).argmax(axis=1) == labels))


class TestSelectEnsemble:
    def test_single_candidate(self, separable):
        _, validation = separable
        candidates = random_candidates(1)
        ensemble = select_ensemble(candidates, validation.images, validation.labels, max_size=4)
        assert len(ensemble) == 1
        assert ensemble.val_accuracy == subset_accuracy(candidates, validation.images, validation.labels)

    def test_duplicates_add_nothing(self, separable):
        _, validation = separable
        model = random_candidates(1)[0]
        ensemble = select_ensemble([model, model, model], validation.images, validation.labels, max_size=3)
        assert len(ensemble) == 1
        assert ensemble.val_accuracy == subset_accuracy([model], validation.images, validation.labels)

    def test_greedy_between_best_single_and_exhaustive(self, separable):
        _, validation = separable
        x, labels = validation.images, validation.labels
        candidates = random_candidates(5, seed=2)
        ensemble = select_ensemble(candidates, x, labels, max_size=3)
        best_single = max(subset_accuracy([m], x, labels) for m in candidates)
        exhaustive = max(subset_accuracy(list(s), x, labels)
                         for k in (1, 2, 3) for s in itertools.combinations(candidates, k))
        assert best_single <= ensemble.val_accuracy <= exhaustive
        assert ensemble.val_accuracy == pytest.approx(subset_accuracy(ensemble.members, x, labels))
        assert len(ensemble) <= 3

    def test_greedy_matches_exhaustive_on_block_experts(self):
        sizes = [1, 4, 2, 5, 3]
        labels = np.arange(sum(sizes)) % 2
        x = np.eye(len(labels), dtype=np.float32).reshape(len(labels), 1, 1, len(labels))
        candidates = block_experts(sizes, labels)
        ensemble = select_ensemble(candidates, x, labels, max_size=3)
        subsets = [list(s) for k in (1, 2, 3) for s in itertools.combinations(range(5), k)]
        scores = [subset_accuracy([candidates[i] for i in s], x, labels) for s in subsets]
        best = subsets[int(np.argmax(scores))]
        assert ensemble.val_accuracy == max(scores) == pytest.approx(12 / 15)
        chosen = [i for i, c in enumerate(candidates) if any(c is m for m in ensemble.members)]
        assert chosen == sorted(best) == [1, 3, 4]

    def test_no_candidates(self, separable):
        _, validation = separable
        with pytest.raises(ValueError):
            select_ensemble([], validation.images, validation.labels, max_size=2)


class TestFingerprint:
    def test_stable_and_order_sensitive(self):
        a, b = random_candidates(2)
        assert Ensemble([a, b]).fingerprint == Ensemble([a, b]).fingerprint
        assert Ensemble([a, b]).fingerprint != Ensemble([b, a]).fingerprint
        assert len(Ensemble([a]).fingerprint) == 32

    def test_check(self):
        a, b = random_candidates(2)
        Ensemble([a]).check(Ensemble([a]).fingerprint)
        with pytest.raises(FingerprintMismatch):
            Ensemble([a]).check(Ensemble([b]).fingerprint)

    def test_manifest_round_trip(self, tmp_path):
        members = random_candidates(2)
        paths = [save_checkpoint(m, tmp_path / f"m{i}.mbck") for i, m in enumerate(members)]
        ensemble = Ensemble(members, paths, val_accuracy=0.5)
        manifest = write_ensemble_manifest(tmp_path / config.ENSEMBLE_FILE, ensemble)
        loaded = load_ensemble(manifest)
        assert loaded.fingerprint == ensemble.fingerprint
        assert loaded.val_accuracy == 0.5

    def test_changed_member_detected(self, tmp_path):
        members = random_candidates(2)
        paths = [save_checkpoint(m, tmp_path / f"m{i}.mbck") for i, m in enumerate(members)]
        manifest = write_ensemble_manifest(tmp_path / config.ENSEMBLE_FILE, Ensemble(members, paths))
        save_checkpoint(random_candidates(1, seed=9)[0], paths[1])
        with pytest.raises(FingerprintMismatch):
            load_ensemble(manifest)


def center_values(family: StudentFamily) -> list:
    return [0.5] * len(family.width_keys)


class TestStudentFamilies:
    def test_reference_bounds(self):
        assert student_bounds("CNN-1", 10_000_000) == ((50, 450), (500, 20000))
        assert student_bounds("CNN-4", 31_600_000) == ((50, 500), (50, 500), (50, 650), (50, 650))
        assert student_bounds("MLP-3", 1_000_000) == ()

    def test_desk_bounds_scale_from_reference_row(self):
        conv, fc = student_bounds("CNN-1", 30_000)
        assert conv == (round(40 * 0.03 ** 0.5), round(150 * 0.03 ** 0.5))
        assert fc == (6, 48)
        assert all(lo >= 4 for lo, _ in student_bounds("CNN-3", 30_000))

    def test_cnn1_filters_at_upper_bound(self):
        family = StudentFamily("CNN-1", 10_000_000)
        spec = student_spec(family, widths=[450, 1000])
        assert spec.nodes[0].width == 450
        assert spec.kernel == 5

    def test_mlp1_hidden_and_dependent_bottleneck(self):
        family = StudentFamily("MLP-1", 1_000_000)
        spec = student_spec(family, values=[0.5])
        lfc = [n for n in spec.nodes if n.kind == "lfc"][0]
        fc = [n for n in spec.nodes if n.kind == "fc"][0]
        assert 500 <= fc.width <= 5000
        assert count_params(spec) <= 1_000_000
        bumped = parse(render(spec).replace(f"{lfc.width}lfc", f"{lfc.width + 1}lfc"))
        assert count_params(bumped) > 1_000_000

    @pytest.mark.parametrize("family_id", STUDENT_FAMILIES)
    @pytest.mark.parametrize("budget", [30_000, 1_000_000])
    def test_resolves_within_budget(self, family_id, budget):
        family = StudentFamily(family_id, budget)
        spec = student_spec(family, values=center_values(family))
        assert count_params(spec) <= budget
        assert spec.has_bottleneck == family.bottleneck
        assert spec.n_conv == family.n_conv

    def test_bottleneck_only_for_shallow_cnns(self):
        assert StudentFamily("CNN-1", 1_000_000).bottleneck
        assert not StudentFamily("CNN-2", 1_000_000).bottleneck

    def test_explicit_width_outside_bounds(self):
        with pytest.raises(BoundsError, match="outside"):
            student_spec(StudentFamily("CNN-2", 1_000_000), widths=[200, 50])

    def test_ratio_count(self):
        with pytest.raises(BoundsError):
            student_spec(StudentFamily("MLP-3", 1_000_000), values=[0.5, 0.5])

    def test_unknown_family(self):
        with pytest.raises(BoundsError):
            StudentFamily("CNN-7", 1_000_000)

    def test_make_student_has_no_dropout(self, rng):
        model = make_student(StudentFamily("CNN-2", 30_000), rng, values=[0.5, 0.5])
        assert not any(isinstance(layer, Dropout) for layer in model.layers)

    def test_hard_twin_sites(self):
        family = StudentFamily("CNN-2", 30_000)
        sites = dropout_site_names(student_spec(family, values=[0.5, 0.5]))
        assert sites == ["DOc1", "DOc2", "DOf1"]
        assert [d for d in hard_space("CNN-2").names if d.startswith("DO")] == sites

    def test_teacher_desk_spec(self):
        point = {"C1": 0.0, "C2": 1.0, "H1": 0.5}
        assert render(teacher_family("teacher-desk").spec(point)) == "8c-mp-48c-mp-128fc"

    def test_teacher_full_reproduces_first_row_widths(self):
        point = {"C1": 0.6875, "C2": 0.484375, "C3": 0.078125, "H1": 0.671875}
        assert render(teacher_family("teacher-full").spec(point)) == "76c^2-mp-126c^2-mp-148c^4-mp-1200fc^2"


class TestCompressionGap:
    def test_reported_gaps(self):
        assert compression_gap(87.3, 84.6) == pytest.approx(2.7)
        assert compression_gap(92.6, 91.8) == pytest.approx(0.8)
        assert compression_gap(0.9, 0.9) == 0.0


@pytest.fixture
def tiny_cifar(cifar_dir):
    train, validation, _ = load_cifar10(cifar_dir)
    return train, validation


def make_transfer(images, logits, fingerprint, epochs=1):
    records = np.empty(len(images), dtype=RECORD_DTYPE)
    records["image"] = images
    records["logits"] = logits
    return TransferSet(TransferHeader(len(images), AugmentConfig(), fingerprint, epochs, 0), records)


class TestStudentRuns:
    @pytest.fixture
    def setup(self, tiny_cifar):
        train, validation = tiny_cifar
        teacher = build_model(parse("16fc"), derive_stream(0, "toy-teacher"))
        ensemble = Ensemble([teacher])
        logits = ensemble_logits(ensemble, prepare_inputs(train.images))
        return train, validation, ensemble, make_transfer(train.images, logits, ensemble.fingerprint)

    def student_point(self, family, **overrides):
        point = {"lr": 0.005, "momentum": 0.9, "input_scale": 1.0, "init_scale": 1.0}
        point.update({key: 0.5 for key in family.width_keys})
        point.update(overrides)
        return point

    def test_mlp1_student(self, setup):
        train, validation, ensemble, transfer = setup
        family = StudentFamily("MLP-1", 30_000)
        out = train_student(family, transfer, validation, self.student_point(family), seed=0, ensemble=ensemble,
                            max_epochs=2, batch_size=40, progress=False)
        assert out.soft_targets
        assert out.result.model.num_params <= 30_000
        assert out.absorbed_params is not None
        summary = out.summary()
        assert summary["family"] == "MLP-1" and summary["targets"] == "soft"
        point = self.student_point(family)
        assert student_space("MLP-1").check(point) is point

    def test_deep_student_has_no_absorption(self, setup):
        train, validation, ensemble, transfer = setup
        family = StudentFamily("CNN-2", 30_000)
        out = train_student(family, transfer, validation, self.student_point(family), seed=0, ensemble=ensemble,
                            max_epochs=1, batch_size=80, progress=False)
        assert out.absorbed_params is None

    def test_wrong_ensemble_refused(self, setup):
        train, validation, _, transfer = setup
        other = Ensemble([build_model(parse("8fc"), derive_stream(1, "other"))])
        family = StudentFamily("MLP-1", 30_000)
        with pytest.raises(FingerprintMismatch):
            train_student(family, transfer, validation, self.student_point(family), 0, other, max_epochs=1,
                          progress=False)

    def test_out_of_bounds_hyperparameters(self, setup):
        train, validation, ensemble, transfer = setup
        family = StudentFamily("MLP-1", 30_000)
        with pytest.raises(BoundsError, match="lr"):
            train_student(family, transfer, validation, self.student_point(family, lr=0.5), 0, ensemble,
                          max_epochs=1, progress=False)

    def test_hard_twin(self, tiny_cifar):
        train, validation = tiny_cifar
        family = StudentFamily("CNN-2", 30_000)
        point = {"lr": 0.01, "momentum": 0.9, "DOc1": 0.1, "DOc2": 0.2, "DOf1": 0.3, "w1": 0.5, "w2": 0.5}
        hard_space("CNN-2").check(point)
        out = train_hard_twin(family, train, validation, point, seed=0, max_epochs=1, batch_size=80,
                              progress=False)
        assert not out.soft_targets
        drops = [layer.name for layer in out.result.model.layers if isinstance(layer, Dropout)]
        assert drops == ["drop_DOc1", "drop_DOc2", "drop_DOf1"]
        assert out.summary()["targets"] == "hard"

    def test_teacher(self, tiny_cifar):
        train, validation = tiny_cifar
        space = teacher_space("teacher-desk")
        point = space.untransform_point(np.full(len(space), 0.5))
        result = train_teacher(teacher_family("teacher-desk"), train, validation, point, seed=0, max_epochs=1,
                               batch_size=80, progress=False)
        assert result.model.arch == render(teacher_family("teacher-desk").spec(point))
        assert 0.0 <= result.val_accuracy <= 1.0


def test_dataset_fixture_is_labeled(tiny_cifar):
    train, _ = tiny_cifar
    assert isinstance(train, Dataset)
    assert set(np.unique(train.labels)) <= set(range(10))
