"""
Tests for CIFAR-10 ingest, augmentation and transfer-set storage.
"""
import threading
import time

import numpy as np
import pytest

import config
import pipeline.transfer as transfer_module
from arch.grammar import parse
from distill.ensemble import Ensemble
from engine.errors import DataError
from engine.model import build_model
from engine.rng import derive_stream
from pipeline.augment import (AugmentConfig, augment, augment_batch, crop_scale_jitter, hsv_jitter, mirror,
                              spline_resize)
from pipeline.cifar import Dataset, has_cifar10, load_cifar10, normalize_per_image, subsample
from pipeline.transfer import (HEADER_BYTES, RECORD_DTYPE, TransferHeader, TransferSetWriter,
                               generate_transfer_set, read_transfer_set, write_transfer_set)


class TestCifar:
    def test_load_and_split(self, cifar_dir):
        train, validation, test = load_cifar10(cifar_dir, seed=3)
        total = 5 * config.CIFAR_RECORDS_PER_FILE
        assert len(validation) == total // 5
        assert len(train) == total - total // 5
        assert len(test) == config.CIFAR_RECORDS_PER_FILE
        assert train.images.shape[1:] == (3, 32, 32)
        assert train.images.dtype == np.float32
        assert 0.0 <= train.images.min() and train.images.max() <= 1.0
        assert not set(train.indices) & set(validation.indices)

    def test_split_is_seeded(self, cifar_dir):
        a = load_cifar10(cifar_dir, seed=3)[1]
        b = load_cifar10(cifar_dir, seed=3)[1]
        c = load_cifar10(cifar_dir, seed=4)[1]
        np.testing.assert_array_equal(a.indices, b.indices)
        assert not np.array_equal(a.indices, c.indices)

    def test_explicit_validation_size(self, cifar_dir):
        train, validation, _ = load_cifar10(cifar_dir, validation_size=10)
        assert len(validation) == 10
        assert len(train) == 5 * config.CIFAR_RECORDS_PER_FILE - 10

    def test_pixel_layout(self, cifar_dir):
        train, _, _ = load_cifar10(cifar_dir)
        # the fixture brightens colour plane (label % 3) by at least 120/255
        brightest = train.images.mean(axis=(2, 3)).argmax(axis=1)
        np.testing.assert_array_equal(brightest, train.labels % 3)

    def test_truncated_file(self, cifar_dir):
        path = cifar_dir / config.CIFAR_TRAIN_FILES[2]
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(DataError, match="truncated"):
            load_cifar10(cifar_dir)

    def test_missing_file(self, cifar_dir):
        (cifar_dir / config.CIFAR_TEST_FILE).unlink()
        assert not has_cifar10(cifar_dir)
        with pytest.raises(DataError, match="not found"):
            load_cifar10(cifar_dir)

    def test_subsample_keeps_order(self, cifar_dir):
        train, _, _ = load_cifar10(cifar_dir)
        small = subsample(train, 25, seed=0)
        assert len(small) == 25
        assert np.all(np.diff(small.indices) > 0)
        assert subsample(train, 10_000, seed=0) is train


class TestNormalize:
    def test_zero_mean_unit_std(self, images):
        out = normalize_per_image(images)
        flat = out.reshape(len(out), -1).astype(np.float64)
        np.testing.assert_allclose(flat.mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(flat.std(axis=1), 1.0, atol=1e-4)

    def test_constant_image_stays_finite(self):
        out = normalize_per_image(np.full((3, 32, 32), 0.5, dtype=np.float32))
        assert np.all(np.isfinite(out))
        assert not out.any()

    def test_affine_shift_invariance(self, images):
        np.testing.assert_allclose(normalize_per_image(2.5 * images - 0.7), normalize_per_image(images), atol=1e-5)

    def test_idempotent(self, images):
        once = normalize_per_image(images)
        np.testing.assert_allclose(normalize_per_image(once), once, atol=1e-5)


class TestAugment:
    def test_zero_hsv_jitter_is_identity(self, images):
        out = hsv_jitter(images[0], AugmentConfig(), derive_stream(0, "hsv"))
        np.testing.assert_allclose(out, images[0], atol=1e-6)

    def test_hsv_jitter_stays_in_range(self, images):
        cfg = AugmentConfig(d_h=0.5, d_s=0.5, d_v=0.5, a_s=0.5, a_v=0.5)
        out = hsv_jitter(images[0], cfg, derive_stream(0, "hsv"))
        assert 0.0 <= out.min() and out.max() <= 1.0
        assert not np.allclose(out, images[0])

    def test_grey_image_ignores_hue_shift(self, images):
        grey = np.repeat(images[0][:1], 3, axis=0)
        out = hsv_jitter(grey, AugmentConfig(d_h=0.3), derive_stream(0, "hsv"))
        np.testing.assert_allclose(out, grey, atol=1e-6)

    def test_full_crop_is_identity(self, images):
        out = crop_scale_jitter(images[0], derive_stream(0, "crop"), crop_min=32, crop_max=32)
        np.testing.assert_array_equal(out, images[0])

    def test_crop_upsamples_to_full_size(self, images):
        out = crop_scale_jitter(images[0], derive_stream(0, "crop"), crop_min=24, crop_max=24)
        assert out.shape == (3, 32, 32)
        assert 0.0 <= out.min() and out.max() <= 1.0

    def test_spline_resize_of_constant(self):
        out = spline_resize(np.full((3, 24, 24), 0.25), 32)
        np.testing.assert_allclose(out, 0.25, atol=1e-9)

    def test_forced_mirror(self, images):
        flipped = mirror(images[0], derive_stream(0, "m"), flip=True)
        np.testing.assert_array_equal(flipped, images[0][:, :, ::-1])
        np.testing.assert_array_equal(mirror(images[0], derive_stream(0, "m"), flip=False), images[0])

    @pytest.mark.parametrize("side", [24, 17, 31])
    def test_cubic_matches_linear_on_ramp(self, side):
        rows, cols = np.meshgrid(np.linspace(0.0, 1.0, side), np.linspace(0.0, 0.5, side), indexing="ij")
        ramp = np.stack([rows, cols, 0.3 * rows + 0.6 * cols])
        cubic, linear = spline_resize(ramp, 32), spline_resize(ramp, 32, order=1)
        assert cubic.shape == (3, 32, 32)
        np.testing.assert_allclose(cubic, linear, atol=1e-4)
        np.testing.assert_allclose(cubic[:, 0, 0], ramp[:, 0, 0], atol=1e-9)
        np.testing.assert_allclose(cubic[:, -1, -1], ramp[:, -1, -1], atol=1e-9)

    @pytest.mark.slow
    def test_mirror_frequency(self, images):
        stream = derive_stream(0, "mirror-frequency")
        image = images[0]
        flips = sum(not np.array_equal(mirror(image, stream), image) for _ in range(10_000))
        assert abs(flips / 10_000 - 0.5) < 0.02

    def test_identity_config(self, images):
        out = augment(images[0], AugmentConfig.identity(), derive_stream(0, "identity"))
        np.testing.assert_allclose(out, images[0], atol=1e-6)

    def test_batch_independent_of_layout(self, images):
        cfg = AugmentConfig.best_model()
        whole = augment_batch(images, cfg, seed=5, epoch=2, indices=range(6))
        part = augment_batch(images[2:4], cfg, seed=5, epoch=2, indices=[2, 3])
        np.testing.assert_array_equal(whole[2:4], part)
        other_epoch = augment_batch(images, cfg, seed=5, epoch=3, indices=range(6))
        assert not np.array_equal(whole, other_epoch)

    def test_config_bytes(self):
        cfg = AugmentConfig.best_model()
        assert AugmentConfig.from_bytes(cfg.to_bytes()) == cfg

    @pytest.mark.parametrize("kwargs", [{"d_h": -0.1}, {"mirror_prob": 1.5}, {"crop_min": 33}, {"crop_min": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            AugmentConfig(**kwargs)


def make_header(count, epochs=4, seed=9):
    return TransferHeader(count, AugmentConfig.best_model(), bytes(range(32)), epochs, seed)


class TestTransferSet:
    @pytest.fixture
    def stored(self, tmp_path, rng):
        images = rng.random((1000, 3, 32, 32)).astype(np.float32)
        logits = rng.normal(size=(1000, 10)).astype(np.float32)
        path = write_transfer_set(tmp_path / "t.mbts", make_header(1000), images, logits)
        return path, images, logits

    def test_round_trip(self, stored):
        path, images, logits = stored
        transfer = read_transfer_set(path)
        assert len(transfer) == 1000
        assert transfer.header == make_header(1000)
        np.testing.assert_array_equal(transfer.images, images)
        np.testing.assert_array_equal(transfer.logits, logits)
        assert path.stat().st_size == HEADER_BYTES + 1000 * RECORD_DTYPE.itemsize + 8

    def test_epoch_slices_wrap(self, stored):
        path, _, logits = stored
        transfer = read_transfer_set(path)
        assert transfer.header.split_size == 250
        np.testing.assert_array_equal(transfer.epoch(1)["logits"], logits[250:500])
        np.testing.assert_array_equal(transfer.epoch(5)["logits"], transfer.epoch(1)["logits"])

    def test_corrupted_record(self, stored):
        path, _, _ = stored
        raw = bytearray(path.read_bytes())
        raw[HEADER_BYTES + 5000] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="checksum"):
            read_transfer_set(path)
        assert len(read_transfer_set(path, verify=False)) == 1000

    def test_truncated(self, stored):
        path, _, _ = stored
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(DataError):
            read_transfer_set(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mbts"
        path.write_bytes(b"XXXX" + bytes(HEADER_BYTES + 8))
        with pytest.raises(DataError, match="magic"):
            read_transfer_set(path)

    def test_short_write_leaves_nothing(self, tmp_path, rng):
        path = tmp_path / "short.mbts"
        with pytest.raises(DataError, match="wrote 3 records"):
            with TransferSetWriter(path, make_header(5)) as writer:
                writer.write(rng.random((3, 3, 32, 32)), np.zeros((3, 10)))
        assert not path.exists()
        assert not list(tmp_path.iterdir())

    def test_failed_writer_keeps_previous_file(self, stored, rng):
        path, _, logits = stored
        with pytest.raises(RuntimeError):
            with TransferSetWriter(path, make_header(2)) as writer:
                writer.write(rng.random((1, 3, 32, 32)), np.zeros((1, 10)))
                raise RuntimeError("interrupted")
        np.testing.assert_array_equal(read_transfer_set(path).logits, logits)


class TestGenerateTransferSet:
    @pytest.fixture
    def train(self, images):
        return Dataset(images, np.arange(6) % 10, "train", np.arange(6))

    @pytest.fixture
    def ensemble(self):
        return Ensemble([build_model(parse("8fc"), derive_stream(0, "member"))])

    def test_single_member_labels_are_exact(self, tmp_path, train, ensemble):
        aug = AugmentConfig.best_model()
        transfer = generate_transfer_set(train, ensemble, 2, aug, seed=11, path=tmp_path / "t.mbts",
                                         batch_size=6, progress=False)
        assert len(transfer) == 12
        assert transfer.header.fingerprint == ensemble.fingerprint
        for epoch in range(2):
            expected_images = augment_batch(train.images, aug, 11, epoch, range(6))
            stored = transfer.epoch(epoch)
            np.testing.assert_array_equal(stored["image"], expected_images)
            expected_logits = ensemble.members[0].predict(normalize_per_image(expected_images))
            np.testing.assert_array_equal(stored["logits"], expected_logits)

    def test_worker_count_does_not_change_bytes(self, tmp_path, train, ensemble):
        aug = AugmentConfig.best_model()
        one = generate_transfer_set(train, ensemble, 2, aug, 3, tmp_path / "a.mbts", batch_size=6,
                                    workers=1, progress=False)
        many = generate_transfer_set(train, ensemble, 2, aug, 3, tmp_path / "b.mbts", batch_size=6,
                                     workers=3, progress=False)
        assert one.path.read_bytes() == many.path.read_bytes()

    def test_zero_epochs(self, tmp_path, train, ensemble):
        with pytest.raises(ValueError):
            generate_transfer_set(train, ensemble, 0, AugmentConfig(), 0, tmp_path / "t.mbts")

    def test_augmented_chunks_in_flight_are_bounded(self, tmp_path, train, ensemble, monkeypatch):
        counts = {"augmented": 0, "labelled": 0, "held": 0}
        lock = threading.Lock()
        real_augment, real_logits = transfer_module.augment_batch, transfer_module.ensemble_logits

        def counting_augment(*args):
            out = real_augment(*args)
            with lock:
                counts["augmented"] += 1
            return out

        def slow_logits(*args):
            time.sleep(0.02)
            with lock:
                counts["labelled"] += 1
                counts["held"] = max(counts["held"], counts["augmented"] - counts["labelled"])
            return real_logits(*args)

        monkeypatch.setattr(transfer_module, "augment_batch", counting_augment)
        monkeypatch.setattr(transfer_module, "ensemble_logits", slow_logits)
        transfer = generate_transfer_set(train, ensemble, 20, AugmentConfig(), 0, tmp_path / "t.mbts",
                                         batch_size=2, workers=4, progress=False)
        assert len(transfer) == 120
        assert counts["labelled"] == 60
        assert counts["held"] <= 2 * 4


def test_dataset_take_tracks_source_indices(images):
    data = Dataset(images, np.arange(6), "train", np.arange(10, 16))
    taken = data.take(np.array([1, 4]), "validation")
    np.testing.assert_array_equal(taken.indices, [11, 14])
    assert taken.split == "validation"
