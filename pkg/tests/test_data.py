"""Dataset ingestion, the synthetic generator, splits, and pair storage."""

import numpy as np
import pytest

from flowstrike import data as D
from flowstrike.tensor import Prng
from flowstrike.tff import FormatError


class TestCifarLoader:
    def test_zero_record(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(bytes(D.CIFAR_RECORD_BYTES))
        ds = D.load_cifar_batch(path)
        assert len(ds) == 1
        assert ds.labels[0] == 0
        assert ds.images.min() == ds.images.max() == 0.0

    def test_pixel_255_scales_to_one(self, tmp_path):
        record = bytearray(D.CIFAR_RECORD_BYTES)
        record[0] = 3
        record[1] = 255
        path = tmp_path / "batch.bin"
        path.write_bytes(bytes(record))
        ds = D.load_cifar_batch(path)
        assert ds.labels[0] == 3
        assert ds.images[0, 0, 0, 0] == 1.0

    def test_roundtrip_bit_exact(self, tmp_path):
        rng = Prng(3).generator
        pixels = rng.integers(0, 256, size=(4, 3, 32, 32)).astype(np.uint8)
        ds = D.Dataset(pixels.astype(np.float32) / 255.0, rng.integers(0, 10, 4), 10)
        path = tmp_path / "batch.bin"
        path.write_bytes(D.encode_cifar_records(ds))
        back = D.load_cifar_batch(path)
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(D.CIFAR_RECORD_BYTES - 1))
        with pytest.raises(FormatError):
            D.load_cifar_batch(path)

    def test_label_above_nine(self, tmp_path):
        record = bytearray(D.CIFAR_RECORD_BYTES)
        record[0] = 10
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(record))
        with pytest.raises(FormatError):
            D.load_cifar_batch(path)


class TestSynthetic:
    def test_balanced_classes(self):
        ds = D.gen_synthetic(10, 16, 100, seed=0)
        counts = np.bincount(ds.labels, minlength=10)
        np.testing.assert_array_equal(counts, np.full(10, 10))

    def test_determinism(self):
        a = D.gen_synthetic(10, 16, 50, seed=7)
        b = D.gen_synthetic(10, 16, 50, seed=7)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_different_seeds_differ(self):
        a = D.gen_synthetic(10, 16, 50, seed=7)
        b = D.gen_synthetic(10, 16, 50, seed=8)
        assert not np.array_equal(a.images, b.images)

    def test_pixels_in_range(self):
        ds = D.gen_synthetic(10, 32, 64, seed=1)
        assert ds.images.min() >= 0.0
        assert ds.images.max() <= 1.0

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            D.gen_synthetic(10, 20, 10, seed=0)

    def test_accepts_prng_instance(self):
        a = D.gen_synthetic(4, 16, 20, seed=Prng(5))
        b = D.gen_synthetic(4, 16, 20, seed=Prng(5))
        np.testing.assert_array_equal(a.images, b.images)

    # The separability oracle (classifier reaches >= 95%) lives in
    # test_models.py where a trained SmallCNN is available.


class TestSplit:
    def test_80_20(self):
        ds = D.gen_synthetic(10, 16, 100, seed=0)
        train, test = D.split(ds, 0.8, seed=1)
        assert len(train) == 80 and len(test) == 20

    def test_partition_is_exhaustive_and_disjoint(self):
        ds = D.gen_synthetic(10, 16, 60, seed=2)
        train, test = D.split(ds, 0.7, seed=3)
        joined = np.concatenate([train.images, test.images])
        assert joined.shape[0] == len(ds)
        # Compare as multisets via sorted flattened hashes.
        key = lambda imgs: np.sort(imgs.reshape(imgs.shape[0], -1).sum(axis=1))
        np.testing.assert_allclose(key(joined), key(ds.images), rtol=1e-6)

    def test_deterministic(self):
        ds = D.gen_synthetic(10, 16, 50, seed=4)
        a_train, _ = D.split(ds, 0.5, seed=9)
        b_train, _ = D.split(ds, 0.5, seed=9)
        np.testing.assert_array_equal(a_train.images, b_train.images)

    def test_per_class_counts_near_stratified(self):
        ds = D.gen_synthetic(10, 16, 400, seed=5)
        worst = 0.0
        for seed in range(20):
            train, _ = D.split(ds, 0.8, seed=seed)
            counts = np.bincount(train.labels, minlength=10)
            worst = max(worst, np.abs(counts - 32).max() / 320)
        # within +-10% of the stratified ideal (32 per class out of 320)
        assert worst <= 0.10

    def test_empty_dataset_rejected(self):
        empty = D.Dataset(np.empty((0, 3, 16, 16)), np.empty(0, np.int64), 10)
        with pytest.raises(ValueError):
            D.split(empty, 0.5, seed=0)

    def test_bad_fraction(self):
        ds = D.gen_synthetic(2, 16, 10, seed=0)
        with pytest.raises(ValueError):
            D.split(ds, 1.0, seed=0)


def make_pairs(n=3, eps=16 / 255, shape=(3, 16, 16), seed=0):
    rng = Prng(seed)
    clean = rng.uniform(0.2, 0.8, (n,) + shape)
    delta = rng.uniform(-eps, eps, clean.shape)
    adv = np.clip(clean + delta, 0.0, 1.0).astype(np.float32)
    labels = rng.integers(0, 10, n)
    return D.PairSet(clean, adv, labels, eps)


class TestPairSet:
    def test_invariant_enforced_on_construction(self):
        clean = np.full((1, 1, 2, 2), 0.5, np.float32)
        adv = np.full((1, 1, 2, 2), 0.9, np.float32)
        with pytest.raises(ValueError):
            D.PairSet(clean, adv, np.zeros(1), 8 / 255)

    def test_empty_roundtrip(self, tmp_path):
        pairs = D.PairSet.empty((3, 16, 16), 8 / 255)
        path = tmp_path / "pairs.tff"
        D.save_pairs(pairs, path)
        back = D.load_pairs(path)
        assert len(back) == 0
        assert back.epsilon == pytest.approx(8 / 255)

    def test_three_pairs_roundtrip_bit_exact(self, tmp_path):
        pairs = make_pairs(3)
        path = tmp_path / "pairs.tff"
        D.save_pairs(pairs, path)
        back = D.load_pairs(path)
        np.testing.assert_array_equal(back.clean, pairs.clean)
        np.testing.assert_array_equal(back.adversarial, pairs.adversarial)
        np.testing.assert_array_equal(back.labels, pairs.labels)
        assert back.epsilon == np.float32(pairs.epsilon)

    def test_tampered_pixel_breaks_load(self, tmp_path):
        pairs = make_pairs(2)
        path = tmp_path / "pairs.tff"
        D.save_pairs(pairs, path)
        raw = bytearray(path.read_bytes())
        # Patch the last f32 of the file (an adversarial pixel) far outside
        # the L-inf ball.
        raw[-4:] = np.float32(0.999999).tobytes() if pairs.adversarial[-1].reshape(-1)[-1] < 0.5 else np.float32(0.0).tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            D.load_pairs(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tff"
        path.write_bytes(b"XXXX" + bytes(100))
        with pytest.raises(FormatError):
            D.load_pairs(path)
