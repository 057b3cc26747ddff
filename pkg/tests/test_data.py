import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import require_dataset
from mbinception.data import (
    BatchIterator,
    LabeledDataset,
    load_cifar,
    load_dataset,
    load_idx,
    load_raw,
    preprocess,
    split_validation,
    write_cifar,
    write_idx,
)
from mbinception.errors import ConfigError, DataError, ShapeError


def make_idx(tmp_path, n=5, rows=28, cols=28, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, (n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, n, dtype=np.uint8)
    img, lab = tmp_path / "img", tmp_path / "lab"
    write_idx(img, lab, pixels, labels)
    return img, lab, pixels, labels


def toy_dataset(n, k=10, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.random((n, 4, 4, 3)), rng.integers(0, k, n), k)


class TestIdx:
    def test_round_trip_bit_exact(self, tmp_path):
        img, lab, pixels, labels = make_idx(tmp_path)
        images, got = load_idx(img, lab)
        assert images.shape == (5, 28, 28, 1)
        assert np.array_equal(np.rint(images[..., 0] * 255).astype(np.uint8), pixels)
        assert np.array_equal(got, labels)

    def test_header_is_big_endian(self, tmp_path):
        img, lab, _, _ = make_idx(tmp_path, n=3, rows=4, cols=6)
        raw = img.read_bytes()
        assert raw[:16] == bytes.fromhex("00000803") + struct.pack(">3I", 3, 4, 6)
        assert lab.read_bytes()[:8] == bytes.fromhex("00000801") + struct.pack(">I", 3)

    def test_single_record(self, tmp_path):
        img, lab, pixels, labels = make_idx(tmp_path, n=1)
        images, got = load_idx(img, lab)
        assert images.shape[0] == 1 and got[0] == labels[0]

    def test_gzip_fallback(self, tmp_path):
        img, lab, pixels, _ = make_idx(tmp_path)
        for p in (img, lab):
            (tmp_path / (p.name + ".gz")).write_bytes(gzip.compress(p.read_bytes()))
            p.unlink()
        images, _ = load_idx(img, lab)
        assert np.array_equal(np.rint(images[..., 0] * 255).astype(np.uint8), pixels)

    def test_bad_magic_reports_offset_zero(self, tmp_path):
        img, lab, _, _ = make_idx(tmp_path)
        raw = bytearray(img.read_bytes())
        raw[3] = 0x01
        img.write_bytes(bytes(raw))
        with pytest.raises(DataError) as err:
            load_idx(img, lab)
        assert err.value.offset == 0 and str(img) in str(err.value)

    def test_truncated_payload(self, tmp_path):
        img, lab, _, _ = make_idx(tmp_path, n=2, rows=3, cols=3)
        raw = img.read_bytes()[:-4]
        img.write_bytes(raw)
        with pytest.raises(DataError, match="truncated") as err:
            load_idx(img, lab)
        assert err.value.offset == len(raw)

    def test_count_mismatch(self, tmp_path):
        img, lab, pixels, labels = make_idx(tmp_path, n=4)
        write_idx(tmp_path / "img2", lab, pixels[:3], labels)
        with pytest.raises(DataError, match="count"):
            load_idx(tmp_path / "img2", lab)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            load_idx(tmp_path / "nope", tmp_path / "nope2")


class TestCifar:
    def test_cifar10_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        pixels = rng.integers(0, 256, (4, 32, 32, 3), dtype=np.uint8)
        labels = np.array([0, 9, 3, 3], dtype=np.uint8)
        write_cifar(tmp_path / "b.bin", pixels, labels)
        assert (tmp_path / "b.bin").stat().st_size == 4 * 3073
        images, got = load_cifar(tmp_path / "b.bin")
        assert np.array_equal(np.rint(images * 255).astype(np.uint8), pixels)
        assert got.tolist() == [0, 9, 3, 3]

    def test_planar_layout(self, tmp_path):
        # one record: label 7, red plane all 10, green 20, blue 30
        rec = bytes([7]) + bytes([10]) * 1024 + bytes([20]) * 1024 + bytes([30]) * 1024
        (tmp_path / "r.bin").write_bytes(rec)
        images, labels = load_cifar(tmp_path / "r.bin")
        assert labels.tolist() == [7]
        assert np.allclose(images[0, 5, 7] * 255, [10, 20, 30])

    def test_cifar100_keeps_fine_label(self, tmp_path):
        pixels = np.zeros((3, 32, 32, 3), dtype=np.uint8)
        write_cifar(tmp_path / "c.bin", pixels, [5, 99, 42], "cifar100", coarse=[1, 19, 7])
        _, labels = load_cifar(tmp_path / "c.bin", "cifar100")
        assert labels.tolist() == [5, 99, 42]

    def test_multiple_files_concatenate(self, tmp_path):
        pixels = np.zeros((2, 32, 32, 3), dtype=np.uint8)
        write_cifar(tmp_path / "a.bin", pixels, [1, 2])
        write_cifar(tmp_path / "b.bin", pixels[:1], [3])
        _, labels = load_cifar([tmp_path / "a.bin", tmp_path / "b.bin"])
        assert labels.tolist() == [1, 2, 3]

    def test_partial_record(self, tmp_path):
        pixels = np.zeros((2, 32, 32, 3), dtype=np.uint8)
        write_cifar(tmp_path / "a.bin", pixels, [1, 2])
        raw = (tmp_path / "a.bin").read_bytes()
        (tmp_path / "a.bin").write_bytes(raw[:-100])
        with pytest.raises(DataError) as err:
            load_cifar(tmp_path / "a.bin")
        assert err.value.offset == 3073

    def test_unknown_variant(self, tmp_path):
        with pytest.raises(ConfigError):
            load_cifar(tmp_path / "a.bin", "cifar1000")


class TestPreprocess:
    def test_pad_28_to_32(self):
        x = np.random.default_rng(2).random((2, 28, 28, 1))
        out = preprocess(x)
        assert out.shape == (2, 32, 32, 3)
        assert np.array_equal(out[:, 2:30, 2:30, 1], x[..., 0])
        assert out[:, :2].sum() == 0 and out[:, 30:].sum() == 0

    def test_bilinear_constant_image(self):
        out = preprocess(np.full((1, 28, 28, 1), 0.3), resize="bilinear")
        assert out.shape == (1, 32, 32, 3)
        assert np.allclose(out, 0.3)

    def test_32_passthrough(self):
        x = np.random.default_rng(3).random((1, 32, 32, 3))
        assert preprocess(x) is x

    def test_bad_channels(self):
        with pytest.raises(ShapeError):
            preprocess(np.zeros((1, 28, 28, 2)))

    def test_bad_resize(self):
        with pytest.raises(ConfigError):
            preprocess(np.zeros((1, 28, 28, 1)), resize="nearest")


class TestSplit:
    @pytest.mark.parametrize("n", [10, 100, 1000, 60000])
    def test_ten_percent(self, n):
        ds = LabeledDataset(np.zeros((n, 1, 1, 1)), np.zeros(n, dtype=np.int64), 10)
        train, val = split_validation(ds, 0.1, seed=0)
        assert len(val) == round(0.1 * n) and len(train) + len(val) == n

    def test_disjoint_and_covering(self):
        ds = toy_dataset(200)
        ds.images[:, 0, 0, 0] = np.arange(200)
        train, val = split_validation(ds, 0.1, seed=3)
        ids = np.concatenate([train.images[:, 0, 0, 0], val.images[:, 0, 0, 0]])
        assert sorted(ids.tolist()) == list(range(200))

    def test_seeded(self):
        ds = toy_dataset(100)
        a = split_validation(ds, 0.1, seed=4)[1]
        b = split_validation(ds, 0.1, seed=4)[1]
        c = split_validation(ds, 0.1, seed=5)[1]
        assert np.array_equal(a.images, b.images)
        assert not np.array_equal(a.images, c.images)

    def test_empty_split_rejected(self):
        with pytest.raises(ConfigError):
            split_validation(toy_dataset(3), 0.1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(20, 5000), st.floats(0.05, 0.5))
    def test_split_sizes(self, n, fraction):
        ds = LabeledDataset(np.zeros((n, 1, 1, 1)), np.zeros(n, dtype=np.int64), 2)
        train, val = split_validation(ds, fraction, seed=0)
        assert len(val) == int(round(fraction * n)) and len(train) == n - len(val)


class TestBatchIterator:
    def test_covers_every_sample_once(self):
        ds = toy_dataset(103)
        it = BatchIterator(ds, 10, seed=0)
        seen = np.concatenate([yb for _, yb in it.epoch(0)])
        assert len(list(it.epoch(0))) == len(it) == 11
        assert sorted(seen.tolist()) == sorted(ds.labels.tolist())

    def test_epochs_differ_and_repeat(self):
        it = BatchIterator(toy_dataset(50), 8, seed=1)
        assert np.array_equal(it.indices(2), it.indices(2))
        assert not np.array_equal(it.indices(0), it.indices(1))

    def test_bad_batch_size(self):
        with pytest.raises(ConfigError):
            BatchIterator(toy_dataset(5), 0, seed=0)


class TestNamedDatasets:
    def test_limit_takes_first_records(self, tmp_path):
        img, lab, pixels, labels = make_idx(tmp_path, n=6)
        root = tmp_path / "mnist"
        root.mkdir()
        img.rename(root / "train-images-idx3-ubyte")
        lab.rename(root / "train-labels-idx1-ubyte")
        ds = load_dataset("mnist", root, "train", limit=4)
        assert len(ds) == 4 and ds.images.shape == (4, 32, 32, 3)
        assert np.array_equal(ds.labels, labels[:4])

    def test_unknown_dataset(self, tmp_path):
        with pytest.raises(ConfigError):
            load_raw("svhn", tmp_path, "train")


class TestRealFiles:
    @pytest.mark.parametrize("name", ["mnist", "fashion_mnist"])
    def test_idx_counts(self, name):
        root = require_dataset(name)
        train, test = load_raw(name, root, "train"), load_raw(name, root, "test")
        assert (len(train), len(test)) == (60000, 10000)
        assert train.images.shape[1:] == (28, 28, 1)
        assert np.bincount(train.labels).size == 10

    def test_cifar10_counts(self):
        root = require_dataset("cifar10")
        train, test = load_raw("cifar10", root, "train"), load_raw("cifar10", root, "test")
        counts = np.bincount(np.concatenate([train.labels, test.labels]), minlength=10)
        assert counts.tolist() == [6000] * 10

    def test_cifar100_counts(self):
        root = require_dataset("cifar100")
        train, test = load_raw("cifar100", root, "train"), load_raw("cifar100", root, "test")
        counts = np.bincount(np.concatenate([train.labels, test.labels]), minlength=100)
        assert counts.tolist() == [600] * 100
