import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cibp.data import (
    CIFAR_RECORD,
    Dataset,
    DatasetFormatError,
    augment,
    content_hash,
    load_cache,
    load_cifar10,
    load_mnist,
    normalization_stats,
    save_cache,
    synthetic,
    write_idx,
)

CORRUPT = Path(__file__).parent / "data" / "corrupt"
MNIST_5K = Path(__file__).parent.parent / "data" / "mnist-5k"


def idx_bytes(magic, dims, payload):
    """IDX container assembled directly from the published layout."""
    return struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims) + bytes(payload)


def write_mnist(d, images, labels, test_images=None, test_labels=None, gz=False):
    d.mkdir(parents=True, exist_ok=True)
    test_images = images if test_images is None else test_images
    test_labels = labels if test_labels is None else test_labels
    for prefix, x, y in (("train", images, labels), ("t10k", test_images, test_labels)):
        for kind, magic, arr in (("images-idx3", 2051, x), ("labels-idx1", 2049, y)):
            raw = idx_bytes(magic, arr.shape, arr.astype(np.uint8).tobytes())
            name = f"{prefix}-{kind}-ubyte"
            if gz:
                (d / (name + ".gz")).write_bytes(gzip.compress(raw))
            else:
                (d / name).write_bytes(raw)


def test_mnist_from_hand_built_idx(tmp_path):
    images = np.arange(3 * 28 * 28).reshape(3, 28, 28) % 256
    labels = np.array([7, 0, 9])
    write_mnist(tmp_path, images, labels, images[:1], labels[:1])
    train, test = load_mnist(tmp_path)
    assert train.images.shape == (3, 1, 28, 28) and test.images.shape == (1, 1, 28, 28)
    assert train.images.dtype == np.float32
    np.testing.assert_array_equal(train.labels, labels)
    np.testing.assert_allclose(train.images[:, 0], images / 255.0, rtol=1e-7)
    assert train.images.max() <= 1.0 and train.images.min() >= 0.0


def test_mnist_gzip_and_write_idx(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 28, 28))
    labels = rng.integers(0, 10, size=5)
    write_mnist(tmp_path / "gz", images, labels, gz=True)
    raw_dir = tmp_path / "raw"
    raw_dir.mkdir()
    for prefix in ("train", "t10k"):
        write_idx(raw_dir / f"{prefix}-images-idx3-ubyte", images)
        write_idx(raw_dir / f"{prefix}-labels-idx1-ubyte", labels)
    a, b = load_mnist(tmp_path / "gz")[0], load_mnist(raw_dir)[0]
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert (raw_dir / "train-labels-idx1-ubyte").read_bytes() == idx_bytes(2049, (5,), labels.astype(np.uint8))


def test_mnist_pixel_255_maps_to_one(tmp_path):
    write_mnist(tmp_path, np.full((1, 28, 28), 255), np.array([3]))
    assert load_mnist(tmp_path)[0].images.max() == 1.0


@pytest.mark.skipif(not MNIST_5K.exists(), reason="bundled MNIST subset not present")
def test_bundled_mnist_subset_counts():
    train, test = load_mnist(MNIST_5K)
    assert train.images.shape == (4000, 1, 28, 28) and test.images.shape == (1000, 1, 28, 28)
    # byte count oracle: 16-byte header + count * 784 pixels
    raw = gzip.decompress((MNIST_5K / "train-images-idx3-ubyte.gz").read_bytes())
    assert len(raw) == 16 + 4000 * 784
    assert sorted(set(train.labels.tolist())) == list(range(10))


def write_cifar(d, records_per_batch=2, seed=0):
    rng = np.random.default_rng(seed)
    d.mkdir(parents=True, exist_ok=True)
    out = {}
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        rec = rng.integers(0, 256, size=(records_per_batch, CIFAR_RECORD), dtype=np.uint8)
        rec[:, 0] %= 10
        (d / name).write_bytes(rec.tobytes())
        out[name] = rec
    return out


def test_cifar_records(tmp_path):
    recs = write_cifar(tmp_path)
    train, test = load_cifar10(tmp_path)
    assert train.images.shape == (10, 3, 32, 32) and test.images.shape == (2, 3, 32, 32)
    first = recs["data_batch_1.bin"][0]
    assert train.labels[0] == first[0]
    # channel-major: red plane, then green, then blue, each row-major 32x32
    np.testing.assert_allclose(train.images[0, 1, 0, 5], first[1 + 1024 + 5] / 255.0, rtol=1e-7)
    np.testing.assert_allclose(train.images[0, 2, 31, 31], first[3072] / 255.0, rtol=1e-7)


def test_cifar_nested_directory(tmp_path):
    write_cifar(tmp_path / "cifar-10-batches-bin")
    assert len(load_cifar10(tmp_path)[1]) == 2


def test_missing_files_are_reported(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)
    with pytest.raises(FileNotFoundError, match="data_batch_1"):
        load_cifar10(tmp_path)


CORRUPT_CASES = [
    ("mnist_bad_magic", load_mnist, r"bad magic 0x00000801 at offset 0, expected 0x00000803"),
    ("mnist_truncated", load_mnist, r"header declares \(4, 28, 28\) = 3136 bytes of data from offset 16, file holds 3036"),
    ("mnist_count_mismatch", load_mnist, r"4 images but .* holds 3 labels"),
    ("cifar_bad_size", load_cifar10, r"data_batch_3\.bin: size 6145 is not a multiple of the 3073-byte record"),
    ("cifar_bad_label", load_cifar10, r"test_batch\.bin: label 10 >= 10 at offset 3073"),
]


@pytest.mark.parametrize("case, loader, message", CORRUPT_CASES, ids=[c[0] for c in CORRUPT_CASES])
def test_canned_corrupt_files_are_rejected(case, loader, message):
    with pytest.raises(DatasetFormatError, match=message):
        loader(CORRUPT / case)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2), np.float32), np.array([0, 5]), num_classes=3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2), np.float32), np.array([0]))
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 4), np.float32), np.array([0, 1]))


def test_cache_round_trip_is_bit_exact(tmp_path):
    ds = synthetic(50, seed=3)
    save_cache(tmp_path / "a.ibpd", ds)
    back = load_cache(tmp_path / "a.ibpd")
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels)
    assert (back.split, back.name, back.num_classes) == (ds.split, ds.name, ds.num_classes)
    save_cache(tmp_path / "b.ibpd", back)
    assert (tmp_path / "a.ibpd").read_bytes() == (tmp_path / "b.ibpd").read_bytes()
    assert content_hash(back) == content_hash(ds)


def test_cache_corruption(tmp_path):
    save_cache(tmp_path / "a.ibpd", synthetic(5))
    raw = (tmp_path / "a.ibpd").read_bytes()
    (tmp_path / "b.ibpd").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DatasetFormatError, match="bad magic"):
        load_cache(tmp_path / "b.ibpd")
    (tmp_path / "b.ibpd").write_bytes(raw[:-3])
    with pytest.raises(DatasetFormatError, match="payload bytes"):
        load_cache(tmp_path / "b.ibpd")


def test_mnist_reserialized_through_cache(tmp_path):
    rng = np.random.default_rng(9)
    write_mnist(tmp_path, rng.integers(0, 256, size=(4, 28, 28)), rng.integers(0, 10, size=4))
    train = load_mnist(tmp_path)[0]
    save_cache(tmp_path / "m.ibpd", train)
    assert load_cache(tmp_path / "m.ibpd").images.tobytes() == train.images.tobytes()


def test_normalization_stats_cases():
    const = Dataset(np.full((3, 1, 2, 2), 0.5, np.float32), np.zeros(3, np.int64), num_classes=1)
    mean, std = normalization_stats(const)
    assert mean == (0.5,) and std == (1e-6,)
    half = np.zeros((2, 1, 2, 2), np.float32)
    half[1] = 1.0
    mean, std = normalization_stats(Dataset(half, np.zeros(2, np.int64), num_classes=1))
    assert mean == (0.5,) and std == (0.5,)
    with pytest.raises(ValueError):
        normalization_stats(Dataset(np.zeros((0, 1, 2, 2), np.float32), np.zeros(0, np.int64)))


def test_normalization_stats_match_two_pass_oracle():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(20, 3, 5, 5)).astype(np.float32)
    mean, std = normalization_stats(Dataset(x, np.zeros(20, np.int64)))
    for c in range(3):
        vals = [float(v) for v in x[:, c].ravel()]
        m = sum(vals) / len(vals)
        var = sum((v - m) ** 2 for v in vals) / len(vals)
        assert mean[c] == pytest.approx(m, abs=1e-6)
        assert std[c] == pytest.approx(var**0.5, abs=1e-6)


def test_augment_identity_and_determinism():
    x = np.random.default_rng(0).uniform(size=(6, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(augment(x, 5, max_shift=0, flip=False), x)
    np.testing.assert_array_equal(augment(x, 5), augment(x, 5))
    assert not np.array_equal(augment(x, 5), augment(x, 6))


def test_augment_flip_only_mirrors():
    x = np.random.default_rng(1).uniform(size=(40, 1, 4, 4)).astype(np.float32)
    out = augment(x, 2, max_shift=0)
    for a, b in zip(x, out):
        assert np.array_equal(a, b) or np.array_equal(a[:, :, ::-1], b)
    flipped = sum(not np.array_equal(a, b) for a, b in zip(x, out))
    assert 5 < flipped < 35


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_augment_pixels_come_from_input_or_padding(seed):
    x = np.random.default_rng(seed).uniform(size=(3, 2, 6, 6)).astype(np.float32)
    out = augment(x, seed)
    assert out.shape == x.shape
    allowed = set(x.ravel().tolist()) | {0.0}
    assert set(out.ravel().tolist()) <= allowed
    assert out.min() >= 0 and out.max() <= 1


def test_synthetic_properties():
    a, b = synthetic(64, seed=1), synthetic(64, seed=1)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.shape == (64, 1, 8, 8) and a.num_classes == 2
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert set(a.labels.tolist()) == {0, 1}
    test = synthetic(64, seed=1, split="test")
    assert not np.array_equal(a.images, test.images)
    # class 0 carries a bright column, class 1 a bright row
    img0 = a.images[np.argmax(a.labels == 0), 0]
    img1 = a.images[np.argmax(a.labels == 1), 0]
    assert img0.max(axis=0).max() > 0.7 and (img0 > 0.7).sum(axis=0).max() == 6
    assert (img1 > 0.7).sum(axis=1).max() == 6
