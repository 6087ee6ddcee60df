"""MNIST / CIFAR-10 readers, a bundled synthetic set, normalization and augmentation.

Images are stored as float32 arrays of shape [count, C, H, W] with pixel
values in [0, 1]; normalization statistics ride along but are applied by
the network, never baked into the pixels.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "CACHE_MAGIC",
    "Dataset",
    "DatasetFormatError",
    "augment",
    "content_hash",
    "load_cache",
    "load_cifar10",
    "load_mnist",
    "normalization_stats",
    "save_cache",
    "synthetic",
    "write_idx",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetFormatError(ValueError):
    """A dataset file does not follow its on-disk format."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10
    name: str = ""
    normalization: tuple | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [count, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        return replace(self, images=self.images[index], labels=self.labels[index])


def content_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
    return h.hexdigest()


# -- MNIST (IDX) -------------------------------------------------------------


def _read_maybe_gz(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _find(directory: Path, stems: list[str]) -> Path:
    for stem in stems:
        for suffix in ("", ".gz"):
            p = directory / (stem + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"none of {stems} (optionally .gz) found in {directory}")


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise DatasetFormatError(f"{path}: truncated header, {len(raw)} bytes at offset 0")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"{path}: truncated header, need {header} bytes, have {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = int(np.prod(dims))
    have = len(raw) - header
    if have != need:
        raise DatasetFormatError(
            f"{path}: header declares {dims} = {need} bytes of data from offset {header}, file holds {have}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _load_idx_pair(directory: Path, prefix: str, split: str) -> Dataset:
    ipath = _find(directory, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
    lpath = _find(directory, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
    images = _parse_idx(_read_maybe_gz(ipath), IDX_IMAGES_MAGIC, ipath)
    labels = _parse_idx(_read_maybe_gz(lpath), IDX_LABELS_MAGIC, lpath)
    if images.ndim != 3:
        raise DatasetFormatError(f"{ipath}: expected 3 dimensions, header declares {images.ndim}")
    if len(images) != len(labels):
        raise DatasetFormatError(f"{ipath}: {len(images)} images but {lpath} holds {len(labels)} labels")
    if labels.size and labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DatasetFormatError(f"{lpath}: label {labels[bad]} >= 10 at offset {8 + bad}")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None]
    return Dataset(x, labels.astype(np.int64), split, 10, "mnist")


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    """Read the four IDX files (raw or gzipped) from ``directory``."""
    d = Path(directory)
    return _load_idx_pair(d, "train", "train"), _load_idx_pair(d, "t10k", "test")


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    """Write a uint8 array in IDX format (gzip if ``compress`` or the name ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    raw = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    if compress or (compress is None and path.suffix == ".gz"):
        raw = gzip.compress(raw, mtime=0)
    path.write_bytes(raw)


# -- CIFAR-10 binary batches -------------------------------------------------


def _parse_cifar(raw: bytes, path) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DatasetFormatError(f"{path}: label {labels[bad]} >= 10 at offset {bad * CIFAR_RECORD}")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def _cifar_split(paths: list[Path], split: str) -> Dataset:
    xs, ys = zip(*(_parse_cifar(p.read_bytes(), p) for p in paths))
    x = np.concatenate(xs).astype(np.float32) / np.float32(255.0)
    return Dataset(x, np.concatenate(ys).astype(np.int64), split, 10, "cifar10")


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Read ``data_batch_1..5.bin`` and ``test_batch.bin`` (directly or under cifar-10-batches-bin/)."""
    d = Path(directory)
    if not (d / "test_batch.bin").exists() and (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    train = [d / f"data_batch_{i}.bin" for i in range(1, 6)]
    missing = [str(p) for p in train + [d / "test_batch.bin"] if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 batch files: {', '.join(missing)}")
    return _cifar_split(train, "train"), _cifar_split([d / "test_batch.bin"], "test")


# -- synthetic ---------------------------------------------------------------


def synthetic(count: int = 400, seed: int = 0, split: str = "train", size: int = 8, noise: float = 0.1) -> Dataset:
    """Two-class 8x8 set: a vertical bar (class 0) or a horizontal bar (class 1) on noise."""
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = rng.integers(0, 2, size=count)
    pos = rng.integers(2, size - 2, size=count)
    x = rng.uniform(0.0, noise, size=(count, 1, size, size))
    for i, (y, p) in enumerate(zip(labels, pos)):
        if y == 0:
            x[i, 0, 1:-1, p] = rng.uniform(0.8, 1.0)
        else:
            x[i, 0, p, 1:-1] = rng.uniform(0.8, 1.0)
    return Dataset(x.astype(np.float32), labels.astype(np.int64), split, 2, "synthetic")


# -- normalization and augmentation ------------------------------------------


def normalization_stats(train: Dataset, floor: float = 1e-6) -> tuple[tuple, tuple]:
    """Per-channel mean and standard deviation over every training pixel."""
    if len(train) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    x = train.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = np.maximum(x.std(axis=(0, 2, 3)), floor)
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)


def augment(images: np.ndarray, seed, max_shift: int = 4, flip: bool = True) -> np.ndarray:
    """Random horizontal flips and integer translations (zero padding) per image."""
    rng = np.random.default_rng(seed)
    n, c, h, w = images.shape
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    p = max_shift
    padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = shifts[i]
        img = padded[i, :, p + dy : p + dy + h, p + dx : p + dx + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


# -- internal cache ------------------------------------------------------------
#
#   b"IBPD" | version u32 | split_len u32 | split | name_len u32 | name
#   | num_classes u32 | count u32 | C u32 | H u32 | W u32
#   | images float32 LE | labels int64 LE     (all little-endian)

CACHE_MAGIC = b"IBPD"
CACHE_VERSION = 1


def save_cache(path, ds: Dataset) -> None:
    parts = [CACHE_MAGIC, struct.pack("<I", CACHE_VERSION)]
    for text in (ds.split, ds.name):
        b = text.encode("utf-8")
        parts += [struct.pack("<I", len(b)), b]
    parts.append(struct.pack("<5I", ds.num_classes, len(ds), *ds.images.shape[1:]))
    parts.append(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_cache(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {CACHE_MAGIC!r}")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CACHE_VERSION:
            raise DatasetFormatError(f"{path}: unsupported cache version {version}")
        off = 8
        texts = []
        for _ in range(2):
            (ln,) = struct.unpack_from("<I", raw, off)
            texts.append(raw[off + 4 : off + 4 + ln].decode("utf-8"))
            off += 4 + ln
        num_classes, count, c, h, w = struct.unpack_from("<5I", raw, off)
    except struct.error as exc:
        raise DatasetFormatError(f"{path}: truncated header: {exc}") from exc
    off += 20
    need = count * c * h * w * 4 + count * 8
    if len(raw) - off != need:
        raise DatasetFormatError(f"{path}: expected {need} payload bytes from offset {off}, found {len(raw) - off}")
    images = np.frombuffer(raw, dtype="<f4", count=count * c * h * w, offset=off).reshape(count, c, h, w)
    labels = np.frombuffer(raw, dtype="<i8", count=count, offset=off + count * c * h * w * 4)
    return Dataset(images.astype(np.float32), labels.astype(np.int64), texts[0], num_classes, texts[1])
