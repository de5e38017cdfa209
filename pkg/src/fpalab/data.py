"""IDX (MNIST) and CIFAR-10 binary readers plus an IDX writer."""

from __future__ import annotations

import gzip
import importlib.util
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Split:
    images: np.ndarray  # float32 [N, C, H, W] in [0, 1]
    labels: np.ndarray  # int64 [N]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int = 10

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.test.images.shape[1:])


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def parse_idx(raw: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into a uint8 array."""
    if len(raw) < 4:
        raise FormatError("truncated IDX header", len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"IDX magic 0x{magic:08x} != expected 0x{expected_magic:08x}", 0)
    if magic >> 8 != 0x08:
        raise FormatError(f"unsupported IDX type/magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise FormatError("truncated IDX dimension table", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) < end + count:
        raise FormatError(f"IDX payload truncated: need {count} bytes, have {len(raw) - end}", len(raw))
    if len(raw) > end + count:
        raise FormatError("trailing bytes after IDX payload", end + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=end).reshape(dims)


def write_idx(path, array: np.ndarray) -> Path:
    array = np.asarray(array, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path.write_bytes(header + array.tobytes())
    return path


def load_idx(images_path, labels_path, num_classes: int = 10, pad_to: int | None = 32) -> Split:
    images = parse_idx(_read(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    _check_labels(labels, num_classes, offset=8)
    x = images.astype(np.float32)[:, None] / np.float32(255)
    if pad_to is not None and x.shape[-1] < pad_to:
        lo = (pad_to - x.shape[-1]) // 2
        hi = pad_to - x.shape[-1] - lo
        x = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    return Split(x, labels.astype(np.int64))


def _check_labels(labels: np.ndarray, num_classes: int, offset: int, stride: int = 1) -> None:
    bad = np.nonzero(labels >= num_classes)[0]
    if len(bad):
        i = int(bad[0])
        raise FormatError(f"label {int(labels[i])} at record {i} outside [0, {num_classes})", offset + i * stride)


def parse_cifar10(raw: bytes) -> Split:
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise FormatError(f"CIFAR-10 file length {len(raw)} is not a multiple of {CIFAR_RECORD}", whole)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    _check_labels(labels, 10, offset=0, stride=CIFAR_RECORD)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return Split(x, labels.astype(np.int64))


def load_cifar10(paths) -> Split:
    parts = [parse_cifar10(_read(p)) for p in paths]
    return Split(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


def _find(root: Path, name: str) -> Path:
    for cand in (root / name, root / (name + ".gz"), root / name.replace("-idx", ".idx")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{name} not found under {root}")


def load_dataset(path, fmt: str = "IDX", pad_to: int | None = 32) -> Dataset:
    """Load a train/test dataset directory.

    IDX: the four standard MNIST file names (optionally gzipped).
    CIFAR10: ``data_batch_*.bin`` and ``test_batch.bin``.
    """
    root = Path(path)
    fmt = fmt.upper().replace("-", "").replace("_", "")
    if fmt == "IDX":
        splits = {k: load_idx(_find(root, a), _find(root, b), pad_to=pad_to) for k, (a, b) in MNIST_FILES.items()}
        return Dataset(splits["train"], splits["test"])
    if fmt in ("CIFAR10", "CIFAR10BINARY"):
        train = sorted(root.glob("data_batch_*.bin"))
        if not train:
            raise FileNotFoundError(f"no data_batch_*.bin under {root}")
        return Dataset(load_cifar10(train), load_cifar10([_find(root, "test_batch.bin")]))
    raise FormatError(f"unknown dataset format {fmt!r}")


def write_mnist_subset(out_dir, test_per_class: int = 100, seed: int = 0) -> Path:
    """Write the 5000-digit MNIST sample bundled with mlxtend as IDX files.

    A stratified split keeps ``test_per_class`` digits per class for testing;
    the rest form the training set. Both splits are shuffled with ``seed``.
    """
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError("mlxtend is not installed; pip install mlxtend to obtain the MNIST sample")
    src = Path(spec.submodule_search_locations[0]) / "data" / "data" / "mnist_5k.csv.gz"
    with gzip.open(src) as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.nonzero(labels == c)[0])
        test_idx.append(idx[:test_per_class])
        train_idx.append(idx[test_per_class:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    out = Path(out_dir)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        img_name, lab_name = MNIST_FILES[split]
        write_idx(out / img_name, images[idx])
        write_idx(out / lab_name, labels[idx])
    return out
