"""Dataset loading, binarization and split management.

File formats handled here:
  * IDX (big-endian, magic 0x00000801/0x00000803) as distributed for MNIST,
    plain or gzip-compressed;
  * CIFAR-10 binary batches (records of 1 label byte + 3072 pixel bytes);
  * a raw float32 matrix format for synthetic fixtures: magic b"F32M",
    uint32-LE rows, uint32-LE cols, row-major float32-LE payload.

All loaded values are scaled into [0, 1]. Splits are deterministic given a
seed (shuffle, then floor-sized partitions with the remainder handed to the
earliest partitions).
"""

from __future__ import annotations

import gzip
import os
import re
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
MATRIX_MAGIC = b"F32M"
CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072


class DataFormatError(ValueError):
    """A dataset file does not match its declared format."""


@dataclass
class Dataset:
    name: str
    n: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _read_file(path: str) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def load_idx(path: str) -> np.ndarray:
    """Decode an IDX file into an (items, features) float32 matrix in [0, 1].

    Image payload bytes are scaled by 1/255; items with extra dimensions are
    flattened row-major.
    """
    raw = _read_file(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC):
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = dims[0]
    features = int(np.prod(dims[1:], dtype=np.int64)) if ndim > 1 else 1
    expected = count * features
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if payload.size != expected:
        raise DataFormatError(
            f"{path}: payload has {payload.size} bytes, expected {expected}"
        )
    matrix = payload.reshape(count, features).astype(np.float32) / np.float32(255.0)
    return matrix


def write_idx(path: str, values: np.ndarray, magic: int = IDX_IMAGE_MAGIC,
              dims: tuple | None = None) -> None:
    """Emit a uint8 array as an IDX file (inverse of load_idx before scaling)."""
    arr = np.ascontiguousarray(values, dtype=np.uint8)
    if dims is None:
        dims = arr.shape
    if int(np.prod(dims, dtype=np.int64)) != arr.size:
        raise ValueError(f"dims {dims} do not match {arr.size} values")
    ndim = (magic & 0xFF)
    if ndim != len(dims):
        raise ValueError(f"magic 0x{magic:08x} implies {ndim} dims, got {len(dims)}")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{len(dims)}I", *dims))
        f.write(arr.tobytes())


def load_cifar(path: str) -> np.ndarray:
    """Load CIFAR-10 binary batches into an (items, 3072) matrix in [0, 1].

    `path` may be a single batch file or a directory containing
    data_batch_*.bin / test_batch.bin. Labels are discarded.
    """
    if os.path.isdir(path):
        names = sorted(
            f for f in os.listdir(path)
            if re.fullmatch(r"(data_batch_\d+|test_batch)\.bin", f)
        )
        if not names:
            raise DataFormatError(f"{path}: no CIFAR batch files found")
        parts = [load_cifar(os.path.join(path, name)) for name in names]
        return np.concatenate(parts, axis=0)
    raw = np.frombuffer(_read_file(path), dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
        raise DataFormatError(
            f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD}"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    pixels = records[:, 1:]
    return pixels.astype(np.float32) / np.float32(255.0)


def write_matrix(path: str, matrix: np.ndarray) -> None:
    """Write a 2-D float32 matrix in the raw fixture format."""
    arr = np.ascontiguousarray(matrix, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("matrix files hold 2-D arrays")
    with open(path, "wb") as f:
        f.write(MATRIX_MAGIC)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.astype("<f4").tobytes())


def load_matrix(path: str) -> np.ndarray:
    """Read a matrix written by write_matrix."""
    raw = _read_file(path)
    if raw[:4] != MATRIX_MAGIC:
        raise DataFormatError(f"{path}: bad matrix magic {raw[:4]!r}")
    rows, cols = struct.unpack("<II", raw[4:12])
    payload = np.frombuffer(raw, dtype="<f4", offset=12)
    if payload.size != rows * cols:
        raise DataFormatError(f"{path}: expected {rows * cols} values, got {payload.size}")
    return payload.reshape(rows, cols).astype(np.float32)


def binarize(matrix: np.ndarray, mode: str = "threshold") -> np.ndarray:
    """Map values in [0, 1] to {0, 1}.

    "threshold": 1 where value >= 0.5 (ties round up). "static": the matrix
    is already binary (e.g. loaded from a pre-binarized file) and is only
    validated. Idempotent in both modes.
    """
    matrix = np.asarray(matrix)
    if mode == "threshold":
        return (matrix >= 0.5).astype(matrix.dtype)
    if mode == "static":
        if not np.all((matrix == 0) | (matrix == 1)):
            raise DataFormatError("static binarization expects values in {0, 1}")
        return matrix
    raise ValueError(f"unknown binarize mode {mode!r}")


def split(matrix: np.ndarray, fractions, seed: int):
    """Deterministically shuffle and partition rows by `fractions`.

    Sizes are floor(fraction * rows) with the remainder distributed one row
    at a time to the earliest partitions. Requesting a nonzero fraction that
    floors to zero rows raises.
    """
    matrix = np.asarray(matrix)
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    rows = matrix.shape[0]
    sizes = [int(np.floor(f * rows)) for f in fractions]
    remainder = rows - sum(sizes)
    for i in range(len(sizes)):
        if remainder == 0:
            break
        sizes[i] += 1
        remainder -= 1
    for f, s in zip(fractions, sizes):
        if f > 0 and s == 0:
            raise ValueError(f"dataset with {rows} rows too small for fractions {fractions}")
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(rows)
    parts, start = [], 0
    for s in sizes:
        parts.append(matrix[order[start:start + s]])
        start += s
    return tuple(parts)


# -- dataset registry --------------------------------------------------------

SPLIT_SEED = 0  # splits stay fixed across training seeds

_SYNTH_RE = re.compile(r"synthetic(?:-(\d+)x(\d+))?$")


def synthetic_dataset(points: int, dim: int, seed: int = SPLIT_SEED) -> np.ndarray:
    """Deterministic random binary patterns used as a desk-scale fixture."""
    rng = np.random.Generator(np.random.Philox(key=seed + 0x5EED))
    return rng.integers(0, 2, size=(points, dim)).astype(np.float32)


def _mnist_matrices(data_dir: str):
    def find(stem):
        for suffix in ("", ".gz"):
            path = os.path.join(data_dir, stem + suffix)
            if os.path.exists(path):
                return path
        raise FileNotFoundError(f"missing {stem}[.gz] under {data_dir}")

    train = load_idx(find("train-images-idx3-ubyte"))
    test = load_idx(find("t10k-images-idx3-ubyte"))
    return train, test


def load_dataset(name: str, data_dir: str = "data", seed: int = SPLIT_SEED) -> Dataset:
    """Build a named dataset with train/val/test partitions.

    Names: "synthetic[-<points>x<dim>]", "mnist", "binary_mnist", "cifar10",
    "omniglot", or a path to a raw .f32 matrix file. MNIST splits 50k/10k
    off the training file and keeps the test file; CIFAR-10 splits 45k/5k
    and keeps test_batch; matrix files split 0.8/0.1/0.1.
    """
    m = _SYNTH_RE.fullmatch(name)
    if m:
        points = int(m.group(1) or 128)
        dim = int(m.group(2) or 16)
        full = synthetic_dataset(points, dim, seed)
        train, val, test = split(full, (0.75, 0.125, 0.125), seed)
        return Dataset(name, dim, train, val, test)

    if name == "mnist" or name == "binary_mnist":
        train_full, test = _mnist_matrices(data_dir)
        for part in (train_full, test):
            if part.shape[1] != 784:
                raise DataFormatError(
                    f"{name} expects 784 pixels per image, got {part.shape[1]}")
        if name == "binary_mnist":
            static = [os.path.join(data_dir, f"binarized_mnist_{part}.amat")
                      for part in ("train", "valid", "test")]
            if all(os.path.exists(p) for p in static):
                mats = [binarize(np.loadtxt(p, dtype=np.float32), "static") for p in static]
                return Dataset(name, mats[0].shape[1], *mats)
            train_full = binarize(train_full)
            test = binarize(test)
        train, val = split(train_full, (5.0 / 6.0, 1.0 / 6.0), seed)
        return Dataset(name, train.shape[1], train, val, test)

    if name == "cifar10":
        train_files = [os.path.join(data_dir, f"data_batch_{i}.bin") for i in range(1, 6)]
        parts = [load_cifar(p) for p in train_files]
        train_full = np.concatenate(parts, axis=0)
        test = load_cifar(os.path.join(data_dir, "test_batch.bin"))
        train, val = split(train_full, (0.9, 0.1), seed)
        return Dataset(name, train.shape[1], train, val, test)

    if name == "omniglot":
        return load_omniglot(data_dir, seed)

    if name.endswith(".f32") or os.path.sep in name:
        full = load_matrix(name)
        train, val, test = split(full, (0.8, 0.1, 0.1), seed)
        return Dataset(os.path.basename(name), full.shape[1], train, val, test)

    raise ValueError(f"unknown dataset {name!r}")


def load_omniglot(data_dir: str, seed: int = SPLIT_SEED) -> Dataset:
    """Importer stub for Omniglot.

    Expects a pre-processed matrix file `omniglot_28x28.f32` in `data_dir`
    containing one flattened 28x28 grayscale character per row (resized with
    any standard image tool); rows are threshold-binarized at 0.5 here and
    split 0.8/0.1/0.1. Preparing that file is out of scope for this package.
    """
    path = os.path.join(data_dir, "omniglot_28x28.f32")
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"{path} not found; supply a pre-processed 28x28 matrix file (see docstring)"
        )
    full = binarize(load_matrix(path))
    train, val, test = split(full, (0.8, 0.1, 0.1), seed)
    return Dataset("omniglot", full.shape[1], train, val, test)
