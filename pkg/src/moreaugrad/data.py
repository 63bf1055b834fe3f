"""Datasets for the classification experiments: IDX (MNIST) files and
synthetic Gaussian blobs."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import make_rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DatasetError(ValueError):
    """Raised for malformed or empty datasets."""


@dataclass(frozen=True)
class Dataset:
    """Classification data stored row-wise.

    Attributes
    ----------
    inputs : ndarray, shape (n, d)
    labels : ndarray of int, shape (n,)
    n_classes : int
    test_inputs, test_labels : ndarray or None
        Optional held-out split.
    """

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    test_inputs: np.ndarray | None = None
    test_labels: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.ndim != 2 or X.shape[0] == 0:
            raise DatasetError("dataset is empty")
        if X.shape[0] != y.size:
            raise DatasetError(f"{X.shape[0]} inputs but {y.size} labels")
        if np.any(y < 0) or np.any(y >= self.n_classes):
            raise DatasetError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)
        if self.test_inputs is not None:
            object.__setattr__(self, "test_inputs", np.asarray(self.test_inputs, dtype=np.float64))
            object.__setattr__(self, "test_labels", np.asarray(self.test_labels, dtype=np.int64).reshape(-1))

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def has_test(self) -> bool:
        return self.test_inputs is not None and len(self.test_inputs) > 0

    def split(self, test_fraction: float) -> "Dataset":
        """Move the last ``test_fraction`` of the samples to the test split."""
        if not 0 <= test_fraction < 1:
            raise DatasetError("test_fraction must lie in [0, 1)")
        n_test = int(round(self.n * test_fraction))
        if n_test == 0:
            return self
        k = self.n - n_test
        return Dataset(self.inputs[:k], self.labels[:k], self.n_classes,
                       self.inputs[k:], self.labels[k:])


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _read_idx(path: Path, magic: int, header_ints: int):
    raw = Path(path).read_bytes()
    if len(raw) < 4 * (header_ints + 1):
        raise DatasetError(f"{path}: truncated header")
    found, *dims = struct.unpack(">" + "I" * (header_ints + 1), raw[: 4 * (header_ints + 1)])
    if found != magic:
        raise DatasetError(f"{path}: magic number 0x{found:08x}, expected 0x{magic:08x}")
    body = raw[4 * (header_ints + 1):]
    need = int(np.prod(dims))
    if len(body) < need:
        raise DatasetError(f"{path}: truncated data, expected {need} bytes, found {len(body)}")
    return dims, np.frombuffer(body, dtype=np.uint8, count=need)


def load_idx_dataset(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Read an IDX image/label pair (MNIST format).

    Pixels are scaled to ``[0, 1]`` and flattened; the first ``limit``
    samples in file order are kept.

    Raises
    ------
    DatasetError
        On a magic-number mismatch, a truncated file, a label outside
        ``[0, 9]``, mismatched counts, or an empty selection (``limit == 0``).
    """
    if limit is not None and limit <= 0:
        raise DatasetError("limit must be positive (empty dataset)")
    (n_img, rows, cols), pix = _read_idx(images_path, IMAGE_MAGIC, 3)
    (n_lab,), lab = _read_idx(labels_path, LABEL_MAGIC, 1)
    if n_img != n_lab:
        raise DatasetError(f"{n_img} images but {n_lab} labels")
    if np.any(lab > 9):
        bad = int(np.flatnonzero(lab > 9)[0])
        raise DatasetError(f"label {int(lab[bad])} at index {bad} is outside [0, 9]")
    n = n_img if limit is None else min(limit, n_img)
    if n == 0:
        raise DatasetError("dataset is empty")
    X = pix.reshape(n_img, rows * cols)[:n].astype(np.float64) / 255.0
    return Dataset(X, lab[:n].astype(np.int64), 10)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, labels.size) + labels.tobytes())


def blob_means(k: int, d: int) -> np.ndarray:
    """Class means whose nearest pairs are exactly 2 apart.

    Every mean is at distance 1 from the bisector separating it from its
    nearest neighbour (a unit margin). Means lie on a line for ``d = 1``,
    on a regular polygon in the first two coordinates for ``k <= 4`` or
    ``d == 2``, and at scaled coordinate vectors otherwise.
    """
    if d == 1:
        return (2.0 * np.arange(k, dtype=np.float64) - (k - 1)).reshape(k, 1)
    M = np.zeros((k, d))
    if k == 1:
        return M
    if k > d or k <= 4 or d == 2:
        if k == 2:
            M[:, 0] = [-1.0, 1.0]
            return M
        r = 1.0 / math.sin(math.pi / k)
        ang = 2 * math.pi * np.arange(k) / k
        M[:, 0], M[:, 1] = r * np.cos(ang), r * np.sin(ang)
        return M
    M[np.arange(k), np.arange(k)] = math.sqrt(2.0)
    return M


def synth_blobs(k: int, n: int, d: int, seed: int, sigma: float = 0.5) -> Dataset:
    """Gaussian blobs: ``n`` samples for each of ``k`` classes in ``R^d``.

    Samples are drawn around :func:`blob_means` with isotropic standard
    deviation ``sigma`` and interleaved by class (sample ``i`` has label
    ``i mod k``), so any prefix is roughly balanced.
    """
    if min(k, n, d) < 1:
        raise DatasetError("k, n and d must be positive")
    rng = make_rng(seed)
    means = blob_means(k, d)
    labels = np.tile(np.arange(k), n)
    X = means[labels] + sigma * rng.normal(size=(k * n, d))
    return Dataset(X, labels, k)
