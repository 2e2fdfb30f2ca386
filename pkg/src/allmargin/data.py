"""Datasets: synthetic 2-d families, IDX files, label corruption.

Labels are 0-based class indices everywhere; label 0 is the negative class
when a scalar-output network reads a binary dataset. Synthetic inputs are
centered and scaled into the unit ball, which keeps margins comparable
across runs and keeps bias-free networks in play.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from ._util import rng_for

SYNTHETIC_KINDS = ("two-gaussians", "two-moons", "spirals")

_IDX_DTYPES = {
    0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.labels) != len(self.inputs):
            raise ValueError("inputs must be (n, d) with one label per row")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.classes):
            raise ValueError("labels must lie in [0, classes)")
        if not self.provenance:
            raise ValueError("provenance must be populated")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx, split=None):
        return Dataset(self.inputs[idx], self.labels[idx], self.classes,
                       split or self.split, self.provenance)


def _normalize(x):
    x = x - np.mean(x, axis=0)
    scale = max(1.0, float(np.max(np.linalg.norm(x, axis=1))))
    return x / scale


def gen_synthetic(kind, n, noise=0.08, seed=0):
    """Deterministic 2-d toy datasets; spirals are 3-class, the rest binary."""
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if n < 2:
        raise ValueError("n must be at least 2")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    rng = rng_for(seed, 7)
    if kind == "two-gaussians":
        labels = np.arange(n) % 2
        centers = np.outer(2 * labels - 1, [1.5, 0.0])
        x = centers + noise * 6.0 * rng.standard_normal((n, 2))
        classes = 2
    elif kind == "two-moons":
        labels = np.arange(n) % 2
        t = rng.uniform(0.0, np.pi, size=n)
        x = np.where(labels[:, None] > 0,
                     np.stack([np.cos(t), np.sin(t)], axis=1),
                     np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1))
        x = x + noise * rng.standard_normal((n, 2))
        classes = 2
    else:
        labels = np.arange(n) % 3
        t = rng.uniform(0.15, 1.0, size=n)
        theta = 3.5 * t + 2.0 * np.pi * labels / 3.0
        x = np.stack([t * np.cos(theta), t * np.sin(theta)], axis=1)
        x = x + noise * 0.5 * rng.standard_normal((n, 2))
        classes = 3
    return Dataset(_normalize(x), labels, classes, "train",
                   f"synthetic:{kind}:n={n}:seed={seed}:noise={noise}")


def corrupt_labels(dataset, fraction, seed=0):
    """Resample ceil(fraction * n) labels uniformly among the wrong classes."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if fraction > 0 and dataset.classes < 2:
        raise ValueError("need at least two classes to corrupt labels")
    n = len(dataset)
    take = math.ceil(fraction * n)
    rng = rng_for(seed, 8)
    hit = rng.choice(n, size=take, replace=False)
    labels = dataset.labels.copy()
    shift = rng.integers(1, dataset.classes, size=take)
    labels[hit] = (labels[hit] + shift) % dataset.classes
    return replace(dataset, labels=labels,
                   provenance=dataset.provenance
                   + f"|corrupt:fraction={fraction}:seed={seed}")


def partition(dataset, n_train, seed=0):
    """Shuffle once and split into a train and a validation dataset."""
    n = len(dataset)
    if not 0 < n_train < n:
        raise ValueError("n_train must leave something for validation")
    perm = rng_for(seed, 9).permutation(n)
    return (dataset.subset(perm[:n_train], "train"),
            dataset.subset(perm[n_train:], "val"))


def read_idx(path):
    """Read one big-endian IDX file into a native-order array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError("not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise ValueError(f"unknown IDX dtype code 0x{code:02x}")
    if len(raw) < 4 + 4 * ndim:
        raise ValueError("truncated IDX header")
    dims = struct.unpack(f">{ndim}l", raw[4:4 + 4 * ndim])
    dtype = _IDX_DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    body = raw[4 + 4 * ndim:]
    if len(body) != count * dtype.itemsize:
        raise ValueError("IDX payload size does not match its header")
    arr = np.frombuffer(body, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def save_idx(path, arr):
    """Write an array as big-endian IDX; exact round-trip with read_idx."""
    arr = np.asarray(arr)
    code = None
    for c, dt in _IDX_DTYPES.items():
        if dt.newbyteorder("=") == arr.dtype:
            code = c
            break
    if code is None:
        raise ValueError(f"no IDX dtype code for {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}l", *arr.shape))
        fh.write(arr.astype(_IDX_DTYPES[code]).tobytes())


def load_idx(images_path, labels_path, classes=None, limit=None, split="train"):
    """Pair IDX images (flattened, scaled to [0, 1]) with IDX labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path).reshape(-1).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image and label counts differ")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if classes is None:
        classes = int(labels.max()) + 1 if len(labels) else 1
    digest = hashlib.sha256()
    for p in (images_path, labels_path):
        with open(p, "rb") as fh:
            digest.update(fh.read())
    return Dataset(flat, labels, classes, split, f"idx:{digest.hexdigest()[:16]}")


def save_csv(dataset, path):
    """One row per example, features then the label last."""
    with open(path, "w") as fh:
        for row, label in zip(dataset.inputs, dataset.labels):
            fh.write(",".join(repr(float(v)) for v in row)
                     + f",{int(label)}\n")
