"""Datasets: CIFAR-10 binary batches, synthetic Gaussian clusters, splits and batching."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .artifacts import atomic_write
from .errors import FormatError, UsageError
from .rng import Rng

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CACHE_MAGIC = b"MOEDATA1"


@dataclass(frozen=True)
class Dataset:
    """Feature matrix ``x`` (N x D float64) with integer ``y`` in ``[0, num_classes)``.

    ``channels`` groups consecutive features for normalisation: 3 planes of
    1024 pixels for CIFAR-10, one channel per feature for synthetic data.
    """

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "all"
    source: str = ""
    channels: int = 0
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise UsageError(f"features {x.shape} and labels {y.shape} do not match")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise UsageError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if not self.channels:
            object.__setattr__(self, "channels", x.shape[1])
        if x.shape[1] % self.channels:
            raise UsageError(f"dim {x.shape[1]} not divisible into {self.channels} channels")

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, index, split=None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(self, x=self.x[index], y=self.y[index], split=split or self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact equality of contents and header fields."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            same(self.x, other.x) and same(self.y, other.y)
            and (self.num_classes, self.split, self.source, self.channels, self.seed)
            == (other.num_classes, other.split, other.source, other.channels, other.seed)
            and same(self.norm_mean, other.norm_mean) and same(self.norm_std, other.norm_std)
        )


# -- CIFAR-10 ---------------------------------------------------------------

def parse_cifar10_binary(raw: bytes, split: str = "train") -> Dataset:
    """Decode CIFAR-10 binary records into pixels scaled to [0, 1].

    Each 3073-byte record is a label byte followed by the red, green and blue
    32x32 planes in row-major order.  Normalisation is a separate step
    (:func:`normalize`) because its statistics come from the training split.
    """
    n, rem = divmod(len(raw), CIFAR_RECORD)
    if rem:
        raise FormatError(
            f"CIFAR-10 data length {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"trailing record starts at offset {n * CIFAR_RECORD}"
        )
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = buf[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"CIFAR-10 record {bad[0]} has label byte {labels[bad[0]]} > 9")
    x = buf[:, 1:].astype(np.float64) / 255.0
    return Dataset(x, labels, 10, split=split, source="cifar10", channels=3)


def cifar10_available(directory) -> bool:
    if not directory:
        return False
    d = Path(directory)
    return all((d / f).is_file() for files in CIFAR_FILES.values() for f in files)


def load_cifar10(directory, n_train=2000, n_val=500, n_test=1000, seed=0):
    """Load and subsample the binary batches, returning normalised (train, val, test).

    Train and validation are drawn disjointly from the five training batches;
    the test split comes from ``test_batch.bin``.
    """
    d = Path(directory or os.environ.get("MOE_LAB_DATA_DIR", ""))
    if not cifar10_available(d):
        raise FormatError(f"CIFAR-10 binary batches not found in {str(d)!r}")
    pool = _concat([parse_cifar10_binary((d / f).read_bytes()) for f in CIFAR_FILES["train"]])
    test = parse_cifar10_binary((d / CIFAR_FILES["test"][0]).read_bytes(), split="test")
    if n_train + n_val > len(pool) or n_test > len(test):
        raise UsageError("requested more CIFAR-10 examples than available")
    rng = Rng(seed, "cifar-subsample")
    perm = rng.permutation(len(pool))
    train = pool.subset(perm[:n_train], "train")
    val = pool.subset(perm[n_train:n_train + n_val], "val")
    test = test.subset(rng.permutation(len(test))[:n_test], "test")
    train, val, test = (replace(s, seed=seed) for s in (train, val, test))
    return normalize(train, val, test)


def _concat(parts):
    return replace(parts[0], x=np.concatenate([p.x for p in parts]),
                   y=np.concatenate([p.y for p in parts]))


# -- synthetic data ---------------------------------------------------------

def synth_clusters(seed, classes, clusters_per_class, dim, n_per_class, spread, center_scale=1.0):
    """Balanced Gaussian blobs; each class owns ``clusters_per_class`` centres.

    Centres are standard normal draws scaled by ``center_scale``.  A class's
    examples are spread round-robin over its centres.
    """
    for name, val in (("classes", classes), ("clusters_per_class", clusters_per_class),
                      ("dim", dim), ("n_per_class", n_per_class)):
        if int(val) < 1:
            raise UsageError(f"{name} must be >= 1, got {val}")
    if not spread > 0:
        raise UsageError(f"spread must be positive, got {spread}")
    rng = Rng(seed, "synth-clusters")
    centers = center_scale * rng.normal((classes, clusters_per_class, dim))
    y = np.repeat(np.arange(classes), n_per_class)
    which = np.tile(np.arange(n_per_class) % clusters_per_class, classes)
    x = centers[y, which] + spread * rng.normal((y.size, dim))
    return Dataset(x, y, classes, source="synthetic", seed=seed,
                   meta={"centers": centers, "cluster": which})


# -- splitting, normalisation, batching ------------------------------------

def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Class-stratified disjoint split into (train, val, test).

    Per class, the first ``round(f * n_c)`` shuffled indices go to train, the
    next to val and the rest to test, so every part is within one example of
    its target per class.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    rng = Rng(seed, "split")
    parts = ([], [], [])
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.y == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(fractions[0] * idx.size))
        n_val = int(round(fractions[1] * idx.size))
        n_val = min(n_val, idx.size - n_train)
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    out = []
    for name, chunks in zip(("train", "val", "test"), parts):
        index = np.sort(np.concatenate(chunks))
        out.append(replace(dataset.subset(index, name), seed=seed))
    return tuple(out)


def channel_stats(dataset: Dataset):
    xs = dataset.x.reshape(len(dataset), dataset.channels, -1)
    mean = xs.mean(axis=(0, 2))
    std = xs.std(axis=(0, 2))
    return mean, np.where(std > 0, std, 1.0)


def normalize(train: Dataset, *others: Dataset):
    """Standardise every split per channel with statistics of ``train`` only."""
    mean, std = channel_stats(train)
    out = []
    for ds in (train, *others):
        xs = ds.x.reshape(len(ds), ds.channels, -1)
        x = ((xs - mean[None, :, None]) / std[None, :, None]).reshape(ds.x.shape)
        out.append(replace(ds, x=x, norm_mean=mean, norm_std=std))
    return tuple(out)


class BatchIterator:
    """Shuffled mini-batches; one epoch yields every index exactly once."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0, drop_last=False):
        if batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.drop_last = drop_last

    def order(self, epoch: int) -> np.ndarray:
        return Rng(self.seed, "shuffle").child(epoch).permutation(len(self.dataset))

    def epoch(self, epoch: int):
        idx = self.order(epoch)
        stop = len(idx) - len(idx) % self.batch_size if self.drop_last else len(idx)
        for lo in range(0, stop, self.batch_size):
            b = idx[lo:lo + self.batch_size]
            yield self.dataset.x[b], self.dataset.y[b]

    def __len__(self):
        n = len(self.dataset)
        return n // self.batch_size if self.drop_last else -(-n // self.batch_size)


# -- internal cache format -------------------------------------------------
# magic | u32 header length | JSON header | float64 LE features | float64 LE labels

def dumps_dataset(ds: Dataset) -> bytes:
    header = {
        "n": len(ds), "dim": ds.dim, "num_classes": ds.num_classes, "channels": ds.channels,
        "split": ds.split, "source": ds.source, "seed": ds.seed,
        "norm_mean": None if ds.norm_mean is None else [float(v) for v in ds.norm_mean],
        "norm_std": None if ds.norm_std is None else [float(v) for v in ds.norm_std],
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = ds.x.astype("<f8").tobytes() + ds.y.astype("<f8").tobytes()
    return CACHE_MAGIC + struct.pack("<I", len(hdr)) + hdr + blob


def loads_dataset(raw: bytes) -> Dataset:
    if raw[:8] != CACHE_MAGIC:
        raise FormatError("not a dataset cache file (bad magic)")
    if len(raw) < 12:
        raise FormatError("dataset cache truncated inside the header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        h = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise FormatError(f"corrupt dataset cache header: {exc}") from None
    n, dim = h["n"], h["dim"]
    body = raw[12 + hlen:]
    if len(body) != 8 * n * (dim + 1):
        raise FormatError(f"dataset cache body is {len(body)} bytes, expected {8 * n * (dim + 1)}")
    x = np.frombuffer(body, "<f8", n * dim).reshape(n, dim).astype(np.float64)
    y = np.frombuffer(body, "<f8", n, offset=8 * n * dim).astype(np.int64)

    def arr(v):
        return None if v is None else np.asarray(v, dtype=np.float64)

    return Dataset(x, y, h["num_classes"], split=h["split"], source=h["source"],
                   channels=h["channels"], norm_mean=arr(h["norm_mean"]),
                   norm_std=arr(h["norm_std"]), seed=h["seed"])


def save_dataset(ds: Dataset, path) -> None:
    atomic_write(path, dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())
