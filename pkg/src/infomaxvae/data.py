"""Dataset ingestion and synthesis.

IDX parsing (the MNIST family container), binarization, subsetting,
shuffled minibatching, and a correlated-Gaussian generator whose mutual
information is known in closed form (the oracle for estimator tests).

IDX layout: big-endian u32 magic (2051 images / 2049 labels), big-endian
u32 dimension sizes, then the raw byte payload.  Pixels scale to [0,1]
by /255; images flatten row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class DataFormatError(ValueError):
    """Input bytes violate the IDX contract (magic, lengths)."""


@dataclass(frozen=True)
class Dataset:
    examples: np.ndarray  # count x input_dim, float64 in [0,1]
    labels: np.ndarray | None = None  # count, int class indices
    name: str = "unnamed"

    def __post_init__(self):
        ex = np.ascontiguousarray(self.examples, dtype=np.float64)
        if ex.ndim != 2:
            raise ValueError(f"examples must be 2-D, got shape {ex.shape}")
        if ex.size and (ex.min() < 0.0 or ex.max() > 1.0):
            raise ValueError("pixel values must lie in [0,1]")
        object.__setattr__(self, "examples", ex)
        if self.labels is not None:
            lab = np.ascontiguousarray(self.labels, dtype=np.int64)
            if lab.shape != (ex.shape[0],):
                raise ValueError(
                    f"labels shape {lab.shape} does not match {ex.shape[0]} examples")
            if lab.size and lab.min() < 0:
                raise ValueError("labels must be non-negative class indices")
            object.__setattr__(self, "labels", lab)

    @property
    def count(self) -> int:
        return self.examples.shape[0]

    @property
    def input_dim(self) -> int:
        return self.examples.shape[1]


def _read_header(blob: bytes, expected_magic: int, kind: str):
    if len(blob) < 4:
        raise DataFormatError(f"{kind} file too short for a magic number ({len(blob)} bytes)")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise DataFormatError(f"{kind} file has magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise DataFormatError(f"{kind} file truncated inside the dimension header")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    return dims, blob[header_len:]


def parse_idx(image_bytes: bytes, label_bytes: bytes | None = None,
              name: str = "idx") -> Dataset:
    dims, payload = _read_header(image_bytes, IMAGE_MAGIC, "image")
    count = dims[0]
    per_example = int(np.prod(dims[1:], dtype=np.int64)) if len(dims) > 1 else 1
    expected = count * per_example
    if len(payload) != expected:
        raise DataFormatError(
            f"image payload holds {len(payload)} bytes, header implies {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    examples = pixels.reshape(count, per_example)

    labels = None
    if label_bytes is not None:
        ldims, lpayload = _read_header(label_bytes, LABEL_MAGIC, "label")
        if ldims[0] != count:
            raise DataFormatError(
                f"label count {ldims[0]} does not match image count {count}")
        if len(lpayload) != ldims[0]:
            raise DataFormatError(
                f"label payload holds {len(lpayload)} bytes, header implies {ldims[0]}")
        labels = np.frombuffer(lpayload, dtype=np.uint8).astype(np.int64)
    return Dataset(examples, labels, name=name)


def load_idx_files(image_path, label_path=None, name: str | None = None) -> Dataset:
    with open(image_path, "rb") as fh:
        image_bytes = fh.read()
    label_bytes = None
    if label_path is not None:
        with open(label_path, "rb") as fh:
            label_bytes = fh.read()
    return parse_idx(image_bytes, label_bytes, name=name or str(image_path))


def binarize(dataset: Dataset, mode: str, seed: int = 0) -> Dataset:
    if mode == "threshold":
        pixels = (dataset.examples >= 0.5).astype(np.float64)
    elif mode == "stochastic":
        rng = np.random.default_rng(seed)
        pixels = (rng.random(dataset.examples.shape) < dataset.examples).astype(np.float64)
    else:
        raise ValueError(f"unknown binarize mode {mode!r}")
    return Dataset(pixels, dataset.labels, name=f"{dataset.name}-bin-{mode}")


def subset(dataset: Dataset, n: int, seed: int = 0, stratified: bool = False) -> Dataset:
    if n > dataset.count:
        raise ValueError(f"requested {n} examples from a dataset of {dataset.count}")
    if n == dataset.count and not stratified:
        return dataset
    rng = np.random.default_rng(seed)
    if stratified:
        if dataset.labels is None:
            raise ValueError("stratified subset requires labels")
        picks = []
        classes, counts = np.unique(dataset.labels, return_counts=True)
        # largest-remainder apportionment keeps proportions within one example
        quotas = counts * (n / dataset.count)
        base = np.floor(quotas).astype(int)
        remainder = n - base.sum()
        order = np.argsort(-(quotas - base))
        base[order[:remainder]] += 1
        for cls, take in zip(classes, base):
            idx = np.flatnonzero(dataset.labels == cls)
            picks.append(rng.choice(idx, size=take, replace=False))
        chosen = np.sort(np.concatenate(picks))
    else:
        chosen = np.sort(rng.choice(dataset.count, size=n, replace=False))
    labels = dataset.labels[chosen] if dataset.labels is not None else None
    return Dataset(dataset.examples[chosen], labels, name=f"{dataset.name}-sub{n}")


def holdout_split(dataset: Dataset, fraction: float = 0.1):
    """Last `fraction` of rows becomes the evaluation split, never shuffled."""
    n_eval = max(1, int(round(dataset.count * fraction)))
    n_train = dataset.count - n_eval
    if n_train < 2:
        raise ValueError(f"dataset of {dataset.count} is too small to split")
    train = Dataset(dataset.examples[:n_train],
                    None if dataset.labels is None else dataset.labels[:n_train],
                    name=f"{dataset.name}-train")
    heldout = Dataset(dataset.examples[n_train:],
                      None if dataset.labels is None else dataset.labels[n_train:],
                      name=f"{dataset.name}-heldout")
    return train, heldout


@dataclass
class BatchIterator:
    """Epoch-shuffled minibatches; short final batches are dropped."""

    dataset: Dataset
    batch_size: int
    rng: np.random.Generator
    epoch: int = field(default=0)
    _order: np.ndarray = field(default=None, repr=False)
    _cursor: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.batch_size > self.dataset.count:
            raise ValueError(
                f"batch size {self.batch_size} exceeds dataset size {self.dataset.count}")
        self._reshuffle()

    def _reshuffle(self):
        self._order = self.rng.permutation(self.dataset.count)
        self._cursor = 0

    def next_batch(self) -> np.ndarray:
        if self._cursor + self.batch_size > self.dataset.count:
            self.epoch += 1
            self._reshuffle()
        idx = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return self.dataset.examples[idx]


def synth_correlated_gaussian(n: int, rho: float, seed: int = 0):
    """Bivariate standard-normal pairs with correlation rho.

    Returns (x, z, mi) where mi = -0.5 ln(1 - rho^2) is the exact mutual
    information between the coordinates.
    """
    if not abs(rho) < 1:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1))
    noise = rng.standard_normal((n, 1))
    z = rho * x + np.sqrt(1.0 - rho * rho) * noise
    mi = -0.5 * np.log(1.0 - rho * rho)
    return x, z, mi
