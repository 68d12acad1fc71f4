"""Dataset ingestion, stratified splitting and leave-some-out subset sampling."""

from __future__ import annotations

import gzip
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import rng

DIGITS_FEATURES = 64
DIGITS_CLASSES = 10


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str
    source_hash: str = ""

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ValueError("dataset needs at least one sample")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be a vector matching features")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.features[idx], self.labels[idx], self.name, self.source_hash)


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    test: np.ndarray
    seed: int


@dataclass(frozen=True)
class SubsetMask:
    """Boolean selection over the training set; ``kept`` marks the subset members."""

    kept: np.ndarray
    subset_id: int
    alpha: float

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.kept)


def bundled_digits_path() -> Path:
    """The copy of the UCI optdigits data shipped with scikit-learn."""
    import sklearn.datasets

    return Path(sklearn.datasets.__file__).parent / "data" / "digits.csv.gz"


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_digits(path: str | Path | None = None) -> Dataset:
    """Read an optdigits-style file: 64 pixel counts in 0..16 then the label, comma separated.

    Gzipped files are accepted. Features are divided by 16.
    """
    path = Path(path) if path is not None else bundled_digits_path()
    opener = gzip.open if path.suffix == ".gz" else open
    rows = []
    labels = []
    with opener(path, "rt") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != DIGITS_FEATURES + 1:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 65 fields, found {len(fields)}"
                )
            try:
                values = [int(f) for f in fields]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer field") from None
            for j, v in enumerate(values[:-1]):
                if not 0 <= v <= 16:
                    raise DataFormatError(
                        f"{path}:{lineno}: feature {j} value {fields[j]!r} outside 0..16"
                    )
            label = values[-1]
            if not 0 <= label < DIGITS_CLASSES:
                raise DataFormatError(f"{path}:{lineno}: label {fields[-1]!r} outside 0..9")
            rows.append(values[:-1])
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no samples")
    features = np.asarray(rows, dtype=np.float64) / 16.0
    return Dataset(features, np.asarray(labels, dtype=np.int64), "digits", file_sha256(path))


def synth_blobs(n: int, classes: int, dim: int, seed: int) -> Dataset:
    """Gaussian class clusters; sample i belongs to class ``i % classes``."""
    if not n >= classes >= 2:
        raise ValueError("need n >= classes >= 2")
    gen = rng(seed, "blobs")
    centers = gen.standard_normal((classes, dim))
    labels = np.arange(n, dtype=np.int64) % classes
    features = centers[labels] + 0.5 * gen.standard_normal((n, dim))
    digest = hashlib.sha256(f"blobs:{n}:{classes}:{dim}:{seed}".encode()).hexdigest()
    return Dataset(features, labels, "blobs", digest)


def stratified_split(d: Dataset, test_fraction: float, seed: int) -> SplitIndices:
    """Per-class shuffled split; the test count per class comes from largest-remainder rounding."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    classes, counts = np.unique(d.labels, return_counts=True)
    if np.any(counts < 2):
        bad = classes[counts < 2].tolist()
        raise ValueError(f"classes {bad} have fewer than 2 samples")
    exact = counts * test_fraction
    n_test = np.floor(exact).astype(int)
    total = int(round(len(d) * test_fraction))
    short = total - int(n_test.sum())
    order = np.argsort(-(exact - n_test), kind="stable")
    n_test[order[:short]] += 1
    n_test = np.clip(n_test, 1, counts - 1)

    gen = rng(seed, "split")
    train, test = [], []
    for c, k in zip(classes, n_test):
        idx = np.flatnonzero(d.labels == c)
        idx = idx[gen.permutation(idx.size)]
        test.append(idx[:k])
        train.append(idx[k:])
    return SplitIndices(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)), seed)


def sample_subsets(n_train: int, alpha: float, k: int, seed: int) -> list[SubsetMask]:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if k < 1:
        raise ValueError("k must be at least 1")
    size = math.floor(alpha * n_train)
    if size == 0:
        raise ValueError(f"floor(alpha * n_train) = 0 for alpha={alpha}, n_train={n_train}")
    masks = []
    for j in range(k):
        chosen = rng(seed, "subset", j).choice(n_train, size=size, replace=False)
        kept = np.zeros(n_train, dtype=bool)
        kept[chosen] = True
        masks.append(SubsetMask(kept, j, alpha))
    return masks
