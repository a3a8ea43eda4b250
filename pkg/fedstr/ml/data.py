"""Datasets, seeded splitting, CSV shards and synthetic generators."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from fedstr.errors import ModelError

TARGET_COLUMN = "y"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix (n x d) with regression targets or class indices."""

    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        targets = np.asarray(self.targets, dtype=np.float64)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ModelError("dataset needs a non-empty 2-D feature matrix")
        if targets.shape[0] != features.shape[0]:
            raise ModelError(
                f"row counts differ: {features.shape[0]} features vs {targets.shape[0]} targets"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, rows: np.ndarray) -> Dataset:
        return Dataset(self.features[rows], self.targets[rows])

    def to_csv(self) -> bytes:
        """Header of feature names plus ``y``; one row per sample."""
        if self.targets.ndim != 1:
            raise ModelError("CSV export supports a single target column")
        d = self.features.shape[1]
        header = ",".join([*(f"x{i}" for i in range(d)), TARGET_COLUMN])
        table = np.column_stack([self.features, self.targets])
        buffer = io.StringIO()
        np.savetxt(buffer, table, delimiter=",", fmt="%.17g", header=header, comments="")
        return buffer.getvalue().encode("utf-8")

    @classmethod
    def from_csv(cls, data: bytes | str) -> Dataset:
        """Parse a CSV whose header names the target column ``y``."""
        text = data.decode("utf-8") if isinstance(data, bytes) else data
        header, _, body = text.partition("\n")
        columns = [c.strip() for c in header.split(",")]
        if TARGET_COLUMN not in columns:
            raise ModelError(f"CSV header has no {TARGET_COLUMN!r} column")
        table = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
        if table.shape[1] != len(columns):
            raise ModelError("CSV rows do not match header width")
        target_idx = columns.index(TARGET_COLUMN)
        features = np.delete(table, target_idx, axis=1)
        return cls(features, table[:, target_idx])


def split_dataset(d: Dataset, n_parts: int, seed: int) -> list[Dataset]:
    """Seeded shuffle then contiguous near-equal parts (remainder to the first parts).

    Raises:
        ModelError: If ``n_parts`` is not in ``[1, len(d)]``.
    """
    if n_parts < 1 or n_parts > len(d):
        raise ModelError(f"cannot split {len(d)} rows into {n_parts} parts")
    order = np.random.default_rng(seed).permutation(len(d))
    return [d.take(rows) for rows in np.array_split(order, n_parts)]


def train_test_split(d: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``test_fraction`` of the rows (at least one) as the validation set."""
    if not 0.0 < test_fraction < 1.0:
        raise ModelError("test_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(d))
    n_test = max(1, int(round(len(d) * test_fraction)))
    if n_test >= len(d):
        raise ModelError("dataset too small for a hold-out split")
    return d.take(order[n_test:]), d.take(order[:n_test])


def make_linear(n: int, d: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """``y = x @ w + b + noise`` with standard-normal features and weights."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=d)
    b = rng.normal()
    x = rng.normal(size=(n, d))
    return Dataset(x, x @ w + b + noise * rng.normal(size=n))


def make_classification(n: int, d: int, classes: int = 2, seed: int = 0) -> Dataset:
    """Gaussian blobs around random class centers."""
    if classes < 2:
        raise ModelError("classification needs at least two classes")
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=2.0, size=(classes, d))
    labels = rng.integers(0, classes, size=n)
    return Dataset(centers[labels] + rng.normal(size=(n, d)), labels)
