"""Labeled data container, CSV I/O, splitting and synthetic data.

Samples are stored as *columns* of a ``d x n`` feature matrix, which is the
layout every coding routine in this package works with.  The scikit-learn
style estimators in :mod:`collabrep.estimators` accept the usual
``(n_samples, n_features)`` layout and transpose on the way in.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DatasetError

__all__ = [
    "LabeledDataset",
    "SynthSpec",
    "load_csv",
    "save_csv",
    "split",
    "split_indices",
    "synth_gaussian",
    "normalize_samples",
]


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix with one integer class id per column.

    Parameters
    ----------
    features : ndarray of shape (d, n)
        One sample per column.
    labels : ndarray of shape (n,)
        Class ids in ``1..L``.
    class_names : tuple of str, optional
        Original label of each class id (``class_names[i - 1]`` for id ``i``).
        Defaults to the decimal ids themselves.
    """

    features: np.ndarray
    labels: np.ndarray
    class_names: tuple = field(default=None)

    def __post_init__(self):
        X = np.array(self.features, dtype=float, copy=True)
        y = np.asarray(self.labels)
        if X.ndim != 2:
            raise DatasetError(f"features must be 2-D (d x n), got shape {X.shape}")
        if X.shape[0] < 1:
            raise DatasetError("feature dimension d must be >= 1")
        if X.shape[1] < 1:
            raise DatasetError("dataset must contain at least one sample")
        if y.shape != (X.shape[1],):
            raise DatasetError(
                f"labels must have shape ({X.shape[1]},), got {y.shape}")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.mod(y, 1) == 0):
                raise DatasetError("labels must be integer class ids")
        y = y.astype(np.int64)
        bad = np.argwhere(~np.isfinite(X))
        if bad.size:
            r, c = bad[0]
            raise DatasetError("non-finite feature value", row=int(c) + 1, column=int(r))

        n_classes = int(y.max()) if self.class_names is None else len(self.class_names)
        if y.min() < 1 or y.max() > n_classes:
            raise DatasetError(f"labels must lie in 1..{n_classes}")
        counts = np.bincount(y, minlength=n_classes + 1)[1:]
        if np.any(counts == 0):
            empty = int(np.flatnonzero(counts == 0)[0]) + 1
            raise DatasetError(f"class {empty} has no samples")

        names = self.class_names
        if names is None:
            names = tuple(str(i) for i in range(1, n_classes + 1))
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_names", tuple(str(s) for s in names))

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    @property
    def n_samples(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def class_index(self) -> list:
        """Column indices of each class, in column order (class ``i`` at ``[i - 1]``)."""
        return [np.flatnonzero(self.labels == i) for i in range(1, self.n_classes + 1)]

    @property
    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes + 1)[1:]

    def class_block(self, i: int) -> np.ndarray:
        """Columns of class ``i`` (1-based), i.e. ``X_i``."""
        return self.features[:, self.labels == i]

    def subset(self, columns) -> "LabeledDataset":
        columns = np.asarray(columns, dtype=np.int64)
        return LabeledDataset(self.features[:, columns], self.labels[columns],
                              self.class_names)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the isotropic Gaussian-cluster generator."""

    num_classes: int
    dim: int
    samples_per_class: int
    class_separation: float
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if not self.class_separation >= 0:
            raise ValueError("class_separation must be >= 0")


def load_csv(path, label_column: str = "label") -> LabeledDataset:
    """Read a CSV file with a header row; every non-label column is a feature.

    Rows become columns of the returned feature matrix, in file order.  Labels
    are remapped to ``1..L`` by first appearance; the original values are kept
    in ``class_names``.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DatasetError(f"label column {label_column!r} not found in header")
        label_pos = header.index(label_column)
        feat_pos = [k for k in range(len(header)) if k != label_pos]
        if not feat_pos:
            raise DatasetError("no feature columns (d >= 1 required)")

        names: dict = {}
        labels, rows = [], []
        for rownum, rec in enumerate(reader, start=1):
            if not rec or all(not s.strip() for s in rec):
                continue
            if len(rec) != len(header):
                raise DatasetError(
                    f"expected {len(header)} fields, found {len(rec)}", row=rownum)
            lab = rec[label_pos].strip()
            if lab == "":
                raise DatasetError("empty label", row=rownum, column=label_column)
            values = []
            for k in feat_pos:
                cell = rec[k].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise DatasetError(f"non-numeric value {cell!r}",
                                       row=rownum, column=header[k]) from None
                if not np.isfinite(v):
                    raise DatasetError(f"non-finite value {cell!r}",
                                       row=rownum, column=header[k])
                values.append(v)
            labels.append(names.setdefault(lab, len(names) + 1))
            rows.append(values)

    if not rows:
        raise DatasetError(f"{path} contains no data rows")
    X = np.array(rows, dtype=float).T
    return LabeledDataset(X, np.array(labels, dtype=np.int64), tuple(names))


def save_csv(dataset: LabeledDataset, path, label_column: str = "label") -> None:
    """Write one sample per row; floats use the shortest round-trip repr."""
    if dataset.dim < 1:
        raise DatasetError("d >= 1 required")
    header = [label_column] + [f"x{k}" for k in range(1, dataset.dim + 1)]
    if label_column in header[1:]:
        raise DatasetError(f"label column {label_column!r} clashes with a feature name")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for j in range(dataset.n_samples):
            writer.writerow([dataset.class_names[dataset.labels[j] - 1]]
                            + [repr(float(v)) for v in dataset.features[:, j]])
    os.replace(tmp, path)


def split(dataset: LabeledDataset, train_per_class: int, seed: int):
    """Draw ``train_per_class`` columns per class for training; the rest are test.

    Both halves keep the original column order and the full class list.
    """
    train_cols, test_cols = split_indices(dataset, train_per_class, seed)
    return dataset.subset(train_cols), dataset.subset(test_cols)


def split_indices(dataset: LabeledDataset, train_per_class: int, seed: int):
    """Sorted column indices ``(train, test)`` used by :func:`split`."""
    sizes = dataset.class_sizes
    if not 1 <= train_per_class < sizes.min():
        raise ValueError(
            f"train_per_class must be in [1, {sizes.min() - 1}], got {train_per_class}")
    rng = np.random.default_rng(seed)
    train_cols = []
    for cols in dataset.class_index:
        train_cols.append(rng.choice(cols, size=train_per_class, replace=False))
    train_cols = np.sort(np.concatenate(train_cols))
    mask = np.zeros(dataset.n_samples, dtype=bool)
    mask[train_cols] = True
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def synth_gaussian(spec: SynthSpec) -> LabeledDataset:
    """Isotropic unit-variance Gaussian clusters, one per class.

    Class means are random Gaussian vectors rescaled so that the closest
    pair sits exactly ``class_separation`` apart.  Columns are grouped by
    class.
    """
    rng = np.random.default_rng(spec.seed)
    L, d, m = spec.num_classes, spec.dim, spec.samples_per_class
    means = rng.standard_normal((L, d))
    if spec.class_separation > 0:
        gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
        closest = gaps[np.triu_indices(L, k=1)].min()
        means *= spec.class_separation / closest
    else:
        means[:] = 0.0
    X = np.repeat(means, m, axis=0).T + rng.standard_normal((d, L * m))
    labels = np.repeat(np.arange(1, L + 1), m)
    return LabeledDataset(X, labels)


def normalize_samples(dataset: LabeledDataset) -> LabeledDataset:
    norms = np.linalg.norm(dataset.features, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DatasetError(f"sample {int(zero[0])} has zero norm")
    return LabeledDataset(dataset.features / norms, dataset.labels, dataset.class_names)
