"""Dataset ingestion, synthetic benchmark generators and evaluation
utilities (cross-validation splits, kNN downstream task, PCA projection,
dimension-wise histograms)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NonFiniteInputError


@dataclass
class Standardization:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class Dataset:
    X: np.ndarray
    columns: list[str] | None = None
    standardization: Standardization | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def load_csv(path, has_header: bool = False) -> Dataset:
    """Parse a rectangular numeric CSV; the first line becomes column names
    when ``has_header`` is set."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigurationError(f"{path}: empty file")
    columns = None
    if has_header:
        columns = rows[0]
        rows = rows[1:]
        if not rows:
            raise ConfigurationError(f"{path}: header but no data rows")
    width = len(rows[0])
    data = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ConfigurationError(
                f"{path}: row {i + 1} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            try:
                data[i, j] = float(cell)
            except ValueError:
                raise ConfigurationError(
                    f"{path}: non-numeric cell at row {i + 1}, column {j + 1}: "
                    f"{cell!r}") from None
    if not np.all(np.isfinite(data)):
        raise NonFiniteInputError(f"{path}: non-finite values")
    return Dataset(data, columns=columns)


def save_csv(path, dataset: Dataset | np.ndarray):
    X = dataset.X if isinstance(dataset, Dataset) else np.atleast_2d(dataset)
    columns = dataset.columns if isinstance(dataset, Dataset) else None
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if columns is not None:
            writer.writerow(columns)
        for row in X:
            writer.writerow([repr(float(v)) for v in row])


def standardize(dataset: Dataset) -> Dataset:
    """Per-feature zero mean / unit std; the record enables the inverse."""
    X = dataset.X
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    if np.any(std == 0):
        bad = int(np.flatnonzero(std == 0)[0])
        raise ConfigurationError(f"column {bad} is constant")
    return Dataset((X - mean) / std, columns=dataset.columns,
                   standardization=Standardization(mean, std))


def unstandardize(dataset: Dataset) -> Dataset:
    if dataset.standardization is None:
        raise ConfigurationError("dataset carries no standardization record")
    rec = dataset.standardization
    return Dataset(dataset.X * rec.std + rec.mean, columns=dataset.columns)


def make_cv_splits(n: int, folds: int = 10, seed=0):
    """Independent seeded 90/10 splits, one per fold: (train_idx, test_idx)."""
    if n < folds:
        raise ConfigurationError("n too small for the requested folds")
    rng = np.random.default_rng(seed)
    n_test = max(1, round(n / 10))
    splits = []
    for _ in range(folds):
        perm = rng.permutation(n)
        splits.append((np.sort(perm[n_test:]), np.sort(perm[:n_test])))
    return splits


def gen_half_moons(n: int, noise_std: float = 0.1, seed=0) -> Dataset:
    """Two interleaved unit-radius semicircle arcs: the upper arc centered at
    the origin, the lower shifted by (1, -0.5); angles uniform on [0, pi]."""
    if n < 2:
        raise ConfigurationError("n must be >= 2")
    rng = np.random.default_rng(seed)
    n_upper = (n + 1) // 2
    n_lower = n - n_upper
    t_up = rng.uniform(0.0, math.pi, n_upper)
    t_lo = rng.uniform(0.0, math.pi, n_lower)
    upper = np.column_stack([np.cos(t_up), np.sin(t_up)])
    lower = np.column_stack([1.0 - np.cos(t_lo), 0.5 - np.sin(t_lo)])
    pts = np.vstack([upper, lower])
    if noise_std > 0:
        pts = pts + rng.normal(0.0, noise_std, size=pts.shape)
    return Dataset(pts)


def gen_pinwheel(n: int, arms: int = 5, radial_std: float = 0.3,
                 tangential_std: float = 0.05, warp: float = 0.25,
                 seed=0) -> Dataset:
    """Radial clusters at unit distance, one per arm, sheared by a rotation
    proportional to the point's radius."""
    if n < arms:
        raise ConfigurationError("need at least one point per arm")
    rng = np.random.default_rng(seed)
    arm = np.arange(n) % arms  # equal allocation keeps every arm populated
    r = 1.0 + radial_std * rng.standard_normal(n)
    tang = tangential_std * rng.standard_normal(n)
    theta = 2.0 * math.pi * arm / arms + warp * r
    x = r * np.cos(theta) - tang * np.sin(theta)
    y = r * np.sin(theta) + tang * np.cos(theta)
    return Dataset(np.column_stack([x, y]))


def gen_gaussians8(n: int, radius: float = 2.0, std: float = 0.2,
                   seed=0) -> Dataset:
    """Equal-weight mixture of 8 Gaussians on a circle."""
    if n < 8:
        raise ConfigurationError("n must be >= 8")
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, 8, size=n)
    angles = 2.0 * math.pi * comp / 8.0
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    return Dataset(centers + std * rng.standard_normal((n, 2)))


def knn_regress_mse(train: Dataset, test: Dataset, k: int = 3) -> float:
    """Mean squared error predicting the last column from the others with
    k-nearest-neighbour mean aggregation (Euclidean metric; distance ties
    broken toward the lower training-row index)."""
    Xtr, ytr = train.X[:, :-1], train.X[:, -1]
    Xte, yte = test.X[:, :-1], test.X[:, -1]
    if k > Xtr.shape[0]:
        raise ConfigurationError("k exceeds the training-set size")
    d2 = np.sum((Xte[:, None, :] - Xtr[None, :, :]) ** 2, axis=2)
    neighbours = np.argsort(d2, axis=1, kind="stable")[:, :k]
    preds = ytr[neighbours].mean(axis=1)
    return float(np.mean((preds - yte) ** 2))


def pca_project(dataset: Dataset, components: int = 2):
    """Mean-centered projection onto the top-variance orthonormal directions.

    Returns (projected (n, components), components (components, D)); each
    component's largest-magnitude entry is made positive.
    """
    X = dataset.X if isinstance(dataset, Dataset) else np.atleast_2d(dataset)
    n, d = X.shape
    if components > d:
        raise ConfigurationError("more components than dimensions")
    if n <= components:
        raise ConfigurationError("need more rows than components")
    centered = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:components]
    signs = np.sign(comps[np.arange(components),
                          np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    return centered @ comps.T, comps


def dimwise_histogram(dataset: Dataset, bins: int):
    """Equal-width per-dimension histograms over [min, max]; returns a list
    of (edges, counts)."""
    if bins < 1:
        raise ConfigurationError("bins must be >= 1")
    X = dataset.X if isinstance(dataset, Dataset) else np.atleast_2d(dataset)
    out = []
    for j in range(X.shape[1]):
        col = X[:, j]
        lo, hi = float(col.min()), float(col.max())
        if lo == hi:
            hi = lo + 1.0
        counts, edges = np.histogram(col, bins=bins, range=(lo, hi))
        out.append((edges, counts))
    return out
