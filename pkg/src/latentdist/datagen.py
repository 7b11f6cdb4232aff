"""Synthetic ambiguous classification data with exact class posteriors.

Classes are isotropic Gaussians around known centers, so the Bayes
posterior of every sample is available in closed form. Ambiguity comes
from "confusable" center pairs that sit closer together than the rest.

Class indices are 0-based throughout the package.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "SyntheticSpec",
    "Sample",
    "Dataset",
    "Split",
    "Batch",
    "generate",
    "make_centers",
    "class_posterior",
    "inject_noise",
    "sample_batch",
    "oracle_latent",
    "save_dataset",
    "load_dataset",
    "DatasetFormatError",
    "dataset_from_arrays",
]

_HEADER_TAG = "latentdist-dataset"


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a Gaussian-mixture dataset.

    ``class_centers`` may be given explicitly; otherwise centers are drawn
    from ``seed`` with pairwise distance ``separation`` and each pair in
    ``confusable_pairs`` pulled to ``confusable_distance``.
    ``spread`` is either one standard deviation or one per class.
    """

    num_classes: int = 4
    feature_dim: int = 16
    spread: float | tuple[float, ...] = 1.0
    samples_per_class: int = 400
    test_per_class: int = 100
    seed: int = 0
    class_centers: tuple[tuple[float, ...], ...] | None = None
    separation: float = 3.0
    confusable_pairs: tuple[tuple[int, int], ...] = ()
    confusable_distance: float = 1.5

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        spreads = np.atleast_1d(np.asarray(self.spread, dtype=float))
        if spreads.size not in (1, self.num_classes) or np.any(spreads <= 0):
            raise ValueError("spread must be positive, scalar or one per class")
        if self.samples_per_class < 1 or self.test_per_class < 0:
            raise ValueError("sample counts must be positive")
        for a, b in self.confusable_pairs:
            if not (0 <= a < self.num_classes and 0 <= b < self.num_classes) or a == b:
                raise ValueError(f"bad confusable pair {(a, b)}")
        if self.class_centers is not None:
            centers = np.asarray(self.class_centers, dtype=float)
            if centers.shape != (self.num_classes, self.feature_dim):
                raise ValueError("class_centers must be num_classes x feature_dim")
            _check_distinct(centers)

    @property
    def spreads(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.spread, dtype=float), (self.num_classes,)).copy()


def _check_distinct(centers: np.ndarray) -> None:
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, np.inf)
    if np.min(dist) <= 0:
        raise ValueError("class centers must be pairwise distinct")


class Sample(NamedTuple):
    features: np.ndarray
    annotation: int
    true_class: int
    true_posterior: np.ndarray
    flipped: bool


@dataclass
class Split:
    """Column-oriented storage for one split of a dataset."""

    X: np.ndarray
    y: np.ndarray
    true_class: np.ndarray
    posterior: np.ndarray | None = None
    flipped: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.X)
        if self.flipped is None:
            self.flipped = np.zeros(n, dtype=bool)
        if len(self.y) != n or len(self.true_class) != n or len(self.flipped) != n:
            raise ValueError("split columns have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.X)

    def sample(self, i: int) -> Sample:
        post = None if self.posterior is None else self.posterior[i]
        return Sample(self.X[i], int(self.y[i]), int(self.true_class[i]), post, bool(self.flipped[i]))

    def copy(self) -> "Split":
        return Split(
            self.X.copy(),
            self.y.copy(),
            self.true_class.copy(),
            None if self.posterior is None else self.posterior.copy(),
            self.flipped.copy(),
        )


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int
    seed: int = 0
    centers: np.ndarray | None = field(default=None, repr=False)

    @property
    def feature_dim(self) -> int:
        return self.train.X.shape[1]


@dataclass
class Batch:
    indices: np.ndarray
    X: np.ndarray
    y: np.ndarray
    class_index_sets: list[np.ndarray]

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(s) for s in self.class_index_sets])

    def __len__(self) -> int:
        return len(self.indices)


def make_centers(spec: SyntheticSpec) -> np.ndarray:
    if spec.class_centers is not None:
        return np.asarray(spec.class_centers, dtype=float)
    rng = np.random.default_rng([spec.seed, 0])
    C, d = spec.num_classes, spec.feature_dim
    # random orthonormal directions when d >= C give pairwise distance = separation
    if d >= C:
        basis, _ = np.linalg.qr(rng.standard_normal((d, C)))
        dirs = basis.T
    else:
        dirs = rng.standard_normal((C, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = dirs * (spec.separation / np.sqrt(2.0))
    for a, b in spec.confusable_pairs:
        mid = 0.5 * (centers[a] + centers[b])
        half = 0.5 * (centers[b] - centers[a])
        half *= (0.5 * spec.confusable_distance) / np.linalg.norm(half)
        centers[a], centers[b] = mid - half, mid + half
    _check_distinct(centers)
    return centers


def class_posterior(X: np.ndarray, centers: np.ndarray, spreads: np.ndarray) -> np.ndarray:
    """Exact Bayes posterior under equal priors and isotropic Gaussian classes."""
    X = np.atleast_2d(X)
    d = X.shape[1]
    sq = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    logp = -0.5 * sq / spreads**2 - d * np.log(spreads)
    return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))


def _draw(rng: np.random.Generator, centers, spreads, per_class: int):
    C, d = centers.shape
    X = np.concatenate([centers[k] + spreads[k] * rng.standard_normal((per_class, d)) for k in range(C)])
    y = np.repeat(np.arange(C), per_class)
    return X, y


def generate(spec: SyntheticSpec) -> Dataset:
    centers = make_centers(spec)
    spreads = spec.spreads
    rng = np.random.default_rng([spec.seed, 1])
    splits = []
    for per_class in (spec.samples_per_class, spec.test_per_class):
        X, y = _draw(rng, centers, spreads, per_class)
        post = class_posterior(X, centers, spreads) if len(X) else np.zeros((0, spec.num_classes))
        splits.append(Split(X, y, y.copy(), post))
    return Dataset(splits[0], splits[1], spec.num_classes, spec.seed, centers)


def inject_noise(dataset: Dataset, ratio: float, seed: int) -> Dataset:
    """Flip exactly floor(ratio * N) training labels to a uniformly chosen other class."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"noise ratio must lie in [0, 1], got {ratio}")
    train = dataset.train.copy()
    n = len(train)
    count = int(np.floor(ratio * n + 1e-9))
    rng = np.random.default_rng([seed, 2])
    chosen = rng.choice(n, size=count, replace=False)
    C = dataset.num_classes
    train.y[chosen] = (train.y[chosen] + rng.integers(1, C, size=count)) % C
    train.flipped = train.y != train.true_class
    return dataclasses.replace(dataset, train=train, test=dataset.test.copy())


def sample_batch(split: Split, size: int, num_classes: int, seed) -> Batch:
    """Stratified draw: one sample of every annotated class, the rest uniform without replacement.

    ``seed`` may be an int or a ``numpy.random.Generator`` (advanced in place).
    """
    if size < num_classes:
        raise ValueError(f"batch size {size} is smaller than the number of classes {num_classes}")
    if size > len(split):
        raise ValueError("batch size exceeds the split size")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    by_class = [np.flatnonzero(split.y == k) for k in range(num_classes)]
    for k, members in enumerate(by_class):
        if len(members) == 0:
            raise ValueError(f"class {k} has no annotated samples")
    guaranteed = np.array([rng.choice(members) for members in by_class])
    rest_pool = np.setdiff1d(np.arange(len(split)), guaranteed)
    rest = rng.choice(rest_pool, size=size - num_classes, replace=False)
    indices = rng.permutation(np.concatenate([guaranteed, rest]))
    y = split.y[indices]
    sets = [np.flatnonzero(y == k) for k in range(num_classes)]
    return Batch(indices, split.X[indices], y, sets)


def oracle_latent(sample: Sample) -> tuple[np.ndarray, bool]:
    """True distribution over the classes other than the annotation.

    Returns ``(probs, degenerate)``; a posterior with all mass on the
    annotation has no defined renormalisation and yields a uniform vector
    with ``degenerate=True``.
    """
    if sample.true_posterior is None:
        raise ValueError("sample carries no true posterior")
    post = np.asarray(sample.true_posterior, dtype=float)
    rest = np.delete(post, sample.annotation)
    total = rest.sum()
    if not total > 0:
        return np.full(len(rest), 1.0 / len(rest)), True
    return rest / total, False


# --------------------------------------------------------------------------
# text file format


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the line-oriented text format.

    Header: ``# latentdist-dataset C=<C> d=<d> n_train=<n> n_test=<m> seed=<s>``.
    Each following line is one sample (train rows first):
    d features, annotation, true_class, C posterior values, flipped (0/1).
    """
    C, d = dataset.num_classes, dataset.feature_dim
    lines = [f"# {_HEADER_TAG} C={C} d={d} n_train={len(dataset.train)} "
             f"n_test={len(dataset.test)} seed={dataset.seed}"]
    for split in (dataset.train, dataset.test):
        post = split.posterior if split.posterior is not None else np.full((len(split), C), np.nan)
        for i in range(len(split)):
            fields = [_fmt(v) for v in split.X[i]]
            fields += [str(int(split.y[i])), str(int(split.true_class[i]))]
            fields += [_fmt(v) for v in post[i]]
            fields.append("1" if split.flipped[i] else "0")
            lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(f"# {_HEADER_TAG}"):
        raise DatasetFormatError(f"{path}: missing dataset header")
    try:
        meta = dict(item.split("=", 1) for item in text[0].split()[2:])
        C, d = int(meta["C"]), int(meta["d"])
        n_train, n_test, seed = int(meta["n_train"]), int(meta["n_test"]), int(meta["seed"])
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: malformed header") from exc
    rows = text[1:]
    if len(rows) != n_train + n_test:
        raise DatasetFormatError(f"{path}: expected {n_train + n_test} samples, found {len(rows)}")
    width = d + 2 + C + 1
    X = np.empty((len(rows), d))
    y = np.empty(len(rows), dtype=int)
    true = np.empty(len(rows), dtype=int)
    post = np.empty((len(rows), C))
    flipped = np.empty(len(rows), dtype=bool)
    for i, line in enumerate(rows):
        parts = line.split()
        if len(parts) != width:
            raise DatasetFormatError(f"{path}:{i + 2}: expected {width} fields, found {len(parts)}")
        X[i] = [float(v) for v in parts[:d]]
        y[i], true[i] = int(parts[d]), int(parts[d + 1])
        post[i] = [float(v) for v in parts[d + 2:d + 2 + C]]
        flipped[i] = parts[-1] == "1"

    def split(sl: slice) -> Split:
        p = post[sl]
        return Split(X[sl], y[sl], true[sl], None if np.isnan(p).any() else p, flipped[sl])

    return Dataset(split(slice(0, n_train)), split(slice(n_train, None)), C, seed)


def dataset_from_arrays(X: np.ndarray, y: Sequence[int], num_classes: int) -> Dataset:
    """Wrap plain arrays (no posterior, no test split) for training."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if len(y) and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    empty = Split(np.zeros((0, X.shape[1])), np.zeros(0, dtype=int), np.zeros(0, dtype=int))
    return Dataset(Split(X, y, y.copy()), empty, num_classes)
