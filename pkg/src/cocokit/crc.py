"""Collaborative representation classifier (CRC).

A test feature ``y`` is coded over the whole training dictionary by ridge
regression and assigned to the class whose own columns reconstruct it best,
relative to the energy of that class's share of the code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from cocokit import linalg_core

# dictionaries wider than this use the SVD route for the ridge solve
FAST_SOLVE_THRESHOLD = 512


@dataclass(frozen=True)
class Dictionary:
    """Training features ``X`` (d, n) with columns grouped contiguously by class.

    Build with :meth:`from_samples` when the columns are not yet sorted.
    """

    X: np.ndarray
    labels: np.ndarray
    class_ranges: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        X = linalg_core.as_mat(self.X, "X")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != X.shape[1]:
            raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for {X.shape[1]} columns")
        if labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if np.any(np.diff(labels) < 0):
            raise ValueError("columns must be sorted by label; use Dictionary.from_samples")
        n_classes = int(labels.max()) + 1
        counts = np.bincount(labels, minlength=n_classes)
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0).tolist()
            raise ValueError(f"classes without columns: {missing}")
        ends = np.cumsum(counts)
        ranges = tuple((int(e - c), int(e)) for c, e in zip(counts, ends))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_ranges", ranges)

    @classmethod
    def from_samples(cls, features, labels) -> "Dictionary":
        """Stable-sort columns of ``features`` (d, n) by label."""
        labels = np.asarray(labels, dtype=np.int64)
        order = np.argsort(labels, kind="stable")
        return cls(np.asarray(features, dtype=np.float64)[:, order], labels[order])

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_ranges)

    def class_block(self, i: int) -> np.ndarray:
        lo, hi = self.class_ranges[i]
        return self.X[:, lo:hi]


def _vec(v, size: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != size:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {size}")
    return v


def _check_lambda(lam: float) -> float:
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    return float(lam)


def crc_cost(dictionary: Dictionary, y, alpha, lam: float) -> float:
    """``||y - X alpha||^2 + lam ||alpha||^2``."""
    y = _vec(y, dictionary.d, "y")
    alpha = _vec(alpha, dictionary.n, "alpha")
    r = y - dictionary.X @ alpha
    return float(r @ r + lam * (alpha @ alpha))


def crc_encode(dictionary: Dictionary, y, lam: float) -> np.ndarray:
    """Closed-form minimizer ``(X^T X + lam I)^{-1} X^T y``.

    ``y`` may be a single vector (d,) or a matrix (d, k) of stacked queries.
    """
    lam = _check_lambda(lam)
    y = _vec(y, dictionary.d, "y")
    rhs = dictionary.X.T @ y
    if dictionary.n > FAST_SOLVE_THRESHOLD:
        return linalg_core.ridge_gram_inverse_apply_fast(dictionary.X, 1.0, lam, rhs)
    return linalg_core.ridge_gram_inverse_apply(dictionary.X, 1.0, lam, rhs)


def class_residuals(dictionary: Dictionary, y, alpha) -> np.ndarray:
    """Per-class ``||y - X_i alpha_i||^2 / ||alpha_i||^2``.

    Classes whose code block is exactly zero get ``+inf``.  Accepts a single
    query (returns shape (c,)) or stacked queries (d, k) with codes (n, k)
    (returns shape (c, k)).
    """
    y = _vec(y, dictionary.d, "y")
    alpha = _vec(alpha, dictionary.n, "alpha")
    single = y.ndim == 1
    if single:
        y, alpha = y[:, None], alpha[:, None]
    out = np.empty((dictionary.n_classes, y.shape[1]))
    for i, (lo, hi) in enumerate(dictionary.class_ranges):
        a = alpha[lo:hi]
        r = y - dictionary.X[:, lo:hi] @ a
        num = np.einsum("ij,ij->j", r, r)
        den = np.einsum("ij,ij->j", a, a)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[i] = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return out[:, 0] if single else out


@dataclass
class CrcModel:
    dictionary: Dictionary
    lam: float

    def __post_init__(self):
        _check_lambda(self.lam)

    def encode(self, y) -> np.ndarray:
        return crc_encode(self.dictionary, y, self.lam)

    def classify(self, y):
        return crc_classify(self, y)


def crc_classify(model: CrcModel, y):
    """Class with the smallest residual; ties go to the lowest class id.

    Returns an ``int`` for one query, an int array for stacked queries (d, k).
    """
    alpha = model.encode(y)
    res = class_residuals(model.dictionary, y, alpha)
    # argmin returns the first minimum, which is the lowest class id
    pred = np.argmin(res, axis=0)
    return int(pred) if np.ndim(pred) == 0 else pred.astype(np.int64)


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    return float(np.mean(pred == labels)) if labels.size else 0.0


def tune_lambda(dictionary: Dictionary, val_features, val_labels, grid: Sequence[float],
                refine_steps: int = 20) -> float:
    """Pick the ridge weight maximizing validation accuracy.

    The grid is scanned first; the earliest best value wins ties.  A
    golden-section search over ``log(lam)`` then probes the bracket formed by
    that value's grid neighbours, and a probe replaces the incumbent only when
    it is strictly more accurate.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("empty lambda grid")
    for g in grid:
        _check_lambda(g)
    val_features = np.asarray(val_features, dtype=np.float64)
    val_labels = np.asarray(val_labels)
    if val_features.ndim != 2 or val_features.shape[1] == 0:
        raise ValueError("validation set is empty")

    # one SVD serves every probe
    svd = linalg_core.thin_svd(dictionary.X)
    rhs = dictionary.X.T @ val_features

    def score(lam):
        alpha = linalg_core.ridge_gram_inverse_apply_fast(dictionary.X, 1.0, lam, rhs, svd=svd)
        pred = np.argmin(class_residuals(dictionary, val_features, alpha), axis=0)
        return accuracy(pred, val_labels)

    scores = [score(g) for g in grid]
    best_i = int(np.argmax(scores))
    best_lam, best_acc = grid[best_i], scores[best_i]
    if len(grid) == 1 or refine_steps <= 0:
        return best_lam

    ordered = sorted(grid)
    j = ordered.index(best_lam)
    lo = math.log(ordered[max(j - 1, 0)])
    hi = math.log(ordered[min(j + 1, len(ordered) - 1)])
    if hi <= lo:
        return best_lam

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    e = a + inv_phi * (b - a)
    fc, fe = score(math.exp(c)), score(math.exp(e))
    for _ in range(refine_steps):
        for x, fx in ((c, fc), (e, fe)):
            if fx > best_acc:
                best_lam, best_acc = math.exp(x), fx
        if fc >= fe:
            b, e, fe = e, c, fc
            c = b - inv_phi * (b - a)
            fc = score(math.exp(c))
        else:
            a, c, fc = c, e, fe
            e = a + inv_phi * (b - a)
            fe = score(math.exp(e))
    for x, fx in ((c, fc), (e, fe)):
        if fx > best_acc:
            best_lam, best_acc = math.exp(x), fx
    return best_lam
