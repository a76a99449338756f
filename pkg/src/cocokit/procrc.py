"""Probabilistic CRC: CRC plus a class-consistency penalty.

The objective adds ``(gamma / K) * sum_k ||X alpha - X_k alpha_k||^2`` to the
CRC cost, pulling the full reconstruction toward each single-class
reconstruction.  Setting its gradient to zero gives the linear system

    [G + lam I + (gamma/K) sum_k (I - E_k) G (I - E_k)] alpha = X^T y

with ``G = X^T X`` and ``E_k`` the 0/1 selector of class-``k`` columns.  Entry
``(i, j)`` of the sum is ``G_ij`` times the number of classes owning neither
column, i.e. ``K - 1`` within a class and ``K - 2`` across classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from cocokit.crc import Dictionary, _check_lambda, _vec


@dataclass
class ProCrcModel:
    dictionary: Dictionary
    lam: float
    gamma: float = 0.0

    def __post_init__(self):
        _check_lambda(self.lam)
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        self._factor = None

    def system_matrix(self) -> np.ndarray:
        D = self.dictionary
        G = D.X.T @ D.X
        K = D.n_classes
        same = D.labels[:, None] == D.labels[None, :]
        multiplicity = np.where(same, K - 1, K - 2).astype(np.float64)
        M = G + (self.gamma / K) * (multiplicity * G)
        M[np.diag_indices_from(M)] += self.lam
        return M

    def encode(self, y) -> np.ndarray:
        return procrc_encode(self, y)

    def classify(self, y):
        return procrc_classify(self, y)


def procrc_cost(model: ProCrcModel, y, alpha) -> float:
    D = model.dictionary
    y = _vec(y, D.d, "y")
    alpha = _vec(alpha, D.n, "alpha")
    full = D.X @ alpha
    r = y - full
    cost = r @ r + model.lam * (alpha @ alpha)
    K = D.n_classes
    for lo, hi in D.class_ranges:
        diff = full - D.X[:, lo:hi] @ alpha[lo:hi]
        cost += model.gamma / K * (diff @ diff)
    return float(cost)


def procrc_encode(model: ProCrcModel, y) -> np.ndarray:
    """Unique minimizer of :func:`procrc_cost` (the system is SPD for lam > 0)."""
    D = model.dictionary
    y = _vec(y, D.d, "y")
    if model._factor is None:
        model._factor = linalg.cho_factor(model.system_matrix(), lower=True, check_finite=False)
    return linalg.cho_solve(model._factor, D.X.T @ y, check_finite=False)


def consistency_residuals(dictionary: Dictionary, alpha) -> np.ndarray:
    """``||X alpha - X_k alpha_k||^2`` per class; shape (c,) or (c, k)."""
    alpha = _vec(alpha, dictionary.n, "alpha")
    single = alpha.ndim == 1
    if single:
        alpha = alpha[:, None]
    full = dictionary.X @ alpha
    out = np.empty((dictionary.n_classes, alpha.shape[1]))
    for i, (lo, hi) in enumerate(dictionary.class_ranges):
        diff = full - dictionary.X[:, lo:hi] @ alpha[lo:hi]
        out[i] = np.einsum("ij,ij->j", diff, diff)
    return out[:, 0] if single else out


def procrc_classify(model: ProCrcModel, y):
    """Most likely class: smallest class-consistency residual, lowest id on ties."""
    res = consistency_residuals(model.dictionary, model.encode(y))
    pred = np.argmin(res, axis=0)
    return int(pred) if np.ndim(pred) == 0 else pred.astype(np.int64)
