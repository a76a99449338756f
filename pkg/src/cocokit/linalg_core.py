"""Dense ridge-Gram solvers shared by the CRC family and the collaborative head.

Every solver here computes ``(s * X.T @ X + lam * I)^{-1} @ B`` for a feature
matrix ``X`` of shape ``(d, m)``.  Two routes are provided:

- direct: form the ``m x m`` system and solve it with a Cholesky factorization.
- fast:   thin SVD of ``X`` plus the Woodbury identity.  Only the ``r x r``
          spectrum (``r = min(d, m)``) is inverted, so cost is linear in ``m``.

Matrices are plain float64 ``numpy`` arrays (C order).  Columns of ``X`` are
samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg


@dataclass(frozen=True)
class ThinSVD:
    """``M = U @ diag(S) @ V.T`` with ``U`` (d, r), ``S`` (r,), ``V`` (m, r)."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def as_mat(M, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array or raise ``ValueError``."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


def thin_svd(M) -> ThinSVD:
    """Thin SVD with singular values sorted descending."""
    M = as_mat(M)
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    return ThinSVD(U=U, S=S, V=Vt.T)


def _check_ridge_args(X, s, lam, B):
    X = as_mat(X, "X")
    B = np.asarray(B, dtype=np.float64)
    vector = B.ndim == 1
    if vector:
        B = B[:, None]
    B = as_mat(B, "B")
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    if not s > 0:
        raise ValueError(f"scale s must be > 0, got {s}")
    if B.shape[0] != X.shape[1]:
        raise ValueError(f"B has {B.shape[0]} rows, expected {X.shape[1]}")
    return X, float(s), float(lam), B, vector


def ridge_gram_inverse_apply(X, s, lam, B) -> np.ndarray:
    """Solve ``(s X^T X + lam I) R = B`` by forming the ``m x m`` system."""
    X, s, lam, B, vector = _check_ridge_args(X, s, lam, B)
    G = s * (X.T @ X)
    G[np.diag_indices_from(G)] += lam
    R = linalg.cho_solve(linalg.cho_factor(G, lower=True, check_finite=False), B,
                         check_finite=False)
    return R[:, 0] if vector else R


def ridge_gram_inverse_apply_fast(X, s, lam, B, svd: ThinSVD | None = None) -> np.ndarray:
    """Same contract as :func:`ridge_gram_inverse_apply`, via SVD + Woodbury.

    With ``X = U S V^T``, the inverse splits into the row space of ``X`` and its
    complement::

        V diag(1 / (s S^2 + lam)) V^T + (I - V V^T) / lam

    which equals ``1/lam - (1/lam^2) V (1/(s S^2) + I/lam)^{-1} V^T`` whenever all
    singular values are non-zero, but stays defined for rank-deficient ``X``.
    A precomputed ``svd`` of ``X`` may be passed to amortize repeated solves.
    """
    X, s, lam, B, vector = _check_ridge_args(X, s, lam, B)
    if svd is None:
        svd = thin_svd(X)
    V = svd.V
    VtB = V.T @ B
    shrink = 1.0 / (s * svd.S**2 + lam) - 1.0 / lam
    R = B / lam + V @ (shrink[:, None] * VtB)
    return R[:, 0] if vector else R


def ridge_residual(X, s, lam, B, R) -> float:
    """Relative Frobenius residual ``||(s X^T X + lam I) R - B|| / ||B||``."""
    X = np.asarray(X, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    lhs = s * (X.T @ (X @ R)) + lam * R
    denom = np.linalg.norm(B)
    return float(np.linalg.norm(lhs - B) / (denom if denom > 0 else 1.0))
