"""Collaborative layer: represent partition-2 features through partition-1 features.

With ``X`` (d, m) the features of partition p1, ``Y`` (d, n) those of p2, the
layer keeps a reconstruction matrix ``A`` (m, n) and per-sample weights ``W``
(n,) and scores them with

    P(A, W, X) = ||(Y - X A) W||^2 + lam ||A||^2 + gamma ||W||^2

where ``(Y - X A) W`` is a single d-vector (the weighted sum of per-sample
residuals).  Setting ``diag_weights`` switches the data term to the
column-weighted ``||(Y - X A) diag(W)||_F^2``.

All gradients below are *half* gradients: the factor 2 from differentiating
the squared norms is dropped and absorbed into step sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from cocokit import linalg_core
from cocokit.errors import DivergenceError

# p1 sizes above this use the SVD route when initializing A
FAST_INIT_THRESHOLD = 256
MIN_WEIGHT = 1e-6


@dataclass(frozen=True)
class PartitionPair:
    X: np.ndarray
    Y: np.ndarray
    labels_p1: np.ndarray | None = None
    labels_p2: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ValueError(f"X {X.shape} and Y {Y.shape} must share the feature dimension")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        for name, lab, size in (("labels_p1", self.labels_p1, X.shape[1]),
                                ("labels_p2", self.labels_p2, Y.shape[1])):
            if lab is None:
                continue
            lab = np.asarray(lab, dtype=np.int64)
            if lab.shape != (size,):
                raise ValueError(f"{name} has shape {lab.shape}, expected ({size},)")
            object.__setattr__(self, name, lab)
        if self.labels_p1 is not None and self.labels_p2 is not None:
            if set(self.labels_p1.tolist()) != set(self.labels_p2.tolist()):
                raise ValueError("both partitions must contain every class")


@dataclass(frozen=True)
class CollabState:
    A: np.ndarray
    W: np.ndarray
    lam: float
    gamma: float = 0.0
    diag_weights: bool = False

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        W = np.asarray(self.W, dtype=np.float64).reshape(-1)
        if A.ndim != 2 or A.shape[1] != W.shape[0]:
            raise ValueError(f"A {A.shape} must be m x n with W of length n, got W {W.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "W", W)


def _check(pp: PartitionPair, st: CollabState):
    m, n = pp.X.shape[1], pp.Y.shape[1]
    if st.A.shape != (m, n):
        raise ValueError(f"A has shape {st.A.shape}, expected ({m}, {n})")


def residual(pp: PartitionPair, st: CollabState) -> np.ndarray:
    """Per-sample reconstruction residuals ``Y - X A`` (d, n)."""
    _check(pp, st)
    return pp.Y - pp.X @ st.A


def collab_cost(pp: PartitionPair, st: CollabState) -> float:
    R = residual(pp, st)
    if st.diag_weights:
        data = float(np.sum((R * st.W) ** 2))
    else:
        rw = R @ st.W
        data = float(rw @ rw)
    return data + st.lam * float(np.sum(st.A**2)) + st.gamma * float(st.W @ st.W)


def init_weights(class_sizes_p2, labels_p2) -> np.ndarray:
    """Weight each p2 sample by its class size over the mean class size."""
    sizes = np.asarray(class_sizes_p2, dtype=np.float64)
    if sizes.ndim != 1 or sizes.size == 0 or np.any(sizes < 1):
        raise ValueError(f"every class needs at least one sample, got sizes {sizes.tolist()}")
    labels = np.asarray(labels_p2, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= sizes.size):
        raise ValueError("label outside the class-size table")
    return sizes[labels] / sizes.mean()


def init_A(pp: PartitionPair, W, lam: float, fast: bool | None = None) -> np.ndarray:
    """Least-squares start ``[X^T X (W^T W) + lam I]^{-1} X^T Y W W^T``.

    ``W^T W`` is a scalar, so this is a ridge-Gram solve with scale
    ``s = W^T W`` against the rank-one right-hand side ``(X^T Y W) W^T``.
    ``fast`` forces a solver route; by default the SVD route is used when p1
    has more than ``FAST_INIT_THRESHOLD`` samples.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    W = np.asarray(W, dtype=np.float64).reshape(-1)
    if W.shape[0] != pp.Y.shape[1]:
        raise ValueError(f"W has length {W.shape[0]}, expected {pp.Y.shape[1]}")
    s = float(W @ W)
    B = np.outer(pp.X.T @ (pp.Y @ W), W)
    if fast is None:
        fast = pp.X.shape[1] > FAST_INIT_THRESHOLD
    if s == 0:
        return B / lam
    solve = linalg_core.ridge_gram_inverse_apply_fast if fast else linalg_core.ridge_gram_inverse_apply
    return solve(pp.X, s, lam, B)


def init_A_columnwise(pp: PartitionPair, W, lam: float) -> np.ndarray:
    """Exact minimizer over ``A`` of the column-weighted cost.

    Column ``i`` solves ``(w_i^2 X^T X + lam I) a_i = w_i^2 X^T y_i``; one thin
    SVD of ``X`` serves all columns.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    W = np.asarray(W, dtype=np.float64).reshape(-1)
    svd = linalg_core.thin_svd(pp.X)
    w2 = W**2
    # V diag(w2 S / (w2 S^2 + lam)) U^T y, per column
    proj = svd.U.T @ pp.Y
    coef = (w2[None, :] * svd.S[:, None]) / (w2[None, :] * svd.S[:, None] ** 2 + lam)
    return svd.V @ (coef * proj)


def grad_W(pp: PartitionPair, st: CollabState) -> np.ndarray:
    """``(Y - XA)^T (Y - XA) W + gamma W``."""
    R = residual(pp, st)
    if st.diag_weights:
        data = np.einsum("ij,ij->j", R, R) * st.W
    else:
        data = R.T @ (R @ st.W)
    return data + st.gamma * st.W


def _weighted_residual(pp, st):
    """``(Y - XA) W W^T`` for the mixed cost, ``R diag(W^2)`` for the diagonal one."""
    R = residual(pp, st)
    if st.diag_weights:
        return R * st.W**2
    return np.outer(R @ st.W, st.W)


def grad_A(pp: PartitionPair, st: CollabState) -> np.ndarray:
    """``-X^T (Y - XA) W W^T + lam A``."""
    return -pp.X.T @ _weighted_residual(pp, st) + st.lam * st.A


def grad_X(pp: PartitionPair, st: CollabState) -> np.ndarray:
    """``-(Y - XA) W W^T A^T``: error signal sent back into the p1 features."""
    return -_weighted_residual(pp, st) @ st.A.T


def grad_Y(pp: PartitionPair, st: CollabState) -> np.ndarray:
    """``(Y - XA) W W^T``: error signal for the p2 features."""
    return _weighted_residual(pp, st)


def update_step(st: CollabState, grads, eta_W: float, eta_A: float) -> CollabState:
    """One gradient step on ``W`` and ``A``; ``grads`` is ``(gW, gA)``.

    ``W`` is clamped at ``MIN_WEIGHT`` so weights stay positive.  Either
    gradient may be ``None`` to leave that block untouched.
    """
    if not (eta_W > 0 and eta_A > 0):
        raise ValueError("step sizes must be > 0")
    gW, gA = grads
    W, A = st.W, st.A
    if gW is not None:
        if not np.all(np.isfinite(gW)):
            raise DivergenceError("non-finite gradient for W")
        W = np.maximum(W - eta_W * gW, MIN_WEIGHT)
    if gA is not None:
        if not np.all(np.isfinite(gA)):
            raise DivergenceError("non-finite gradient for A")
        A = A - eta_A * gA
    return replace(st, A=A, W=W)


def _backtrack(pp, st, grad, eta, max_halvings, which):
    base = collab_cost(pp, st)
    for _ in range(max_halvings + 1):
        grads = (grad, None) if which == "W" else (None, grad)
        trial = update_step(st, grads, eta, eta)
        if collab_cost(pp, trial) <= base:
            return trial, eta
        eta *= 0.5
    return st, 0.0


def exact_step(pp: PartitionPair, st: CollabState, grad, which: str) -> float:
    """Minimizing step length along ``-grad`` for one block.

    The cost is quadratic in ``W`` (A fixed) and in ``A`` (W fixed), so
    ``cost(. - t g) = cost - 2 t |g|^2 + t^2 q`` for the half-gradient ``g``
    and the curvature ``q`` computed here; the minimizer is ``|g|^2 / q``.
    """
    gg = float(np.vdot(grad, grad))
    if gg == 0.0:
        return 0.0
    if which == "W":
        R = residual(pp, st)
        fit = R * grad if st.diag_weights else R @ grad
        q = float(np.vdot(fit, fit)) + st.gamma * gg
    else:
        XG = pp.X @ grad
        fit = XG * st.W if st.diag_weights else XG @ st.W
        q = float(np.vdot(fit, fit)) + st.lam * gg
    return gg / q if q > 0 else 0.0


def descend(pp: PartitionPair, st: CollabState, eta_W: float | None = 1e-3,
            eta_A: float | None = 1e-3, max_halvings: int = 20) -> CollabState:
    """Update ``W`` (A, X fixed) then ``A`` (W, X fixed) with backtracking.

    A step size of ``None`` starts from the exact line-search step of
    :func:`exact_step`.  Each block step is halved until the cost does not
    increase; a block whose step still increases the cost after
    ``max_halvings`` halvings is skipped, so the cost sequence is
    non-increasing.
    """
    g = grad_W(pp, st)
    eta = exact_step(pp, st, g, "W") if eta_W is None else eta_W
    if eta > 0:
        st, _ = _backtrack(pp, st, g, eta, max_halvings, "W")
    g = grad_A(pp, st)
    eta = exact_step(pp, st, g, "A") if eta_A is None else eta_A
    if eta > 0:
        st, _ = _backtrack(pp, st, g, eta, max_halvings, "A")
    return st
