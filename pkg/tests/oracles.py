"""Reference computations used as independent checks in the tests.

Nothing here calls the code paths under test except as a black-box scalar
function (finite differences).
"""

import numpy as np


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def loop_sqnorm(v):
    return sum(float(x) * float(x) for x in np.ravel(v))


def loop_matvec(M, v):
    rows, cols = M.shape
    return np.array([sum(M[i, j] * v[j] for j in range(cols)) for i in range(rows)])


def loop_collab_cost(X, Y, A, W, lam, gamma):
    """Scalar-loop evaluation of ||(Y - XA) W||^2 + lam ||A||^2 + gamma ||W||^2."""
    d, m = X.shape
    n = Y.shape[1]
    r = [0.0] * d
    for i in range(d):
        for j in range(n):
            xa = sum(X[i, k] * A[k, j] for k in range(m))
            r[i] += (Y[i, j] - xa) * W[j]
    return loop_sqnorm(r) + lam * loop_sqnorm(A) + gamma * loop_sqnorm(W)


def dense_eq6(X, Y, W, lam):
    """``[X^T X (W^T W) + lam I]^{-1} X^T Y W W^T`` with an explicit inverse."""
    W = W.reshape(-1, 1)
    m = X.shape[1]
    M = X.T @ X * float(np.dot(np.ravel(W), np.ravel(W))) + lam * np.eye(m)
    return np.linalg.inv(M) @ X.T @ Y @ W @ W.T
