"""Finite-difference checks for the collaborative-layer and feature-net gradients.

Errors are reported as ``||analytic - numeric|| / max(||analytic||, ||numeric||)``
over the whole gradient array.
"""

from __future__ import annotations

import numpy as np

from cocokit import collab_head, featnet
from cocokit.collab_head import CollabState, PartitionPair

COLLAB_GRADS = ("grad_W", "grad_A", "grad_X", "grad_Y")
SMALL_ARCH = "conv3x3:3,relu,maxpool2,flatten,dense:5"


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def collab_gradcheck(seed: int, sizes=(5, 7, 6), diag_weights: bool = False,
                     corrupt: str | None = None) -> dict[str, float]:
    """Check the four half-gradients on a random instance of the given ``(d, m, n)``.

    ``corrupt`` names a gradient to perturb before comparison (a negative control).
    """
    d, m, n = sizes
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((d, m)), rng.standard_normal((d, n))
    A, W = rng.standard_normal((m, n)), rng.random(n) + 0.5
    lam, gamma = rng.uniform(0.1, 2.0), rng.uniform(0.0, 1.0)

    def cost():
        return 0.5 * collab_head.collab_cost(PartitionPair(X, Y), CollabState(A, W, lam, gamma, diag_weights))

    pp = PartitionPair(X, Y)
    st = CollabState(A, W, lam, gamma, diag_weights)
    analytic = {"grad_W": collab_head.grad_W(pp, st), "grad_A": collab_head.grad_A(pp, st),
                "grad_X": collab_head.grad_X(pp, st), "grad_Y": collab_head.grad_Y(pp, st)}
    numeric = {"grad_W": numeric_grad(cost, W), "grad_A": numeric_grad(cost, A),
               "grad_X": numeric_grad(cost, X), "grad_Y": numeric_grad(cost, Y)}
    if corrupt is not None:
        analytic[corrupt] = analytic[corrupt] * 1.01 + 1e-3
    return {k: relative_error(analytic[k], numeric[k]) for k in COLLAB_GRADS}


def featnet_gradcheck(seed: int, arch: str = SMALL_ARCH, input_shape=(6, 6, 2), batch: int = 3,
                      corrupt: bool = False) -> float:
    """Check every parameter gradient of a small net for the loss ``sum(G * features)``.

    A random projection ``G`` is used rather than a plain sum so that no
    gradient cancels by symmetry.
    """
    rng = np.random.default_rng(seed)
    params = featnet.init_params(featnet.parse_arch(arch), input_shape, rng)
    params.weights = [None if w is None else (w[0], rng.standard_normal(w[1].shape) * 0.1)
                      for w in params.weights]
    images = rng.random((batch,) + tuple(input_shape))
    G = rng.standard_normal((params.out_dim, batch))

    _, cache = featnet.forward(params, images)
    grads = featnet.backward(params, cache, G)

    def loss():
        return float(np.sum(G * featnet.forward(params, images, keep_cache=False)[0]))

    worst = 0.0
    for i, w in enumerate(params.weights):
        if w is None:
            continue
        for j, arr in enumerate(w):
            num = numeric_grad(loss, arr)
            ana = grads[i][j] * (1.01 if corrupt else 1.0)
            worst = max(worst, relative_error(ana, num))
    return worst
