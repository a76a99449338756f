"""Small convolutional feature extractor with hand-written backprop and Adam.

Images are float64 arrays of shape ``(N, H, W, C)``.  The network is a plain
stack of layers:

    conv3x3(k)  3x3 kernels, stride 1, zero "same" padding, weights (3, 3, C_in, k)
    relu
    maxpool2    2x2 windows, stride 2 (spatial dims must be even)
    flatten     row-major over (H, W, C)
    dense(k)    weights (in, k)

:func:`forward` returns features as a ``(d, N)`` matrix, one column per image,
which is the layout the collaborative layer and CRC expect.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from cocokit import checkpoint
from cocokit.errors import DivergenceError, StaleCacheError

KINDS = ("conv3x3", "relu", "maxpool2", "flatten", "dense")
DEFAULT_ARCH = "conv3x3:8,relu,maxpool2,conv3x3:16,relu,maxpool2,flatten,dense:64"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv3x3", "dense") and not (self.units and self.units > 0):
            raise ValueError(f"{self.kind} needs a positive unit count")

    def __str__(self):
        return f"{self.kind}:{self.units}" if self.units else self.kind


def parse_arch(text: str) -> list[LayerSpec]:
    """Parse ``"conv3x3:8,relu,maxpool2,flatten,dense:64"``."""
    specs = []
    for tok in filter(None, (t.strip() for t in text.split(","))):
        kind, _, units = tok.partition(":")
        specs.append(LayerSpec(kind, int(units) if units else None))
    return specs


def format_arch(specs) -> str:
    return ",".join(str(s) for s in specs)


def _output_shapes(specs, input_shape):
    shapes = [tuple(input_shape)]
    shape = tuple(input_shape)
    for s in specs:
        if s.kind == "conv3x3":
            if len(shape) != 3:
                raise ValueError(f"conv3x3 needs an (H, W, C) input, got {shape}")
            shape = (shape[0], shape[1], s.units)
        elif s.kind == "maxpool2":
            if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
                raise ValueError(f"maxpool2 needs even spatial dims, got {shape}")
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif s.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif s.kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"dense needs a flat input, got {shape}; add flatten")
            shape = (s.units,)
        shapes.append(shape)
    return shapes


@dataclass
class FeatNetParams:
    """Layer weights plus Adam state.

    ``weights[i]`` is ``(W, b)`` for conv/dense layers and ``None`` otherwise.
    ``version`` increments on every parameter update and is used to reject
    caches produced by older parameters.
    """

    specs: list[LayerSpec]
    input_shape: tuple[int, ...]
    weights: list
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    version: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(x) for x in self.input_shape)
        self.shapes = _output_shapes(self.specs, self.input_shape)
        if not self.m:
            self.m = [None if w is None else tuple(np.zeros_like(a) for a in w) for w in self.weights]
            self.v = [None if w is None else tuple(np.zeros_like(a) for a in w) for w in self.weights]

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.shapes[-1]))

    def arrays(self):
        """Yield ``(name, array)`` for every trainable array, in layer order."""
        for i, w in enumerate(self.weights):
            if w is not None:
                yield f"{i}.W", w[0]
                yield f"{i}.b", w[1]

    def n_params(self) -> int:
        return sum(a.size for _, a in self.arrays())

    def copy(self) -> "FeatNetParams":
        dup = lambda lst: [None if t is None else tuple(a.copy() for a in t) for t in lst]
        return FeatNetParams(list(self.specs), self.input_shape, dup(self.weights),
                             dup(self.m), dup(self.v), self.step, self.version)


def init_params(specs, input_shape, seed: int | np.random.Generator = 0) -> FeatNetParams:
    """He-normal weights (variance 2 / fan_in), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    specs = list(specs)
    shapes = _output_shapes(specs, input_shape)
    weights = []
    for s, shp in zip(specs, shapes[:-1]):
        if s.kind == "conv3x3":
            fan_in = 9 * shp[2]
            W = rng.standard_normal((3, 3, shp[2], s.units)) * np.sqrt(2.0 / fan_in)
            weights.append((W, np.zeros(s.units)))
        elif s.kind == "dense":
            W = rng.standard_normal((shp[0], s.units)) * np.sqrt(2.0 / shp[0])
            weights.append((W, np.zeros(s.units)))
        else:
            weights.append(None)
    return FeatNetParams(specs, tuple(input_shape), weights)


# -- layer kernels ----------------------------------------------------------

def _im2col3(x):
    N, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((N, H, W, 3, 3, C))
    for i, j in itertools.product(range(3), range(3)):
        cols[:, :, :, i, j, :] = xp[:, i:i + H, j:j + W, :]
    return cols.reshape(N * H * W, 9 * C)


def _col2im3(dcols, shape):
    N, H, W, C = shape
    dcols = dcols.reshape(N, H, W, 3, 3, C)
    dxp = np.zeros((N, H + 2, W + 2, C))
    for i, j in itertools.product(range(3), range(3)):
        dxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :]


def _pool_windows(x):
    N, H, W, C = x.shape
    return (x.reshape(N, H // 2, 2, W // 2, 2, C)
             .transpose(0, 1, 3, 5, 2, 4)
             .reshape(N, H // 2, W // 2, C, 4))


def _unpool(g, idx, shape):
    N, H, W, C = shape
    win = np.zeros(g.shape + (4,))
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    return (win.reshape(N, H // 2, W // 2, C, 2, 2)
               .transpose(0, 1, 4, 2, 5, 3)
               .reshape(N, H, W, C))


# -- passes -----------------------------------------------------------------

@dataclass
class ActivationCache:
    entries: list
    params_id: int
    version: int
    consumed: bool = False


def _check_input(params, images):
    x = np.asarray(images, dtype=np.float64)
    if x.shape[1:] != params.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match network input {params.input_shape}")
    return x


def forward(params: FeatNetParams, images, keep_cache: bool = True):
    """Run the stack on a batch; returns ``(features (d, N), cache)``.

    With ``keep_cache=False`` the cache is ``None`` and intermediate buffers are
    dropped as soon as possible.
    """
    x = _check_input(params, images)
    entries = []
    for spec, w in zip(params.specs, params.weights):
        if spec.kind == "conv3x3":
            cols = _im2col3(x)
            shape = x.shape
            W, b = w
            x = (cols @ W.reshape(-1, spec.units) + b).reshape(shape[:3] + (spec.units,))
            entry = (cols, shape)
        elif spec.kind == "relu":
            mask = x > 0
            x = x * mask
            entry = mask
        elif spec.kind == "maxpool2":
            win = _pool_windows(x)
            idx = np.argmax(win, axis=-1)
            entry = (idx, x.shape)
            x = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        elif spec.kind == "flatten":
            entry = x.shape
            x = x.reshape(x.shape[0], -1)
        else:
            entry = x
            W, b = w
            x = x @ W + b
        entries.append(entry if keep_cache else None)
    feats = np.ascontiguousarray(x.reshape(x.shape[0], -1).T)
    cache = ActivationCache(entries, id(params), params.version) if keep_cache else None
    return feats, cache


def extract_features(params: FeatNetParams, images, batch_size: int = 128) -> np.ndarray:
    """Forward without caching, in chunks to bound memory; returns (d, N)."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        return np.zeros((params.out_dim, 0))
    parts = [forward(params, images[i:i + batch_size], keep_cache=False)[0]
             for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(parts, axis=1)


def backward(params: FeatNetParams, cache: ActivationCache, feature_grads, return_input_grad=False):
    """Gradients of a loss w.r.t. every parameter given ``dL/dfeatures`` (d, N).

    Returns a list aligned with ``params.weights`` of ``(dW, db)`` or ``None``.
    With ``return_input_grad`` also returns ``dL/dinput``.
    """
    if cache is None or cache.consumed:
        raise StaleCacheError("activation cache missing or already consumed")
    if cache.params_id != id(params) or cache.version != params.version:
        raise StaleCacheError("activation cache was produced by different parameters")
    cache.consumed = True
    g = np.asarray(feature_grads, dtype=np.float64).T
    grads = [None] * len(params.specs)
    for i in range(len(params.specs) - 1, -1, -1):
        spec, entry = params.specs[i], cache.entries[i]
        if spec.kind == "conv3x3":
            cols, shape = entry
            W, _ = params.weights[i]
            gf = g.reshape(-1, spec.units)
            grads[i] = ((cols.T @ gf).reshape(W.shape), gf.sum(axis=0))
            if i > 0 or return_input_grad:
                g = _col2im3(gf @ W.reshape(-1, spec.units).T, shape)
        elif spec.kind == "relu":
            g = g * entry
        elif spec.kind == "maxpool2":
            idx, shape = entry
            g = _unpool(g, idx, shape)
        elif spec.kind == "flatten":
            g = g.reshape(entry)
        else:
            W, _ = params.weights[i]
            grads[i] = (entry.T @ g, g.sum(axis=0))
            g = g @ W.T
    return (grads, g) if return_input_grad else grads


def adam_step(params: FeatNetParams, grads, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> FeatNetParams:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    for gr in grads:
        if gr is not None and not all(np.all(np.isfinite(a)) for a in gr):
            raise DivergenceError("non-finite gradient reached the optimizer")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, gr in enumerate(grads):
        if gr is None:
            continue
        new_w, new_m, new_v = [], [], []
        for w, m, v, g in zip(params.weights[i], params.m[i], params.v[i], gr):
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            new_w.append(w - lr * (m / c1) / (np.sqrt(v / c2) + eps))
            new_m.append(m)
            new_v.append(v)
        params.weights[i] = tuple(new_w)
        params.m[i] = tuple(new_m)
        params.v[i] = tuple(new_v)
    params.version += 1
    return params


# -- softmax head (baseline / pretraining only) -------------------------------

def softmax_xent(logits, labels):
    """Mean cross-entropy of ``logits`` (c, N); returns ``(loss, dloss/dlogits)``."""
    z = logits - logits.max(axis=0, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=0, keepdims=True)
    N = logits.shape[1]
    cols = np.arange(N)
    loss = -float(np.mean(np.log(p[labels, cols] + 1e-300)))
    grad = p.copy()
    grad[labels, cols] -= 1.0
    return loss, grad / N


# -- checkpoints --------------------------------------------------------------

def params_to_arrays(params: FeatNetParams, prefix: str = "") -> tuple[dict, dict]:
    meta = {"arch": format_arch(params.specs), "input_shape": list(params.input_shape),
            "step": params.step}
    arrays = {}
    for i, w in enumerate(params.weights):
        if w is None:
            continue
        for tag, group in (("", params.weights), ("m.", params.m), ("v.", params.v)):
            arrays[f"{prefix}{tag}{i}.W"] = group[i][0]
            arrays[f"{prefix}{tag}{i}.b"] = group[i][1]
    return meta, arrays


def params_from_arrays(meta: dict, arrays: dict, prefix: str = "") -> FeatNetParams:
    specs = parse_arch(meta["arch"])
    weights, m, v = [], [], []
    for i, s in enumerate(specs):
        if s.kind in ("conv3x3", "dense"):
            get = lambda tag: (arrays[f"{prefix}{tag}{i}.W"], arrays[f"{prefix}{tag}{i}.b"])
            weights.append(get(""))
            m.append(get("m."))
            v.append(get("v."))
        else:
            weights.append(None)
            m.append(None)
            v.append(None)
    return FeatNetParams(specs, tuple(meta["input_shape"]), weights, m, v, int(meta["step"]))


def save_params(path, params: FeatNetParams) -> None:
    meta, arrays = params_to_arrays(params)
    checkpoint.save(path, {"kind": "featnet", **meta}, arrays)


def load_params(path) -> FeatNetParams:
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != "featnet":
        raise ValueError(f"{path} is not a featnet checkpoint")
    return params_from_arrays(meta, arrays)
