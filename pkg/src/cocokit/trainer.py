"""Training loops for the softmax baselines, the cascades, and the collaborative net.

Every run has up to two stages:

1. pretraining: the feature net plus a softmax head, trained with cross-entropy
   for ``pretrain_epochs`` epochs;
2. fine-tuning for ``max_epochs`` epochs, which depends on the mode:

   - ``softmax_baseline``: keep training the softmax head and the net.
   - ``cascade_crc`` / ``cascade_procrc``: same as the baseline, then freeze
     the net and fit CRC / ProCRC on its features.
   - ``coconet``: drop the softmax head and train the net through the
     collaborative layer; classify with CRC on the fine-tuned features.

Both stages use Adam starting at ``lr_initial`` and switch once to
``lr_reduced`` when the epoch loss stops changing.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from cocokit import checkpoint, collab_head, featnet
from cocokit.collab_head import CollabState, PartitionPair
from cocokit.crc import CrcModel, Dictionary, crc_classify, tune_lambda
from cocokit.data_eval.dataset import LabeledImageSet
from cocokit.errors import DivergenceError
from cocokit.procrc import ProCrcModel, procrc_classify

log = logging.getLogger(__name__)

MODES = ("softmax_baseline", "cascade_crc", "cascade_procrc", "coconet")
EPOCH_CAP = 1000
LOG_FIELDS = ("epoch", "phase", "cost", "accuracy", "lr")


@dataclass
class TrainConfig:
    mode: str = "coconet"
    arch: str = featnet.DEFAULT_ARCH
    image_size: int = 32
    lr_initial: float = 1e-3
    lr_reduced: float = 1e-4
    max_epochs: int = 1000
    pretrain_epochs: int = 0
    finetune_lr_scale: float = 1.0
    plateau_window: int = 10
    plateau_tol: float = 1e-4
    batch_size: int = 32
    lam: float = 1.0
    gamma: float = 0.0
    eta_W: float = 1e-3
    eta_A: float = 1e-3
    line_search: bool = True
    inner_steps: int = 1
    refit_A: bool = False
    diag_weights: bool = False
    enable_grad_Y: bool = False
    partition_fraction: float = 0.5
    crc_lambda_grid: tuple = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
    procrc_gamma: float = 1e-2
    divergence_factor: float = 1e3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if not 0 < self.partition_fraction < 1:
            raise ValueError("partition_fraction must lie in (0, 1)")
        if not 0 < self.lr_reduced < self.lr_initial:
            raise ValueError("need 0 < lr_reduced < lr_initial")
        for name in ("max_epochs", "pretrain_epochs"):
            if not 0 <= getattr(self, name) <= EPOCH_CAP:
                raise ValueError(f"{name} must lie in [0, {EPOCH_CAP}]")
        if not self.lam > 0:
            raise ValueError("lam must be > 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if not self.finetune_lr_scale > 0:
            raise ValueError("finetune_lr_scale must be > 0")
        self.crc_lambda_grid = tuple(float(g) for g in self.crc_lambda_grid)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Laptop-sized defaults used by the CLI experiments and the acceptance run.

        Besides shorter schedules this profile re-solves ``A`` every epoch and
        back-propagates through the reconstructed side as well; with only
        gradient steps on ``A`` the collaborative cost diverges on the
        synthetic data once Adam starts inflating the feature scale.
        """
        base = dict(pretrain_epochs=30, max_epochs=15, refit_A=True, enable_grad_Y=True)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["crc_lambda_grid"] = list(self.crc_lambda_grid)
        return d

    def to_manifest(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"


def _coerce(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    default = f.default
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{f.name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    return raw


def parse_manifest(text: str, base: dict | None = None) -> dict:
    """Parse ``key=value`` lines (``#`` comments allowed) into config overrides."""
    known = {f.name: f for f in fields(TrainConfig)}
    out = dict(base or {})
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value")
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        try:
            out[key] = _coerce(known[key], value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def load_config(path, **overrides) -> TrainConfig:
    values = parse_manifest(Path(path).read_text())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


# -- partitions & schedule -------------------------------------------------------

def split_partitions(labels, fraction: float = 0.5, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified random split into (p1, p2) index arrays.

    Each class puts ``round(fraction * n_c)`` samples in p1, clipped so both
    partitions get at least one sample of every class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    p1, p2 = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise ValueError(f"class {c} has {idx.size} sample(s); a split needs at least 2")
        idx = rng.permutation(idx)
        k = min(max(int(round(fraction * idx.size)), 1), idx.size - 1)
        p1.append(idx[:k])
        p2.append(idx[k:])
    return np.sort(np.concatenate(p1)), np.sort(np.concatenate(p2))


class PlateauSchedule:
    """``lr_initial`` until the loss changes by < ``tol`` (relative) over
    ``window`` epochs, then ``lr_reduced`` for the rest of the run.

    Both rates are multiplied by ``scale`` (the fine-tuning stage passes
    ``cfg.finetune_lr_scale``).
    """

    def __init__(self, cfg: TrainConfig, scale: float = 1.0):
        self.lr = cfg.lr_initial * scale
        self.reduced = cfg.lr_reduced * scale
        self.window = cfg.plateau_window
        self.tol = cfg.plateau_tol
        self.losses: list[float] = []
        self.fired_at: int | None = None

    def observe(self, loss: float) -> float:
        self.losses.append(loss)
        if self.fired_at is None and len(self.losses) > self.window:
            old = self.losses[-1 - self.window]
            if abs(loss - old) <= self.tol * max(abs(old), 1e-300):
                self.fired_at = len(self.losses)
                self.lr = self.reduced
        return self.lr


# -- model -------------------------------------------------------------------------

@dataclass
class TrainedModel:
    mode: str
    params: featnet.FeatNetParams
    head: featnet.FeatNetParams | None = None
    dictionary: Dictionary | None = None
    crc_lambda: float | None = None
    procrc_gamma: float | None = None
    collab: CollabState | None = None
    history: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def features(self, images) -> np.ndarray:
        return featnet.extract_features(self.params, images)

    def predict(self, images) -> np.ndarray:
        return infer(self, images)

    def save(self, path) -> None:
        meta, arrays = featnet.params_to_arrays(self.params, prefix="net.")
        meta = {"kind": "trained_model", "mode": self.mode, "net": meta, "config": self.config,
                "crc_lambda": self.crc_lambda, "procrc_gamma": self.procrc_gamma}
        if self.head is not None:
            hmeta, harr = featnet.params_to_arrays(self.head, prefix="head.")
            meta["head"] = hmeta
            arrays.update(harr)
        if self.dictionary is not None:
            arrays["dict.X"] = self.dictionary.X
            arrays["dict.labels"] = self.dictionary.labels
        if self.collab is not None:
            meta["collab"] = {"lam": self.collab.lam, "gamma": self.collab.gamma,
                              "diag_weights": self.collab.diag_weights}
            arrays["collab.A"] = self.collab.A
            arrays["collab.W"] = self.collab.W
        checkpoint.save(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        meta, arrays = checkpoint.load(path)
        if meta.get("kind") != "trained_model":
            raise ValueError(f"{path} is not a trained-model checkpoint")
        params = featnet.params_from_arrays(meta["net"], arrays, prefix="net.")
        head = featnet.params_from_arrays(meta["head"], arrays, prefix="head.") if "head" in meta else None
        dictionary = Dictionary(arrays["dict.X"], arrays["dict.labels"]) if "dict.X" in arrays else None
        collab = None
        if "collab" in meta:
            c = meta["collab"]
            collab = CollabState(arrays["collab.A"], arrays["collab.W"], c["lam"], c["gamma"],
                                 c["diag_weights"])
        return cls(meta["mode"], params, head, dictionary, meta["crc_lambda"], meta["procrc_gamma"],
                   collab, [], meta["config"])


def infer(model: TrainedModel, images) -> np.ndarray:
    """Class ids for a batch of images using the model's own test-time head."""
    feats = model.features(images)
    if model.mode == "softmax_baseline":
        logits = featnet.extract_features(model.head, feats.T)
        return np.argmax(logits, axis=0).astype(np.int64)
    if model.mode == "cascade_procrc":
        clf = ProCrcModel(model.dictionary, model.crc_lambda, model.procrc_gamma)
        return np.atleast_1d(procrc_classify(clf, feats))
    return np.atleast_1d(crc_classify(CrcModel(model.dictionary, model.crc_lambda), feats))


def write_loss_log(path, history) -> None:
    """Append rows to a ``epoch,phase,cost,accuracy,lr`` CSV (header on creation)."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})


# -- stages --------------------------------------------------------------------------

def _rng(cfg: TrainConfig, tag: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, tag])


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _check_divergence(cost: float, first: float, factor: float, phase: str, epoch: int):
    if not np.isfinite(cost):
        raise DivergenceError(f"{phase} epoch {epoch}: cost is {cost}")
    if cost > factor * max(first, 1e-12):
        raise DivergenceError(f"{phase} epoch {epoch}: cost {cost:.4g} exceeds "
                              f"{factor:g} x initial {first:.4g}")


def new_head(params: featnet.FeatNetParams, n_classes: int, seed: int) -> featnet.FeatNetParams:
    return featnet.init_params([featnet.LayerSpec("dense", n_classes)], (params.out_dim,), seed)


def train_softmax_stage(params, head, ds: LabeledImageSet, cfg: TrainConfig, epochs: int,
                        phase: str, rng: np.random.Generator, lr_scale: float = 1.0) -> list[dict]:
    """Cross-entropy training of ``params`` and ``head`` in place."""
    sched = PlateauSchedule(cfg, lr_scale)
    history, first = [], None
    for epoch in range(1, epochs + 1):
        lr = sched.lr
        total, correct = 0.0, 0
        for b in _batches(len(ds), cfg.batch_size, rng):
            feats, cache = featnet.forward(params, ds.images[b])
            logits, hcache = featnet.forward(head, feats.T)
            loss, dlogits = featnet.softmax_xent(logits, ds.labels[b])
            hgrads, dfeats = featnet.backward(head, hcache, dlogits, return_input_grad=True)
            grads = featnet.backward(params, cache, dfeats.T)
            featnet.adam_step(head, hgrads, lr)
            featnet.adam_step(params, grads, lr)
            total += loss * b.size
            correct += int(np.sum(np.argmax(logits, axis=0) == ds.labels[b]))
        cost = total / len(ds)
        first = cost if first is None else first
        _check_divergence(cost, first, cfg.divergence_factor, phase, epoch)
        history.append({"epoch": epoch, "phase": phase, "cost": cost,
                        "accuracy": 100.0 * correct / len(ds), "lr": lr})
        sched.observe(cost)
        log.debug("%s epoch %d loss %.5f acc %.1f lr %g", phase, epoch, cost,
                  history[-1]["accuracy"], lr)
    return history


def _reset_adam(params: featnet.FeatNetParams) -> None:
    params.m = [None if w is None else tuple(np.zeros_like(a) for a in w) for w in params.weights]
    params.v = [None if w is None else tuple(np.zeros_like(a) for a in w) for w in params.weights]
    params.step = 0


def _backprop_features(params, images, feat_grads, cfg, lr, rng):
    for b in _batches(images.shape[0], cfg.batch_size, rng):
        _, cache = featnet.forward(params, images[b])
        featnet.adam_step(params, featnet.backward(params, cache, feat_grads[:, b]), lr)


def train_collab_stage(params, ds: LabeledImageSet, cfg: TrainConfig, epochs: int,
                       rng: np.random.Generator, phase: str = "coconet"):
    """Fine-tune ``params`` in place through the collaborative layer.

    Per epoch: extract p1/p2 features, update W then A by backtracking
    descent, push the p1 feature gradient (and optionally the p2 one)
    through the net with Adam.  Returns ``(state, history)``.
    """
    idx1, idx2 = split_partitions(ds.labels, cfg.partition_fraction, cfg.seed)
    img1, img2 = ds.images[idx1], ds.images[idx2]
    lab1, lab2 = ds.labels[idx1], ds.labels[idx2]
    sizes2 = np.bincount(lab2, minlength=ds.n_classes)
    sched = PlateauSchedule(cfg, cfg.finetune_lr_scale)
    state, history, first = None, [], None
    for epoch in range(1, epochs + 1):
        lr = sched.lr
        pp = PartitionPair(featnet.extract_features(params, img1),
                           featnet.extract_features(params, img2), lab1, lab2)
        if state is None:
            W = collab_head.init_weights(sizes2[sizes2 > 0], _compact(lab2))
            state = CollabState(_fit_A(pp, W, cfg), W, cfg.lam, cfg.gamma, cfg.diag_weights)
            first = collab_head.collab_cost(pp, state)
        elif cfg.refit_A:
            state = dataclasses.replace(state, A=_fit_A(pp, state.W, cfg))
        for _ in range(cfg.inner_steps):
            if cfg.line_search:
                state = collab_head.descend(pp, state, None, None)
            else:
                state = collab_head.descend(pp, state, cfg.eta_W, cfg.eta_A)
        cost = collab_head.collab_cost(pp, state)
        _check_divergence(cost, first, cfg.divergence_factor, phase, epoch)
        gX = collab_head.grad_X(pp, state)
        gY = collab_head.grad_Y(pp, state) if cfg.enable_grad_Y else None
        _backprop_features(params, img1, gX, cfg, lr, rng)
        if gY is not None:
            _backprop_features(params, img2, gY, cfg, lr, rng)
        acc = _partition_accuracy(pp, cfg)
        history.append({"epoch": epoch, "phase": phase, "cost": cost, "accuracy": acc, "lr": lr})
        sched.observe(cost)
        log.debug("%s epoch %d cost %.6g acc %.1f lr %g", phase, epoch, cost, acc, lr)
    return state, history


def _fit_A(pp, W, cfg):
    if cfg.diag_weights:
        return collab_head.init_A_columnwise(pp, W, cfg.lam)
    return collab_head.init_A(pp, W, cfg.lam)


def _compact(labels):
    """Relabel to 0..k-1 preserving order (classes absent from the data drop out)."""
    _, inv = np.unique(labels, return_inverse=True)
    return inv


def _partition_accuracy(pp: PartitionPair, cfg: TrainConfig) -> float:
    """CRC accuracy of p2 features coded over p1 features; a progress signal only."""
    d = Dictionary.from_samples(pp.X, pp.labels_p1)
    pred = crc_classify(CrcModel(d, cfg.crc_lambda_grid[len(cfg.crc_lambda_grid) // 2]), pp.Y)
    return 100.0 * float(np.mean(np.atleast_1d(pred) == pp.labels_p2))


def fit_crc_head(params, ds: LabeledImageSet, cfg: TrainConfig) -> tuple[Dictionary, float]:
    """Dictionary of all training features plus a validated ridge weight.

    The ridge weight is tuned by coding one stratified half of the training
    features over the other half.
    """
    feats = featnet.extract_features(params, ds.images)
    a, b = split_partitions(ds.labels, 0.5, cfg.seed + 1)
    lam = tune_lambda(Dictionary.from_samples(feats[:, a], ds.labels[a]), feats[:, b],
                      ds.labels[b], cfg.crc_lambda_grid)
    return Dictionary.from_samples(feats, ds.labels), lam


# -- public entry points -----------------------------------------------------------

@dataclass
class Pretrained:
    """Output of the softmax pretraining stage, reusable across modes."""

    params: featnet.FeatNetParams
    head: featnet.FeatNetParams | None
    history: list[dict]

    def copy(self) -> "Pretrained":
        return Pretrained(self.params.copy(), None if self.head is None else self.head.copy(),
                          [dict(r) for r in self.history])


def pretrain(cfg: TrainConfig, ds: LabeledImageSet, params=None) -> Pretrained:
    """Softmax stage for ``cfg.pretrain_epochs`` (fresh head, optional warm net)."""
    if params is None:
        params = featnet.init_params(featnet.parse_arch(cfg.arch), ds.image_shape, _rng(cfg, 1))
    else:
        params = params.copy()
        _reset_adam(params)
    head = new_head(params, ds.n_classes, cfg.seed * 7919 + 2)
    history = train_softmax_stage(params, head, ds, cfg, cfg.pretrain_epochs, "pretrain", _rng(cfg, 3))
    return Pretrained(params, head, history)


def _start(cfg, ds, pretrained):
    if pretrained is None:
        pretrained = (pretrain(cfg, ds) if cfg.pretrain_epochs > 0 else
                      Pretrained(featnet.init_params(featnet.parse_arch(cfg.arch), ds.image_shape,
                                                     _rng(cfg, 1)), None, []))
    p = pretrained.copy()
    if p.params.input_shape != ds.image_shape:
        raise ValueError(f"network expects {p.params.input_shape} images, dataset has {ds.image_shape}")
    _reset_adam(p.params)
    return p


def finetune_softmax(cfg: TrainConfig, ds: LabeledImageSet,
                     pretrained: Pretrained | None = None) -> Pretrained:
    """The softmax fine-tuning stage shared by every baseline mode."""
    p = _start(cfg, ds, pretrained)
    head = p.head
    if head is None or head.shapes[-1] != (ds.n_classes,):
        head = new_head(p.params, ds.n_classes, cfg.seed * 7919 + 4)
    else:
        _reset_adam(head)
    history = p.history + train_softmax_stage(p.params, head, ds, cfg, cfg.max_epochs,
                                              "finetune", _rng(cfg, 5), cfg.finetune_lr_scale)
    return Pretrained(p.params, head, history)


def baseline_head(cfg: TrainConfig, ds: LabeledImageSet, tuned: Pretrained) -> TrainedModel:
    """Wrap a softmax-fine-tuned net as a model of mode ``cfg.mode``.

    Cascade modes freeze the net and fit CRC / ProCRC on its features.
    """
    tuned = tuned.copy()
    model = TrainedModel(cfg.mode, tuned.params, tuned.head, history=tuned.history,
                         config=cfg.to_dict())
    if cfg.mode != "softmax_baseline":
        model.head = None
        model.dictionary, model.crc_lambda = fit_crc_head(tuned.params, ds, cfg)
        if cfg.mode == "cascade_procrc":
            model.procrc_gamma = cfg.procrc_gamma
    return model


def train_baseline(cfg: TrainConfig, ds: LabeledImageSet, pretrained: Pretrained | None = None) -> TrainedModel:
    """Softmax fine-tuning; cascade modes then fit CRC / ProCRC on frozen features."""
    if cfg.mode == "coconet":
        raise ValueError("train_baseline does not handle coconet mode")
    return baseline_head(cfg, ds, finetune_softmax(cfg, ds, pretrained))


def train_coconet(cfg: TrainConfig, ds: LabeledImageSet, pretrained: Pretrained | None = None) -> TrainedModel:
    """Collaborative fine-tuning after optional softmax pretraining."""
    p = _start(cfg, ds, pretrained)
    state, hist = train_collab_stage(p.params, ds, cfg, cfg.max_epochs, _rng(cfg, 6))
    model = TrainedModel("coconet", p.params, None, history=p.history + hist, config=cfg.to_dict(),
                         collab=state)
    model.dictionary, model.crc_lambda = fit_crc_head(p.params, ds, cfg)
    return model


def train(cfg: TrainConfig, ds: LabeledImageSet, pretrained: Pretrained | None = None) -> TrainedModel:
    if cfg.mode == "coconet":
        return train_coconet(cfg, ds, pretrained)
    return train_baseline(cfg, ds, pretrained)


def pretrain_then_finetune(stages, cfg: TrainConfig) -> TrainedModel:
    """Train on each dataset in turn, carrying the feature net forward.

    Every stage but the last trains with softmax (each with a head sized to its
    own classes); the last stage runs ``cfg`` as :func:`train` would.
    """
    stages = list(stages)
    if not stages:
        raise ValueError("need at least one training stage")
    shape = stages[0].image_shape
    for s in stages[1:]:
        if s.image_shape != shape:
            raise ValueError(f"stage image shape {s.image_shape} differs from {shape}")
    params, history = None, []
    for i, ds in enumerate(stages[:-1]):
        stage_cfg = dataclasses.replace(cfg, pretrain_epochs=cfg.max_epochs)
        pre = pretrain(stage_cfg, ds, params)
        params = pre.params
        history += [{**r, "phase": f"stage{i + 1}"} for r in pre.history]
    if params is None:
        return train(cfg, stages[-1])
    final = stages[-1]
    pre = pretrain(cfg, final, params) if cfg.pretrain_epochs > 0 else Pretrained(params, None, [])
    model = train(cfg, final, pre)
    model.history = history + model.history
    return model
