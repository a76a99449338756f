"""Stratified folds and accuracy reports."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Split indices into ``k`` disjoint test folds, stratified by class.

    Each class is shuffled and dealt round-robin; the dealing position carries
    over between classes so fold sizes stay within one of each other too.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return [np.arange(labels.size)]
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    start = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise ValueError(f"class {c} has {idx.size} samples, fewer than k={k}")
        idx = rng.permutation(idx)
        for j, i in enumerate(idx):
            folds[(start + j) % k].append(int(i))
        start = (start + idx.size) % k
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def accuracy_percent(pred, labels) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty test set")
    return 100.0 * float(np.sum(pred == labels)) / labels.size


def evaluate(model, images, labels) -> float:
    """Accuracy (%) of ``model.predict`` on a labelled set."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty test set")
    return accuracy_percent(model.predict(images), labels)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    folds: list[float]
    mean: float
    std: float
    config_hash: str = ""
    label: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def row(self, width: int = 18) -> str:
        return f"{self.label:<{width}} {self.mean:5.1f} ± {self.std:4.1f}"


def aggregate(entries, config: dict | None = None, label: str = "") -> EvalReport:
    """Mean and sample (n - 1) standard deviation over per-fold accuracies."""
    acc = [float(a) for a in entries]
    if not acc:
        raise ValueError("no fold results to aggregate")
    for a in acc:
        if not 0.0 <= a <= 100.0:
            raise ValueError(f"accuracy {a} outside [0, 100]")
    std = float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0
    return EvalReport(acc, float(np.mean(acc)), std,
                      config_hash(config) if config is not None else "", label)
