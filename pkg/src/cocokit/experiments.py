"""Cross-validated runs and the ablation comparison across training modes."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from cocokit import trainer
from cocokit.data_eval import EvalReport, aggregate, evaluate, stratified_kfold
from cocokit.data_eval.dataset import LabeledImageSet

log = logging.getLogger(__name__)

MODE_LABELS = {
    "softmax_baseline": "CNN (softmax)",
    "cascade_crc": "CNN+CRC",
    "cascade_procrc": "CNN+ProCRC",
    "coconet": "CoCoNet",
}


def compare(cfg: trainer.TrainConfig, ds: LabeledImageSet, modes, k: int = 5,
            seed: int | None = None) -> dict[str, EvalReport]:
    """k-fold accuracy for each mode on the same folds.

    Within a fold the softmax pretraining stage depends only on the training
    split and the seed, so it is run once and shared by every mode; the
    softmax fine-tuning stage is likewise shared by the three baseline modes.
    """
    modes = list(modes)
    for m in modes:
        if m not in trainer.MODES:
            raise ValueError(f"unknown mode {m!r}")
    seed = cfg.seed if seed is None else seed
    folds = stratified_kfold(ds.labels, k, seed)
    scores = {m: [] for m in modes}
    for f, test_idx in enumerate(folds):
        if k == 1:
            train_ds = test_ds = ds
        else:
            mask = np.ones(len(ds), dtype=bool)
            mask[test_idx] = False
            train_ds, test_ds = ds.subset(np.flatnonzero(mask)), ds.subset(test_idx)
        pre = trainer.pretrain(cfg, train_ds) if cfg.pretrain_epochs > 0 else None
        tuned = None
        for m in modes:
            mcfg = dataclasses.replace(cfg, mode=m)
            if m == "coconet":
                model = trainer.train_coconet(mcfg, train_ds, pre)
            else:
                # the baseline modes differ only in the head fitted after the same fine-tuning
                tuned = tuned or trainer.finetune_softmax(mcfg, train_ds, pre)
                model = trainer.baseline_head(mcfg, train_ds, tuned)
            acc = evaluate(model, test_ds.images, test_ds.labels)
            scores[m].append(acc)
            log.info("fold %d/%d %-16s %.1f%%", f + 1, k, m, acc)
    reports = {}
    for m in modes:
        conf = {**dataclasses.replace(cfg, mode=m).to_dict(), "k": k, "fold_seed": seed}
        reports[m] = aggregate(scores[m], conf, MODE_LABELS[m])
    return reports


def crossval(cfg: trainer.TrainConfig, ds: LabeledImageSet, k: int = 5,
             seed: int | None = None) -> EvalReport:
    return compare(cfg, ds, [cfg.mode], k, seed)[cfg.mode]


def format_table(reports: dict[str, EvalReport], title: str = "Test Accuracy (%)") -> str:
    width = max(len(r.label) for r in reports.values()) + 2
    lines = [title, "-" * (width + 14)]
    lines += [r.row(width) for r in reports.values()]
    return "\n".join(lines)
