"""Desk-scale ablation harnesses: the texture-parameter grid sweep and
the label-budget comparison of pretrained versus random initialization.

Every cell of a sweep re-runs the full train/evaluate recipe with the
same seeds and the same patient splits, so differences between cells
are attributable to the swept parameter alone.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np

from .classifier import (FinetuneConfig, build_downstream, evaluate_accuracy,
                         finetune)
from .data import (CLASS_NAMES, DatasetManifest, HIGH_RISK_CLASSES, entries_for_patients,
                   entry_key, split_by_patient)
from .lbp import LbpConfig
from .metrics import auc, fold_summary
from .nn import network_blobs
from .pretrain import PretrainConfig, load_texture_maps, pretrain

_HIGH_RISK_IDX = [CLASS_NAMES.index(c) for c in HIGH_RISK_CLASSES]


@dataclass
class SweepResult:
    columns: list
    rows: list  # dicts keyed by the columns

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow(["" if row.get(c) is None else row.get(c)
                                 for c in self.columns])


def _balanced_entries(manifest):
    """Trim every class to the smallest per-class patch count."""
    by_class = {c: [] for c in CLASS_NAMES}
    for e in manifest.entries:
        by_class[e.label].append(e)
    if any(not v for v in by_class.values()):
        missing = [c for c, v in by_class.items() if not v]
        raise ValueError(f"classes {missing} have no patches")
    floor = min(len(v) for v in by_class.values())
    out = []
    for c in CLASS_NAMES:
        out.extend(by_class[c][:floor])
    return out


def _binary_auc(entries, probs):
    flags = [e.label in HIGH_RISK_CLASSES for e in entries]
    if all(flags) or not any(flags):
        return None
    scores = probs[:, _HIGH_RISK_IDX].sum(axis=1)
    return auc(scores, flags)


def _evaluate_cell(manifest, entries, lbp_config, seed, pretrain_epochs,
                   finetune_epochs, batch_size, label_fraction=1.0,
                   checkpoint_blobs=None, init="from_checkpoint"):
    """One train/evaluate pass; returns (accuracy, auc) on held-out patients."""
    sub = DatasetManifest(list(entries), manifest.generator_seed,
                          manifest.patch_size, root=manifest.root)
    split = split_by_patient(sub, 0.8, seed)
    train_entries = entries_for_patients(sub, split.train_patient_ids)
    test_entries = entries_for_patients(sub, split.test_patient_ids)
    cache_entries = train_entries + test_entries
    maps = {entry_key(e): m for e, m in
            zip(cache_entries, load_texture_maps(sub, cache_entries, lbp_config))}

    blobs = checkpoint_blobs
    if init == "from_checkpoint" and blobs is None:
        train_manifest = DatasetManifest(train_entries, sub.generator_seed,
                                         sub.patch_size, root=sub.root)
        net, _ = pretrain(train_manifest,
                          PretrainConfig(epochs=pretrain_epochs,
                                         batch_size=min(batch_size, len(train_entries))),
                          lbp_config, seed,
                          texture_maps=[maps[entry_key(e)] for e in train_entries])
        blobs = network_blobs(net)

    down = build_downstream(seed=seed + 1,
                            checkpoint_blobs=blobs if init == "from_checkpoint" else None)
    config = FinetuneConfig(epochs=finetune_epochs, batch_size=batch_size,
                            label_fraction=label_fraction, init=init)
    finetune(down, sub, train_entries, config, lbp_config, seed, texture_maps=maps)
    accuracy, probs = evaluate_accuracy(down, sub, test_entries, lbp_config,
                                        texture_maps=maps)
    return accuracy, _binary_auc(test_entries, probs)


def _summaries(pairs):
    accs = [a for a, _ in pairs]
    aucs = [u for _, u in pairs if u is not None]
    acc_mean, acc_std = fold_summary(accs)
    auc_mean, auc_std = fold_summary(aucs) if aucs else (None, None)
    return acc_mean, acc_std, auc_mean, auc_std


LBP_SWEEP_COLUMNS = ["r", "p", "status", "accuracy_mean", "accuracy_std",
                     "auc_mean", "auc_std", "seconds"]


def lbp_sweep(manifest, r_values, p_values, seeds=(0,), pretrain_epochs=5,
              finetune_epochs=10, batch_size=32):
    """Grid over texture radius and neighbor count; one row per cell.

    Invalid parameter combinations become status=failed rows instead of
    aborting the sweep.
    """
    if not r_values or not p_values:
        raise ValueError("empty sweep grid")
    entries = _balanced_entries(manifest)
    rows = []
    for r in r_values:
        for p in p_values:
            started = time.monotonic()
            try:
                lbp_config = LbpConfig(neighbors=p, radius=r)
                pairs = [_evaluate_cell(manifest, entries, lbp_config, seed,
                                        pretrain_epochs, finetune_epochs, batch_size)
                         for seed in seeds]
            except ValueError:
                rows.append({"r": r, "p": p, "status": "failed",
                             "seconds": round(time.monotonic() - started, 3)})
                continue
            acc_mean, acc_std, auc_mean, auc_std = _summaries(pairs)
            rows.append({"r": r, "p": p, "status": "ok",
                         "accuracy_mean": acc_mean, "accuracy_std": acc_std,
                         "auc_mean": auc_mean, "auc_std": auc_std,
                         "seconds": round(time.monotonic() - started, 3)})
    return SweepResult(LBP_SWEEP_COLUMNS, rows)


STUDY_COLUMNS = ["label_fraction", "init", "accuracy_mean", "accuracy_std",
                 "auc_mean", "auc_std", "seconds"]


def label_fraction_study(manifest, checkpoint_blobs, fractions, seeds,
                         lbp_config=None, finetune_epochs=10, batch_size=32):
    """Paired pretrained-vs-random arms at each label budget.

    Both arms at one (fraction, seed) share the patient split and the
    label subset, so the only difference is the encoder initialization.
    """
    if checkpoint_blobs is None:
        raise ValueError("the pretrained arm needs a checkpoint")
    lbp_config = lbp_config or LbpConfig()
    entries = list(manifest.entries)
    rows = []
    for fraction in fractions:
        for init_name, init in (("ctl", "from_checkpoint"), ("random", "random")):
            started = time.monotonic()
            pairs = [_evaluate_cell(manifest, entries, lbp_config, seed,
                                    0, finetune_epochs, batch_size,
                                    label_fraction=fraction,
                                    checkpoint_blobs=checkpoint_blobs, init=init)
                     for seed in seeds]
            acc_mean, acc_std, auc_mean, auc_std = _summaries(pairs)
            rows.append({"label_fraction": fraction, "init": init_name,
                         "accuracy_mean": acc_mean, "accuracy_std": acc_std,
                         "auc_mean": auc_mean, "auc_std": auc_std,
                         "seconds": round(time.monotonic() - started, 3)})
    return SweepResult(STUDY_COLUMNS, rows)
