"""Watermark-removal attacks and the trigger-detectability study.

Every attack works on a private copy of the input model and records
(benign accuracy, authentication success rate) trajectories; the ASR always
comes from :func:`fusemark.verify.asr`.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from fusemark.data import ImageSet
from fusemark.masking import (MaskConfig, TrainConfig, TrainingDiverged, make_optimizer, mix_with_triggers,
                              train_epochs, trigger_count)
from fusemark.triggers import WatermarkKey, extend_triggers, fuse_direct, fuse_invisible
from fusemark.verify import asr
from fusemark.zoo import ArchSpec, build_model, evaluate, predict

log = logging.getLogger(__name__)

ATTACK_SCHEMA_VERSION = "1.0"
ATTACK_IDS = ("finetune", "transfer", "prune", "overwrite", "detectability")
DETECT_CLASSES = ("normal", "invisible_fusion", "direct_fusion")


@dataclass
class TrajectoryPoint:
    strength: float
    benign_accuracy: float
    asr: float
    extra: dict = field(default_factory=dict)


@dataclass
class AttackReport:
    attack_id: str
    trajectory: list[TrajectoryPoint]
    config: dict = field(default_factory=dict)
    attacked_model_ref: str | None = None
    flags: dict = field(default_factory=dict)
    schema_version: str = ATTACK_SCHEMA_VERSION

    def __post_init__(self):
        if self.attack_id not in ATTACK_IDS:
            raise ValueError(f"unknown attack id {self.attack_id!r}")
        if not self.trajectory:
            raise ValueError("trajectory must not be empty")
        strengths = [pt.strength for pt in self.trajectory]
        if any(b <= a for a, b in zip(strengths, strengths[1:])):
            raise ValueError("trajectory strengths must be strictly increasing")

    @property
    def final(self) -> TrajectoryPoint:
        return self.trajectory[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        if int(str(d.get("schema_version", "1.0")).split(".")[0]) > int(ATTACK_SCHEMA_VERSION.split(".")[0]):
            raise ValueError(f"attack report schema {d['schema_version']} is newer than supported")
        d = dict(d)
        d["trajectory"] = [TrajectoryPoint(**pt) for pt in d["trajectory"]]
        return cls(**d)


def _point(model, strength, test: ImageSet, key: WatermarkKey, **extra) -> TrajectoryPoint:
    return TrajectoryPoint(float(strength), evaluate(model, test), asr(model, key), extra)


def lr_ramp(total_epochs: int, start: float = 1e-4, end: float = 1e-5) -> list[float]:
    """Geometric decay from ``start`` to ``end`` over ``total_epochs`` epochs."""
    if total_epochs <= 1:
        return [start] * total_epochs
    return [start * (end / start) ** (t / (total_epochs - 1)) for t in range(total_epochs)]


def _attack_config(epochs: int, lr: float, optimizer: str, batch_size: int, seed: int) -> TrainConfig:
    return TrainConfig(epochs=epochs, learning_rate=lr, batch_size=batch_size, optimizer=optimizer,
                       weight_decay=0.0, lr_schedule="constant", mask=MaskConfig(0.0), mix=None, seed=seed)


def _retrain(model, data: ImageSet, iterations: int, epochs_per_iteration: int, lr_start: float, lr_end: float,
             optimizer: str, batch_size: int, seed: int, measure) -> tuple[list[TrajectoryPoint], dict]:
    """Shared loop for the retraining attacks: one trajectory point per iteration."""
    points = [measure(model, 0)]
    lrs = lr_ramp(iterations * epochs_per_iteration, lr_start, lr_end)
    cfg = _attack_config(epochs_per_iteration, lr_start, optimizer, batch_size, seed)
    opt = make_optimizer(model, optimizer, lr_start)
    gen = torch.Generator().manual_seed(seed)
    flags = {}
    for it in range(1, iterations + 1):
        try:
            train_epochs(model, data, cfg, lr_values=lrs[(it - 1) * epochs_per_iteration: it * epochs_per_iteration],
                         optimizer=opt, data_gen=gen)
        except TrainingDiverged as exc:
            flags = {"truncated": True, "diverged_at_iteration": it, "reason": str(exc)}
            log.warning("attack diverged at iteration %d: %s", it, exc)
            break
        points.append(measure(model, it))
    return points, flags


# --- fine-tuning -----------------------------------------------------------

def finetune_attack(model, key: WatermarkKey, finetune_data: ImageSet, test: ImageSet, iterations: int = 10,
                    epochs_per_iteration: int = 20, lr_start: float = 1e-4, lr_end: float = 1e-5,
                    optimizer: str = "adam", batch_size: int = 64, seed: int = 0) -> tuple[AttackReport, nn.Module]:
    """Retrain on in-distribution samples; one point per 20-epoch iteration."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    attacked = copy.deepcopy(model)
    points, flags = _retrain(attacked, finetune_data, iterations, epochs_per_iteration, lr_start, lr_end,
                             optimizer, batch_size, seed, lambda m, it: _point(m, it, test, key))
    config = {"n_samples": len(finetune_data), "iterations": iterations, "epochs_per_iteration": epochs_per_iteration,
              "lr_start": lr_start, "lr_end": lr_end, "optimizer": optimizer, "batch_size": batch_size, "seed": seed}
    return AttackReport("finetune", points, config, flags=flags), attacked


def sample_finetune_set(pool: ImageSet, n_samples: int, seed: int) -> ImageSet:
    if n_samples > len(pool):
        raise ValueError(f"asked for {n_samples} fine-tuning samples, pool has {len(pool)}")
    idx = np.random.default_rng(seed).choice(len(pool), size=n_samples, replace=False)
    return pool.subset(np.sort(idx))


# --- transfer learning -----------------------------------------------------

def select_classes(target: ImageSet, n_classes: int, subset_size: int, seed: int) -> tuple[ImageSet, list[int]]:
    if subset_size > n_classes:
        raise ValueError(f"class subset of {subset_size} exceeds the {n_classes} target classes")
    chosen = sorted(int(c) for c in np.random.default_rng(seed).choice(n_classes, size=subset_size, replace=False))
    remap = {c: i for i, c in enumerate(chosen)}
    keep = np.isin(target.labels, chosen)
    labels = np.array([remap[int(c)] for c in target.labels[keep]], dtype=np.int64)
    return ImageSet(target.images[keep], labels), chosen


def transfer_attack(model, key: WatermarkKey, target_train: ImageSet, target_test: ImageSet, target_classes: int,
                    original_test: ImageSet, class_subset_size: int | None = None, iterations: int = 10,
                    epochs_per_iteration: int = 20, lr_start: float = 1e-4, lr_end: float = 1e-5,
                    optimizer: str = "adam", batch_size: int = 64, seed: int = 0) -> tuple[AttackReport, nn.Module]:
    """Retrain on a class subset of another domain, keeping the head width."""
    head = model.spec.num_classes
    class_subset_size = head if class_subset_size is None else class_subset_size
    if class_subset_size != head:
        raise ValueError(f"class subset size {class_subset_size} must equal the model's {head} outputs")
    if tuple(target_train.shape) != tuple(model.spec.input_shape):
        raise ValueError(f"target images {target_train.shape} do not fit model input {model.spec.input_shape}")
    train, chosen = select_classes(target_train, target_classes, class_subset_size, seed)
    test, _ = select_classes(target_test, target_classes, class_subset_size, seed)
    attacked = copy.deepcopy(model)

    def measure(m, it):
        return _point(m, it, original_test, key, target_accuracy=evaluate(m, test) if len(test) else None)

    points, flags = _retrain(attacked, train, iterations, epochs_per_iteration, lr_start, lr_end, optimizer,
                             batch_size, seed, measure)
    config = {"classes": chosen, "iterations": iterations, "epochs_per_iteration": epochs_per_iteration,
              "lr_start": lr_start, "lr_end": lr_end, "optimizer": optimizer, "seed": seed}
    return AttackReport("transfer", points, config, flags=flags), attacked


# --- pruning ---------------------------------------------------------------

def prunable_weights(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    """Conv and fully-connected weights; biases and normalisation parameters excluded."""
    return [(f"{name}.weight", m.weight) for name, m in model.named_modules()
            if isinstance(m, (nn.Conv2d, nn.Linear))]


def prune_count(n: int, ratio: float) -> int:
    return math.ceil(round(ratio * n, 9))


def prune_l1_unstructured(model: nn.Module, ratio: float, inplace: bool = False) -> nn.Module:
    """Zero the globally smallest-|w| fraction of prunable weights (ties by position)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"pruning ratio must lie in [0, 1), got {ratio}")
    target = model if inplace else copy.deepcopy(model)
    weights = [w for _, w in prunable_weights(target)]
    if ratio == 0.0 or not weights:
        return target
    flat = torch.cat([w.detach().abs().flatten() for w in weights])
    k = prune_count(flat.numel(), ratio)
    drop = torch.argsort(flat, stable=True)[:k]
    keep = torch.ones_like(flat, dtype=torch.bool)
    keep[drop] = False
    offset = 0
    with torch.no_grad():
        for w in weights:
            n = w.numel()
            w.mul_(keep[offset:offset + n].view_as(w).to(w.dtype))
            offset += n
    return target


def pruning_sweep(model, key: WatermarkKey, ratios, test: ImageSet) -> AttackReport:
    ratios = [float(r) for r in ratios]
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise ValueError("ratios must be sorted strictly ascending")
    points = []
    for r in ratios:
        pruned = prune_l1_unstructured(model, r)
        points.append(_point(pruned, r, test, key))
    return AttackReport("prune", points, {"ratios": ratios, "scope": "global", "norm": "l1"})


def min_ratio_below(report: AttackReport, level: float) -> float:
    """Smallest swept ratio whose ASR falls below ``level``; ``inf`` if none does."""
    for pt in report.trajectory:
        if pt.asr < level:
            return pt.strength
    return math.inf


# --- overwriting -----------------------------------------------------------

def overwrite_attack(model, original_key: WatermarkKey, new_key: WatermarkKey, attacker_data: ImageSet,
                     key_source: ImageSet, test: ImageSet, epochs: int = 20, trigger_fraction: float = 0.05,
                     lr_start: float = 1e-4, lr_end: float = 1e-5, optimizer: str = "adam",
                     batch_size: int = 64, seed: int = 0) -> tuple[AttackReport, nn.Module]:
    """Embed a competing watermark by fine-tuning on data mixed with ``new_key`` triggers.

    ``key_source`` is the image set ``new_key`` was built from (needed to
    fabricate extra triggers). Strength is the epoch count.
    """
    k = trigger_count(len(attacker_data), trigger_fraction)
    data = mix_with_triggers(attacker_data, extend_triggers(key_source, new_key, k), seed).data
    attacked = copy.deepcopy(model)

    def measure(m, ep):
        return _point(m, ep, test, original_key, new_asr=asr(m, new_key))

    points, flags = _retrain(attacked, data, epochs, 1, lr_start, lr_end, optimizer, batch_size, seed, measure)
    config = {"epochs": epochs, "trigger_fraction": trigger_fraction, "n_samples": len(attacker_data),
              "new_key": new_key.spec.to_dict(), "lr_start": lr_start, "lr_end": lr_end, "optimizer": optimizer}
    return AttackReport("overwrite", points, config, flags=flags), attacked


# --- detectability ---------------------------------------------------------

@dataclass
class ConfusionMatrix3:
    """Rows are predictions, columns ground truth, both ordered as ``DETECT_CLASSES``."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (3, 3):
            raise ValueError("confusion matrix must be 3x3")

    @classmethod
    def from_predictions(cls, truth, pred) -> "ConfusionMatrix3":
        counts = np.zeros((3, 3), dtype=np.int64)
        np.add.at(counts, (np.asarray(pred), np.asarray(truth)), 1)
        return cls(counts)

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def recall(self, cls: str) -> float:
        i = DETECT_CLASSES.index(cls)
        return float(self.counts[i, i] / max(self.counts[:, i].sum(), 1))

    def precision(self, cls: str) -> float:
        i = DETECT_CLASSES.index(cls)
        return float(self.counts[i, i] / max(self.counts[i, :].sum(), 1))

    def to_dict(self) -> dict:
        return {"classes": list(DETECT_CLASSES), "rows": "prediction", "columns": "ground_truth",
                "counts": self.counts.tolist(), "totals": self.totals.tolist(),
                "recall": {c: self.recall(c) for c in DETECT_CLASSES},
                "precision": {c: self.precision(c) for c in DETECT_CLASSES}}


def _random_pairs(labels: np.ndarray, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    pairs = []
    while len(pairs) < n:
        i, j = rng.integers(len(labels), size=2)
        if labels[i] != labels[j]:
            pairs.append((int(i), int(j)))
    return pairs


def detection_corpus(pool: ImageSet, n_per_class: int, seed: int,
                     ratios=(0.5, 0.7, 0.9)) -> ImageSet:
    """Normal images plus simulated invisible- and direct-fusion triggers, labelled 0/1/2."""
    if n_per_class < 1 or n_per_class > len(pool):
        raise ValueError(f"n_per_class must lie in [1, {len(pool)}], got {n_per_class}")
    rng = np.random.default_rng(seed)
    normal = pool.images[rng.choice(len(pool), size=n_per_class, replace=False)]
    invisible = np.stack([fuse_invisible(pool.images[i], pool.images[j], float(rng.choice(ratios)))
                          for i, j in _random_pairs(pool.labels, n_per_class, rng)])
    direct = np.stack([fuse_direct(pool.images[i], pool.images[j])
                       for i, j in _random_pairs(pool.labels, n_per_class, rng)])
    labels = np.repeat(np.arange(3, dtype=np.int64), n_per_class)
    return ImageSet(np.concatenate([normal, invisible, direct]), labels)


def detectability_eval(pool: ImageSet, dataset_id: str | None, n_per_class: int = 1000, backbone: str = "lenet5",
                       epochs: int = 10, holdout: float = 0.2, seed: int = 0) -> tuple[ConfusionMatrix3, dict]:
    """Train a 3-way trigger detector and return its held-out confusion matrix."""
    corpus = detection_corpus(pool, n_per_class, seed)
    rng = np.random.default_rng(seed + 1)
    order = rng.permutation(len(corpus))
    n_test = int(round(holdout * len(corpus)))
    if n_test < 3 or len(corpus) - n_test < 3:
        raise ValueError("not enough samples for a train/holdout split")
    test, train = corpus.subset(order[:n_test]), corpus.subset(order[n_test:])
    spec = ArchSpec(backbone, 3, corpus.shape)
    detector = build_model(spec, seed)
    if dataset_id is not None:
        from fusemark.data import dataset_info

        info = dataset_info(dataset_id)
        detector.norm.mean.copy_(torch.tensor(info.mean).view(1, -1, 1, 1))
        detector.norm.std.copy_(torch.tensor(info.std).view(1, -1, 1, 1))
    cfg = TrainConfig(epochs=epochs, learning_rate=0.05, batch_size=64, mask=MaskConfig(0.0), mix=None, seed=seed)
    history = train_epochs(detector, train, cfg)
    cm = ConfusionMatrix3.from_predictions(test.labels, predict(detector, test.images))
    meta = {"n_per_class": n_per_class, "backbone": backbone, "epochs": epochs, "holdout": holdout,
            "train_size": len(train), "test_size": len(test), "final_loss": history[-1]["loss"] if history else None}
    return cm, meta
