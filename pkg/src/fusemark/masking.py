"""Watermark embedding with random weight masking.

During training each in-scope layer computes with ``(W * M) / (1 - p)``
where ``M`` is a fresh Bernoulli(1 - p) mask, and only the unmasked weights
receive an update. Backpropagating through the masked weight yields exactly
``(dL/dW_eff * M) / (1 - p)`` as the weight gradient. Inference uses the
plain weights with no mask and no scaling.

``p`` is the drop probability; ``1 - p`` is the keep probability.
"""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from fusemark.data import DatasetSplits, ImageSet
from fusemark.triggers import WatermarkKey, extend_triggers
from fusemark.zoo import ArchSpec, Classifier, build_model, evaluate, to_tensor

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd_momentum", "adam")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class MaskConfig:
    drop_probability: float = 0.3
    strategy: str = "random"
    resample: str = "per_batch"
    layer_scope: tuple[str, ...] | None = None  # None: every conv weight
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_probability < 1.0:
            raise ValueError(f"drop probability must lie in [0, 1), got {self.drop_probability}")
        if self.strategy != "random":
            raise ValueError(f"unsupported mask strategy {self.strategy!r}")
        if self.resample not in ("per_batch", "per_epoch"):
            raise ValueError(f"resample must be per_batch or per_epoch, got {self.resample!r}")
        if self.layer_scope is not None and not self.layer_scope:
            raise ValueError("layer_scope must be non-empty when given")

    @property
    def enabled(self) -> bool:
        return self.drop_probability > 0.0


@dataclass(frozen=True)
class MixSpec:
    trigger_fraction: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.trigger_fraction < 1.0:
            raise ValueError(f"trigger fraction must lie in (0, 1), got {self.trigger_fraction}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    learning_rate: float = 0.05
    batch_size: int = 128
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "cosine"
    mask: MaskConfig = field(default_factory=MaskConfig)
    mix: MixSpec | None = field(default_factory=MixSpec)
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be constant or cosine")

    def to_dict(self) -> dict:
        return asdict(self)


# --- mask primitives -------------------------------------------------------

def sample_mask(shape, p: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Binary mask: each entry 0 with probability ``p``, else 1."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return torch.ones(shape)
    return (torch.rand(shape, generator=generator) >= p).to(torch.float32)


def conv_weight_names(model: nn.Module) -> list[str]:
    return [f"{name}.weight" for name, m in model.named_modules() if isinstance(m, nn.Conv2d)]


def resolve_scope(model: nn.Module, scope) -> list[str]:
    params = dict(model.named_parameters())
    names = list(scope) if scope is not None else conv_weight_names(model)
    unknown = [n for n in names if n not in params]
    if unknown:
        raise ValueError(f"layer_scope names unknown parameters: {unknown}")
    if any(n.endswith(".bias") for n in names):
        raise ValueError("biases are never masked")
    return names


def sample_masks(model: nn.Module, names, p: float, generator: torch.Generator | None = None) -> dict[str, torch.Tensor]:
    params = dict(model.named_parameters())
    return {n: sample_mask(params[n].shape, p, generator) for n in names}


def _check_masks(model: nn.Module, masks: dict[str, torch.Tensor]) -> dict[str, nn.Parameter]:
    params = dict(model.named_parameters())
    for name, m in masks.items():
        if name not in params:
            raise ValueError(f"mask given for unknown parameter {name!r}")
        if m.shape != params[name].shape:
            raise ValueError(f"mask for {name} has shape {tuple(m.shape)}, weight is {tuple(params[name].shape)}")
        if not torch.all((m == 0) | (m == 1)):
            raise ValueError(f"mask for {name} is not binary")
    return params


def masked_forward(model: nn.Module, batch: torch.Tensor, masks: dict[str, torch.Tensor], p: float) -> torch.Tensor:
    """Forward pass with every masked weight replaced by ``(W * M) / (1 - p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {p}")
    params = _check_masks(model, masks)
    if not masks:
        return model(batch)
    scale = 1.0 / (1.0 - p)
    effective = {name: params[name] * m * scale for name, m in masks.items()}
    return functional_call(model, effective, (batch,))


def masked_step(model: nn.Module, optimizer: torch.optim.Optimizer, inputs: torch.Tensor, targets: torch.Tensor,
                masks: dict[str, torch.Tensor], p: float, loss_fn=F.cross_entropy) -> torch.Tensor:
    """One forward/backward/update with a shared mask set.

    Masked entries are restored bit-for-bit after the optimiser step, so
    momentum and weight decay cannot move them either.
    """
    params = _check_masks(model, masks)
    optimizer.zero_grad(set_to_none=True)
    loss = loss_fn(masked_forward(model, inputs, masks, p), targets)
    loss.backward()
    frozen = {name: params[name].detach().clone() for name in masks}
    optimizer.step()
    with torch.no_grad():
        for name, m in masks.items():
            params[name].copy_(torch.where(m.bool(), params[name], frozen[name]))
    return loss.detach()


def make_optimizer(model: nn.Module, name: str, lr: float, momentum: float = 0.9,
                   weight_decay: float = 0.0) -> torch.optim.Optimizer:
    if name == "sgd":
        return torch.optim.SGD(model.parameters(), lr=lr, weight_decay=weight_decay)
    if name == "sgd_momentum":
        return torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    if name == "adam":
        return torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


# --- trigger mixing --------------------------------------------------------

def trigger_count(n: int, e: float) -> int:
    # guard against float fuzz such as 60000 * 0.01 = 600.0000000000001
    return math.ceil(round(n * e, 9))


@dataclass(frozen=True, eq=False)
class MixedSet:
    data: ImageSet
    is_trigger: np.ndarray  # bool per entry


def mix_training_set(train: ImageSet, key: WatermarkKey, e: float, seed: int,
                     source: ImageSet | None = None) -> MixedSet:
    """Replace ``ceil(N * e)`` originals with target-labelled triggers and shuffle.

    Triggers beyond ``key.count`` are fabricated from the key's recipe on
    ``source`` (default ``train``); the key's own triggers come first.
    """
    if not 0.0 < e < 1.0:
        raise ValueError(f"trigger fraction must lie in (0, 1), got {e}")
    k = trigger_count(len(train), e)
    return mix_with_triggers(train, extend_triggers(train if source is None else source, key, k), seed)


def mix_with_triggers(train: ImageSet, triggers: ImageSet, seed: int) -> MixedSet:
    n, k = len(train), len(triggers)
    if k > n:
        raise ValueError("more triggers than training samples")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=n - k, replace=False))
    images = np.concatenate([train.images[keep], triggers.images])
    labels = np.concatenate([train.labels[keep], triggers.labels])
    flags = np.concatenate([np.zeros(n - k, bool), np.ones(k, bool)])
    order = rng.permutation(n)
    return MixedSet(ImageSet(images[order], labels[order]), flags[order])


# --- training loop ---------------------------------------------------------

def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random 4-pixel-padded crop and horizontal flip (colour datasets only)."""
    n, _, h, w = x.shape
    padded = F.pad(x, (4, 4, 4, 4), mode="reflect")
    dx = torch.randint(0, 9, (n,), generator=gen)
    dy = torch.randint(0, 9, (n,), generator=gen)
    flip = torch.rand(n, generator=gen) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


def train_epochs(model: nn.Module, data: ImageSet, config: TrainConfig, *, eval_fn=None,
                 history: list[dict] | None = None, log_path: Path | None = None,
                 lr_values: list[float] | None = None, optimizer: torch.optim.Optimizer | None = None,
                 data_gen: torch.Generator | None = None) -> list[dict]:
    """Train in place; returns one metrics dict per epoch.

    ``lr_values`` overrides the per-epoch learning rate (used by the attack
    schedules); otherwise the config's schedule applies.
    """
    history = [] if history is None else history
    p = config.mask.drop_probability
    scope = resolve_scope(model, config.mask.layer_scope) if config.mask.enabled else []
    opt = optimizer or make_optimizer(model, config.optimizer, config.learning_rate, config.momentum,
                                      config.weight_decay)
    data_gen = data_gen or torch.Generator().manual_seed(config.seed)
    mask_gen = torch.Generator().manual_seed(config.mask.seed)
    x_all = torch.from_numpy(np.array(data.images, copy=True)).permute(0, 3, 1, 2)
    y_all = torch.from_numpy(np.array(data.labels, dtype=np.int64, copy=True))
    n = len(data)
    for epoch in range(config.epochs):
        if lr_values is not None:
            lr = lr_values[epoch]
        elif config.lr_schedule == "cosine":
            lr = 0.5 * config.learning_rate * (1 + math.cos(math.pi * epoch / max(config.epochs, 1)))
        else:
            lr = config.learning_rate
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        t0 = time.time()
        perm = torch.randperm(n, generator=data_gen)
        masks = sample_masks(model, scope, p, mask_gen) if scope else {}
        total, count = 0.0, 0
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            x = x_all[idx].float()
            if config.augment:
                x = _augment(x, data_gen)
            if scope and config.mask.resample == "per_batch" and i > 0:
                masks = sample_masks(model, scope, p, mask_gen)
            loss = masked_step(model, opt, x, y_all[idx], masks, p)
            if not torch.isfinite(loss):
                record = {"epoch": epoch, "batch": i // config.batch_size, "loss": float(loss), "lr": lr}
                history.append(record)
                _append_log(log_path, record)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {i // config.batch_size}", history)
            total += float(loss) * len(idx)
            count += len(idx)
        record = {"epoch": epoch, "loss": total / max(count, 1), "lr": lr, "seconds": round(time.time() - t0, 3)}
        if eval_fn is not None:
            record.update(eval_fn(model))
        history.append(record)
        _append_log(log_path, record)
        log.info("epoch %d %s", epoch, record)
    model.eval()
    return history


def _append_log(path: Path | None, record: dict) -> None:
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def environment_fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "platform": platform.platform(),
        "threads": torch.get_num_threads(),
    }


def training_manifest(arch_id: str, dataset_id: str, key: WatermarkKey | None, config: TrainConfig) -> dict:
    return {
        "schema_version": "1.0",
        "arch_id": arch_id,
        "dataset_id": dataset_id,
        "train_config": config.to_dict(),
        "key_digest": key.digest() if key is not None else None,
        "environment": environment_fingerprint(),
    }


def embed_watermark(arch_id: str, splits: DatasetSplits, key: WatermarkKey | None, config: TrainConfig, *,
                    init_model: Classifier | None = None, log_path: str | Path | None = None,
                    train_limit: int | None = None) -> tuple[Classifier, list[dict]]:
    """Train a watermarked classifier on the trigger-mixed training split.

    ``key=None`` or ``config.mix=None`` trains a clean model. With
    ``init_model`` the embedding fine-tunes a copy of that model instead of
    training from scratch.
    """
    if key is not None and key.dataset_id != splits.dataset_id:
        raise ValueError(f"key was built on {key.dataset_id!r}, dataset is {splits.dataset_id!r}")
    train = splits.train if train_limit is None else splits.train.subset(np.arange(min(train_limit, len(splits.train))))
    if key is not None and config.mix is not None:
        data = mix_training_set(train, key, config.mix.trigger_fraction, config.seed).data
    else:
        data = train
    if init_model is not None:
        import copy

        model = copy.deepcopy(init_model)
    else:
        model = build_model(ArchSpec.for_dataset(arch_id, splits.dataset_id), config.seed, splits.dataset_id)
    log_path = Path(log_path) if log_path is not None else None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    def eval_fn(m):
        out = {"benign_accuracy": evaluate(m, splits.test)}
        if key is not None:
            out["trigger_accuracy"] = evaluate(m, key.as_image_set())
        return out

    history = train_epochs(model, data, config, eval_fn=eval_fn, log_path=log_path)
    return model, history
