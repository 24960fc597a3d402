"""End-to-end runs: config schema, seed registry, run manifest and results bundle.

A run lives in ``<out>/<run_id>/`` and is driven by one YAML config. Stages
run in order (triggers, clean baseline, embed, verify, attacks); each
persists its artifacts and registers them in ``manifest.json``, which is
rewritten after every stage so a failed run keeps its partial record.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shlex
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from fusemark import __version__
from fusemark.attacks import (AttackReport, detectability_eval, finetune_attack, overwrite_attack, pruning_sweep,
                              sample_finetune_set, transfer_attack)
from fusemark.data import dataset_info, load_dataset
from fusemark.masking import MaskConfig, MixSpec, TrainConfig, embed_watermark, environment_fingerprint, training_manifest
from fusemark.triggers import TriggerSpec, build_watermark_key, save_key
from fusemark.verify import DEFAULT_THRESHOLD, InProcessOracle, VerificationReport, authenticate
from fusemark.zoo import evaluate, save_model, weights_digest

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = "1.0"
BUNDLE_SCHEMA_VERSION = "1.0"
FULL_SCALE_DATASETS = ("cifar100", "tiny-imagenet")
TABLE_ATTACKS = ("finetune", "transfer", "prune", "overwrite")


class ConfigError(ValueError):
    pass


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, run_dir: Path, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause} (partial artifacts in {run_dir})")
        self.stage = stage
        self.run_dir = run_dir
        self.cause = cause


# --- config schema ---------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KeyConfig(_Strict):
    mode: Literal["direct", "invisible"] = "invisible"
    source_class_a: int
    source_class_b: int
    target_class: int
    transparency_r: float = 0.5
    count: int = 90


class TrainSection(_Strict):
    epochs: int = Field(20, ge=0)
    learning_rate: float = Field(0.05, gt=0)
    batch_size: int = Field(128, ge=1)
    optimizer: Literal["sgd", "sgd_momentum", "adam"] = "sgd_momentum"
    weight_decay: float = Field(5e-4, ge=0)
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    drop_probability: float = Field(0.3, ge=0, lt=1)
    resample: Literal["per_batch", "per_epoch"] = "per_batch"
    trigger_fraction: float = Field(0.0099, gt=0, lt=1)
    augment: bool = False
    train_limit: int | None = Field(None, ge=1)


class VerifySection(_Strict):
    threshold: float = Field(DEFAULT_THRESHOLD, gt=0, le=1)


class PruneSection(_Strict):
    ratios: list[float] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95]

    @field_validator("ratios")
    @classmethod
    def _sorted(cls, v):
        if not v or any(b <= a for a, b in zip(v, v[1:])) or v[0] < 0 or v[-1] >= 1:
            raise ValueError("ratios must be strictly ascending within [0, 1)")
        return v


class RetrainSection(_Strict):
    n_samples: int = Field(1000, ge=1)
    iterations: int = Field(10, ge=0)
    epochs_per_iteration: int = Field(20, ge=1)
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    optimizer: Literal["sgd", "sgd_momentum", "adam"] = "adam"
    batch_size: int = 64


class TransferSection(RetrainSection):
    target_dataset: str
    class_subset_size: int | None = None
    n_samples: int | None = None


class OverwriteSection(_Strict):
    source_class_a: int = 2
    source_class_b: int = 4
    target_class: int = 5
    n_samples: int = Field(6000, ge=1)
    epochs: int = Field(20, ge=0)
    trigger_fraction: float = Field(0.05, gt=0, lt=1)
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    batch_size: int = 64


class DetectSection(_Strict):
    n_per_class: int = Field(1000, ge=1)
    epochs: int = Field(10, ge=1)
    holdout: float = Field(0.2, gt=0, lt=1)


class AttackSection(_Strict):
    prune: PruneSection | None = None
    finetune: RetrainSection | None = None
    transfer: TransferSection | None = None
    overwrite: OverwriteSection | None = None
    detect: DetectSection | None = None


class PipelineConfig(_Strict):
    run_id: str
    dataset: str
    arch: Literal["lenet5", "resnet18", "vgg16"]
    seed: int = 0
    key: KeyConfig
    train: TrainSection = TrainSection()
    clean_baseline: bool = True
    verify: VerifySection = VerifySection()
    attacks: AttackSection = AttackSection()

    @field_validator("run_id")
    @classmethod
    def _safe_id(cls, v):
        if not v or "/" in v or v.startswith("."):
            raise ValueError("run_id must be a plain directory name")
        return v

    @model_validator(mode="after")
    def _check(self):
        info = dataset_info(self.dataset)
        for c in (self.key.source_class_a, self.key.source_class_b, self.key.target_class):
            if not 0 <= c < info.num_classes:
                raise ValueError(f"key class {c} outside [0, {info.num_classes}) for {self.dataset}")
        return self

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def load_config(path: str | Path) -> PipelineConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return parse_config(raw, source=str(path))


def parse_config(raw, source: str = "<config>") -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from None


# --- seeds -----------------------------------------------------------------

STAGES = ("triggers", "clean", "embed", "finetune", "transfer", "overwrite", "detect")


def derive_seed(master: int, stage: str) -> int:
    """First 8 bytes of sha256("<master>:<stage>"), masked to 63 bits."""
    digest = hashlib.sha256(f"{master}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def seed_registry(master: int) -> dict[str, int]:
    return {stage: derive_seed(master, stage) for stage in STAGES}


# --- manifest --------------------------------------------------------------

def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: dict
    seeds: dict
    code_version: str = __version__
    environment: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)  # relative path -> sha256
    stages: list = field(default_factory=list)
    status: str = "running"
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    schema_version: str = MANIFEST_SCHEMA_VERSION

    def register(self, run_dir: Path, path: Path) -> None:
        self.files[str(path.relative_to(run_dir))] = file_sha256(path)

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        return path

    @classmethod
    def read(cls, run_dir: Path) -> "RunManifest":
        d = json.loads((Path(run_dir) / "manifest.json").read_text())
        _check_version(d, MANIFEST_SCHEMA_VERSION, "manifest")
        return cls(**d)


def _check_version(d: dict, supported: str, what: str) -> None:
    if int(str(d.get("schema_version", "1.0")).split(".")[0]) > int(supported.split(".")[0]):
        raise ValueError(f"{what} schema {d['schema_version']} is newer than supported {supported}")


def find_orphans(run_dir: str | Path) -> list[str]:
    """Files under the run directory that the manifest does not reference."""
    run_dir = Path(run_dir)
    manifest = RunManifest.read(run_dir)
    present = {str(p.relative_to(run_dir)) for p in run_dir.rglob("*") if p.is_file()}
    return sorted(present - set(manifest.files) - {"manifest.json"})


def check_manifest(run_dir: str | Path) -> list[str]:
    """Referenced files that are missing or whose checksum changed."""
    run_dir = Path(run_dir)
    manifest = RunManifest.read(run_dir)
    bad = []
    for rel, digest in sorted(manifest.files.items()):
        path = run_dir / rel
        if not path.is_file() or file_sha256(path) != digest:
            bad.append(rel)
    return bad


# --- results bundle --------------------------------------------------------

@dataclass
class ResultsBundle:
    run_id: str
    effectiveness: dict | None = None  # asr, decision, n_matched, n_queried, threshold, fp_bound
    fidelity: dict | None = None  # watermarked, clean, delta
    robustness: dict[str, AttackReport] = field(default_factory=dict)
    detectability: dict | None = None
    expected_attacks: list[str] = field(default_factory=list)
    logs: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    schema_version: str = BUNDLE_SCHEMA_VERSION

    def __post_init__(self):
        f = self.fidelity
        if f is not None and f.get("clean") is not None:
            if not math.isclose(f["delta"], f["watermarked"] - f["clean"], abs_tol=1e-12):
                raise ValueError("fidelity delta must equal watermarked - clean")

    def missing_sections(self) -> list[str]:
        missing = []
        if self.effectiveness is None:
            missing.append("effectiveness")
        if self.fidelity is None or self.fidelity.get("clean") is None:
            missing.append("fidelity")
        if not self.robustness:
            missing.append("robustness")
        missing += [f"robustness.{a}" for a in self.expected_attacks
                    if a != "detect" and a not in self.robustness]
        if "detect" in self.expected_attacks and self.detectability is None:
            missing.append("detectability")
        return missing

    @property
    def complete(self) -> bool:
        return not self.missing_sections()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["robustness"] = {k: v.to_dict() for k, v in sorted(self.robustness.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultsBundle":
        _check_version(d, BUNDLE_SCHEMA_VERSION, "results bundle")
        d = dict(d)
        d["robustness"] = {k: AttackReport.from_dict(v) for k, v in d.get("robustness", {}).items()}
        return cls(**d)

    @classmethod
    def read(cls, path: str | Path) -> "ResultsBundle":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --- the pipeline ----------------------------------------------------------

def _train_config(cfg: PipelineConfig, seed: int, mixed: bool) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.epochs, learning_rate=t.learning_rate, batch_size=t.batch_size, optimizer=t.optimizer,
        weight_decay=t.weight_decay, lr_schedule=t.lr_schedule,
        mask=MaskConfig(t.drop_probability if mixed else 0.0, resample=t.resample, seed=seed),
        mix=MixSpec(t.trigger_fraction) if mixed else None, augment=t.augment, seed=seed)


class _Run:
    def __init__(self, cfg: PipelineConfig, run_dir: Path, manifest: RunManifest):
        self.cfg, self.dir, self.manifest = cfg, run_dir, manifest

    def stage(self, name: str, fn):
        started = time.time()
        entry = {"stage": name, "started_at": _now()}
        try:
            result = fn()
        except Exception as exc:
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}", seconds=round(time.time() - started, 2))
            self.manifest.stages.append(entry)
            self.manifest.status = f"failed:{name}"
            self.manifest.finished_at = _now()
            self.manifest.write(self.dir)
            raise PipelineStageError(name, self.dir, exc) from exc
        entry.update(status="ok", seconds=round(time.time() - started, 2))
        self.manifest.stages.append(entry)
        self.manifest.write(self.dir)
        return result

    def path(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def keep(self, path: Path) -> Path:
        self.manifest.register(self.dir, path)
        return path

    def write_json(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.write_text(text)
        return self.keep(p)


def run_pipeline(config: PipelineConfig | str | Path, out_dir: str | Path, full_scale: bool = False,
                 command: str | None = None, render: bool = False) -> ResultsBundle:
    """Run triggers -> embed -> verify -> attacks and persist everything under ``out_dir/run_id``."""
    cfg = config if isinstance(config, PipelineConfig) else load_config(config)
    if cfg.dataset in FULL_SCALE_DATASETS and not full_scale:
        raise ConfigError(f"{cfg.dataset} is a full-scale configuration; pass --full-scale to run it")
    seeds = seed_registry(cfg.seed)
    run_dir = Path(out_dir) / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(run_id=cfg.run_id, command=command or shlex.join(sys.argv), config=cfg.to_dict(),
                           seeds=seeds, environment=environment_fingerprint())
    run = _Run(cfg, run_dir, manifest)
    run.keep(run.write_json("config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True)))
    manifest.write(run_dir)

    splits = run.stage("data", lambda: load_dataset(cfg.dataset))
    manifest.inputs["dataset"] = {"id": cfg.dataset, "train": splits.train.checksum(), "test": splits.test.checksum()}

    def make_key():
        k = cfg.key
        spec = TriggerSpec(k.source_class_a, k.source_class_b, k.target_class, mode=k.mode,
                           transparency_r=k.transparency_r, count=k.count, seed=seeds["triggers"])
        key = build_watermark_key(splits.train, spec, cfg.dataset, created_at="1970-01-01T00:00:00+00:00")
        run.keep(save_key(key, run.path("key.zip")))
        return key

    key = run.stage("triggers", make_key)
    manifest.inputs["key"] = key.digest()
    bundle = ResultsBundle(run_id=cfg.run_id, meta={"dataset": cfg.dataset, "arch": cfg.arch, "seed": cfg.seed,
                                                    "key": cfg.key.model_dump(), "train": cfg.train.model_dump()},
                           expected_attacks=[a for a in ("prune", "finetune", "transfer", "overwrite", "detect")
                                             if getattr(cfg.attacks, a) is not None])
    limit = cfg.train.train_limit

    def train(name, mixed):
        tcfg = _train_config(cfg, seeds[name], mixed)
        log_path = run.path(f"{name}/train_log.jsonl")
        model, _ = embed_watermark(cfg.arch, splits, key if mixed else None, tcfg, log_path=log_path,
                                   train_limit=limit)
        run.keep(log_path)
        run.keep(save_model(model, run.path(f"{name}/model.pt"),
                            training_manifest(cfg.arch, cfg.dataset, key if mixed else None, tcfg)))
        bundle.logs[name] = str(log_path.relative_to(run_dir))
        manifest.inputs[f"{name}_model"] = weights_digest(model)
        return model

    clean_acc = None
    if cfg.clean_baseline:
        clean = run.stage("clean", lambda: train("clean", False))
        clean_acc = evaluate(clean, splits.test)
    model = run.stage("embed", lambda: train("embed", True))
    wm_acc = evaluate(model, splits.test)
    bundle.fidelity = {"watermarked": wm_acc, "clean": clean_acc,
                       "delta": None if clean_acc is None else wm_acc - clean_acc}

    def verify():
        report = authenticate(InProcessOracle(model), key, cfg.verify.threshold, n_classes=splits.num_classes)
        run.write_json("verify.json", report.to_json())
        return report

    report: VerificationReport = run.stage("verify", verify)
    bundle.effectiveness = {"asr": report.asr, "decision": report.decision, "n_matched": report.n_matched,
                            "n_queried": report.n_queried, "threshold": report.threshold, "fp_bound": report.fp_bound}
    if cfg.clean_baseline:
        ctrl = authenticate(InProcessOracle(clean), key, cfg.verify.threshold, n_classes=splits.num_classes)
        bundle.effectiveness["clean_model_asr"] = ctrl.asr

    a = cfg.attacks

    def record(attack_id, rep: AttackReport):
        run.write_json(f"attacks/{attack_id}.json", rep.to_json())
        bundle.robustness[attack_id] = rep

    if a.prune is not None:
        run.stage("attack:prune", lambda: record("prune", pruning_sweep(model, key, a.prune.ratios, splits.test)))
    if a.finetune is not None:
        f = a.finetune

        def do_finetune():
            data = sample_finetune_set(splits.train, f.n_samples, seeds["finetune"])
            rep, _ = finetune_attack(model, key, data, splits.test, f.iterations, f.epochs_per_iteration,
                                     f.lr_start, f.lr_end, f.optimizer, f.batch_size, seeds["finetune"])
            record("finetune", rep)

        run.stage("attack:finetune", do_finetune)
    if a.transfer is not None:
        tr = a.transfer

        def do_transfer():
            target = load_dataset(tr.target_dataset)
            train_pool = target.train
            if tr.n_samples is not None:
                train_pool = sample_finetune_set(train_pool, min(tr.n_samples, len(train_pool)), seeds["transfer"])
            rep, _ = transfer_attack(model, key, train_pool, target.test, target.num_classes, splits.test,
                                     tr.class_subset_size, tr.iterations, tr.epochs_per_iteration, tr.lr_start,
                                     tr.lr_end, tr.optimizer, tr.batch_size, seeds["transfer"])
            record("transfer", rep)

        run.stage("attack:transfer", do_transfer)
    if a.overwrite is not None:
        o = a.overwrite

        def do_overwrite():
            spec = TriggerSpec(o.source_class_a, o.source_class_b, o.target_class, mode=cfg.key.mode,
                               transparency_r=cfg.key.transparency_r, count=cfg.key.count, seed=seeds["overwrite"])
            new_key = build_watermark_key(splits.train, spec, cfg.dataset, created_at="1970-01-01T00:00:00+00:00")
            run.keep(save_key(new_key, run.path("attacks/overwrite_key.zip")))
            data = sample_finetune_set(splits.train, o.n_samples, seeds["overwrite"])
            rep, _ = overwrite_attack(model, key, new_key, data, splits.train, splits.test, o.epochs,
                                      o.trigger_fraction, o.lr_start, o.lr_end, "adam", o.batch_size,
                                      seeds["overwrite"])
            record("overwrite", rep)

        run.stage("attack:overwrite", do_overwrite)
    if a.detect is not None:
        d = a.detect

        def do_detect():
            cm, meta = detectability_eval(splits.train, cfg.dataset, d.n_per_class, "lenet5" if cfg.arch == "lenet5"
                                          else cfg.arch, d.epochs, d.holdout, seeds["detect"] % 2**31)
            bundle.detectability = {**cm.to_dict(), "meta": meta}
            run.write_json("attacks/detect.json", json.dumps(bundle.detectability, indent=1, sort_keys=True))

        run.stage("attack:detect", do_detect)

    bundle_path = run.write_json("results.json", bundle.to_json())
    if render:
        from fusemark.report import render_report

        written = run.stage("report", lambda: render_report(bundle, run_dir / "report"))
        for path in written.values():
            run.keep(path)
    manifest.status = "complete"
    manifest.finished_at = _now()
    manifest.write(run_dir)
    log.info("run %s complete: %s", cfg.run_id, bundle_path)
    return bundle
