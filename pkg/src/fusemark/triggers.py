"""Feature-fusion trigger generation and the watermark key archive.

Two fusion modes build triggers from a pair of in-distribution instances:

* ``direct``: a 2H x 2W canvas with instance A top-left, instance B
  bottom-right and the off-diagonal quadrants white, area-downsampled 2x back
  to the native shape.
* ``invisible``: the per-pixel blend ``r * A + (1 - r) * B``.

Every trigger is labelled with a target class distinct from both sources.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from fusemark.data import ImageSet

KEY_FORMAT_VERSION = "1.0"
WHITE = 255
MODES = ("direct", "invisible")
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class KeyIntegrityError(RuntimeError):
    """The key archive is truncated or its pixel checksums do not match."""


class KeySchemaError(ValueError):
    """The key manifest lacks required fields or has an unsupported version."""


class InsufficientInstancesError(ValueError):
    """A source class has fewer instances than the requested trigger count."""

    def __init__(self, class_index: int, available: int, needed: int):
        super().__init__(f"source class {class_index} has {available} instances, {needed} needed")
        self.class_index = class_index
        self.available = available
        self.needed = needed


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (H, W, C) uint8
    label: int


@dataclass(frozen=True)
class TriggerSpec:
    source_class_a: int
    source_class_b: int
    target_class: int
    mode: str = "invisible"
    transparency_r: float = 0.5
    count: int = 90
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.source_class_a == self.source_class_b:
            raise ValueError("source classes must differ")
        if self.target_class in (self.source_class_a, self.source_class_b):
            raise ValueError("target class must differ from both source classes")
        if min(self.source_class_a, self.source_class_b, self.target_class) < 0:
            raise ValueError("class indices must be non-negative")
        if not 0.0 <= self.transparency_r <= 1.0:
            raise ValueError(f"transparency_r must lie in [0, 1], got {self.transparency_r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class WatermarkKey:
    triggers: np.ndarray  # (K, H, W, C) uint8, read-only
    spec: TriggerSpec
    provenance: tuple[tuple[int, int], ...]
    dataset_id: str
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def __post_init__(self):
        trig = np.array(self.triggers, dtype=np.uint8, copy=True)
        trig.setflags(write=False)
        object.__setattr__(self, "triggers", trig)
        object.__setattr__(self, "provenance", tuple((int(p), int(q)) for p, q in self.provenance))
        if trig.ndim != 4 or len(trig) != self.spec.count:
            raise ValueError(f"expected {self.spec.count} triggers shaped (K, H, W, C), got {trig.shape}")
        if len(self.provenance) != len(trig):
            raise ValueError("one provenance record per trigger is required")

    @property
    def target_class(self) -> int:
        return self.spec.target_class

    @property
    def labels(self) -> np.ndarray:
        return np.full(len(self.triggers), self.spec.target_class, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.triggers)

    def __iter__(self) -> Iterator[LabeledImage]:
        for img in self.triggers:
            yield LabeledImage(img, self.spec.target_class)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WatermarkKey):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.provenance == other.provenance
            and self.dataset_id == other.dataset_id
            and self.created_at == other.created_at
            and self.triggers.shape == other.triggers.shape
            and np.array_equal(self.triggers, other.triggers)
        )

    __hash__ = None

    def digest(self) -> str:
        """Content checksum over spec, dataset id and trigger pixels (not the timestamp)."""
        h = hashlib.sha256()
        h.update(json.dumps({"spec": self.spec.to_dict(), "dataset_id": self.dataset_id},
                            sort_keys=True).encode())
        h.update(self.triggers.tobytes())
        return h.hexdigest()

    def as_image_set(self) -> ImageSet:
        return ImageSet(self.triggers, self.labels)


def _pixels(x) -> np.ndarray:
    arr = x.pixels if isinstance(x, LabeledImage) else x
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def direct_canvas(a, b) -> np.ndarray:
    """Full-resolution 2H x 2W canvas: ``a`` top-left, ``b`` bottom-right, white elsewhere."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"base instances differ in shape: {a.shape} vs {b.shape}")
    h, w, c = a.shape
    canvas = np.full((2 * h, 2 * w, c), WHITE, dtype=np.uint8)
    canvas[:h, :w] = a
    canvas[h:, w:] = b
    return canvas


def downsample2x(canvas: np.ndarray) -> np.ndarray:
    """Area-average 2x2 blocks, rounding half up in exact integer arithmetic."""
    h2, w2, c = canvas.shape
    if h2 % 2 or w2 % 2:
        raise ValueError("canvas dimensions must be even")
    blocks = canvas.astype(np.int64).reshape(h2 // 2, 2, w2 // 2, 2, c).sum(axis=(1, 3))
    return ((blocks + 2) // 4).astype(np.uint8)


def fuse_direct(a, b, out_shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Quadrant composition of two instances, returned at the instances' native shape."""
    fused = downsample2x(direct_canvas(a, b))
    if out_shape is not None and tuple(out_shape) != fused.shape:
        raise ValueError(f"out_shape {tuple(out_shape)} differs from the native shape {fused.shape}")
    return fused


def fuse_invisible(a, b, r: float) -> np.ndarray:
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"transparency ratio must lie in [0, 1], got {r}")
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"base instances differ in shape: {a.shape} vs {b.shape}")
    # r is taken as its decimal value (denominator <= 1e9) and the blend is
    # rounded half-up in exact integer arithmetic
    ratio = Fraction(repr(float(r))).limit_denominator(10**9)
    num, den = ratio.numerator, ratio.denominator
    twice = 2 * (num * a.astype(np.int64) + (den - num) * b.astype(np.int64))
    return ((twice + den) // (2 * den)).astype(np.uint8)


def _class_order(labels: np.ndarray, cls: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.flatnonzero(labels == cls))


def sample_pairs(dataset: ImageSet, spec: TriggerSpec, n: int) -> list[tuple[int, int]]:
    """Base-instance index pairs for the first ``n`` triggers of ``spec``.

    Pairs are drawn without replacement from seeded per-class permutations, so
    any ``n`` yields a prefix-extension of a smaller ``n``.
    """
    rng = np.random.default_rng(spec.seed)
    order_a = _class_order(dataset.labels, spec.source_class_a, rng)
    order_b = _class_order(dataset.labels, spec.source_class_b, rng)
    for cls, order in ((spec.source_class_a, order_a), (spec.source_class_b, order_b)):
        if len(order) < n:
            raise InsufficientInstancesError(cls, len(order), n)
    return [(int(p), int(q)) for p, q in zip(order_a[:n], order_b[:n])]


def fuse_pair(dataset: ImageSet, spec: TriggerSpec, p: int, q: int) -> np.ndarray:
    a, b = dataset.images[p], dataset.images[q]
    if spec.mode == "direct":
        return fuse_direct(a, b)
    return fuse_invisible(a, b, spec.transparency_r)


def generate_triggers(dataset: ImageSet, spec: TriggerSpec, n: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    pairs = sample_pairs(dataset, spec, n)
    images = np.stack([fuse_pair(dataset, spec, p, q) for p, q in pairs]) if pairs else \
        np.empty((0, *dataset.shape), dtype=np.uint8)
    return images, pairs


def build_watermark_key(dataset: ImageSet, spec: TriggerSpec, dataset_id: str,
                        created_at: str | None = None) -> WatermarkKey:
    images, pairs = generate_triggers(dataset, spec, spec.count)
    kwargs = {"created_at": created_at} if created_at else {}
    return WatermarkKey(images, spec, tuple(pairs), dataset_id, **kwargs)


def extend_triggers(dataset: ImageSet, key: WatermarkKey, n: int) -> ImageSet:
    """``n`` triggers from the key's recipe; the first ``key.count`` equal the key's own."""
    if n <= len(key):
        return ImageSet(key.triggers[:n], key.labels[:n])
    images, _ = generate_triggers(dataset, key.spec, n)
    if not np.array_equal(images[: len(key)], key.triggers):
        raise ValueError("dataset does not reproduce this key; was it built from another source?")
    return ImageSet(images, np.full(n, key.target_class, dtype=np.int64))


# --- archive ---------------------------------------------------------------

def _png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    pil = Image.fromarray(img[..., 0] if img.shape[2] == 1 else img)
    pil.save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def _png_decode(data: bytes, channels: int) -> np.ndarray:
    arr = np.asarray(Image.open(io.BytesIO(data)), dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[2] != channels:
        raise KeyIntegrityError(f"decoded image has {arr.shape[2]} channels, expected {channels}")
    return arr


def _writestr(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def key_manifest(key: WatermarkKey) -> dict:
    return {
        "format_version": KEY_FORMAT_VERSION,
        "dataset_id": key.dataset_id,
        "created_at": key.created_at,
        "spec": key.spec.to_dict(),
        "target_class": key.target_class,
        "image_shape": list(key.triggers.shape[1:]),
        "provenance": [list(pq) for pq in key.provenance],
        "images": [
            {"file": f"images/{i:05d}.png", "sha256": hashlib.sha256(img.tobytes()).hexdigest()}
            for i, img in enumerate(key.triggers)
        ],
        "key_digest": key.digest(),
    }


def save_key(key: WatermarkKey, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = key_manifest(key)
    with zipfile.ZipFile(path, "w") as zf:
        _writestr(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        for entry, img in zip(manifest["images"], key.triggers):
            _writestr(zf, entry["file"], _png_bytes(img))
    return path


_REQUIRED = ("format_version", "dataset_id", "created_at", "spec", "target_class",
             "image_shape", "provenance", "images")


def _check_version(version: str, supported: str, what: str) -> None:
    try:
        major = int(str(version).split(".")[0])
    except ValueError:
        raise KeySchemaError(f"{what}: unparseable format_version {version!r}") from None
    if major > int(supported.split(".")[0]):
        raise KeySchemaError(f"{what}: format_version {version} is newer than supported {supported}")


def load_key(path: str | Path) -> WatermarkKey:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            missing = [f for f in _REQUIRED if f not in manifest]
            if missing:
                raise KeySchemaError(f"{path}: manifest missing fields {missing}")
            _check_version(manifest["format_version"], KEY_FORMAT_VERSION, str(path))
            shape = tuple(manifest["image_shape"])
            images = []
            for entry in manifest["images"]:
                img = _png_decode(zf.read(entry["file"]), shape[2])
                actual = hashlib.sha256(img.tobytes()).hexdigest()
                if img.shape != shape or actual != entry["sha256"]:
                    raise KeyIntegrityError(
                        f"{path}:{entry['file']}: checksum mismatch (manifest {entry['sha256']}, actual {actual})")
                images.append(img)
    except (zipfile.BadZipFile, EOFError, KeyError, OSError, json.JSONDecodeError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise KeyIntegrityError(f"{path}: unreadable key archive ({exc})") from exc
    spec_fields = dict(manifest["spec"])
    if spec_fields.get("target_class") != manifest["target_class"]:
        raise KeySchemaError(f"{path}: spec target_class disagrees with manifest target_class")
    try:
        spec = TriggerSpec(**spec_fields)
    except TypeError as exc:
        raise KeySchemaError(f"{path}: bad spec block ({exc})") from exc
    triggers = np.stack(images) if images else np.empty((0, *shape), dtype=np.uint8)
    key = WatermarkKey(triggers, spec, tuple(tuple(pq) for pq in manifest["provenance"]),
                       manifest["dataset_id"], manifest["created_at"])
    if "key_digest" in manifest and manifest["key_digest"] != key.digest():
        raise KeyIntegrityError(f"{path}: key digest mismatch")
    return key
