"""Dataset adapters and the on-disk cache.

Images are kept as raw uint8 arrays shaped (N, H, W, C); normalisation
happens inside the model input stage so trigger archives stay raw pixels.

Cache layout (root from ``$FUSEMARK_CACHE``, default ``~/.cache/fusemark``)::

    <root>/mnist/train-images-idx3-ubyte[.gz]  (+ the other three IDX files)
    <root>/cifar10/cifar-10-batches-py/...
    <root>/cifar100/cifar-100-python/...
    <root>/tiny-imagenet/tiny-imagenet-200/...
    <root>/<dataset>/checksums.json            written by ``ingest``
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import pickle
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(RuntimeError):
    """Dataset missing from the cache, or unknown id."""


class DatasetIntegrityError(DatasetError):
    """A cached file does not match its recorded checksum."""


@dataclass(frozen=True)
class DatasetInfo:
    dataset_id: str
    num_classes: int
    shape: tuple[int, int, int]  # (H, W, C)
    mean: tuple[float, ...]
    std: tuple[float, ...]
    train_size: int
    test_size: int
    fetch_hint: str


DATASETS: dict[str, DatasetInfo] = {
    "mnist": DatasetInfo(
        "mnist", 10, (28, 28, 1), (0.1307,), (0.3081,), 60000, 10000,
        "place the four MNIST IDX files (train/t10k images/labels, raw or .gz) in "
        "a directory and run `forge fetch --dataset mnist --from <dir>`; the "
        "`MNIST-dir` sdist on PyPI ships them",
    ),
    "cifar10": DatasetInfo(
        "cifar10", 10, (32, 32, 3), (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616),
        50000, 10000,
        "extract cifar-10-python.tar.gz and run "
        "`forge fetch --dataset cifar10 --from <dir containing cifar-10-batches-py>`",
    ),
    "cifar100": DatasetInfo(
        "cifar100", 100, (32, 32, 3), (0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762),
        50000, 10000,
        "extract cifar-100-python.tar.gz and run "
        "`forge fetch --dataset cifar100 --from <dir containing cifar-100-python>`",
    ),
    "tiny-imagenet": DatasetInfo(
        "tiny-imagenet", 200, (64, 64, 3), (0.4802, 0.4481, 0.3975), (0.2770, 0.2691, 0.2821),
        100000, 10000,
        "extract tiny-imagenet-200.zip and run "
        "`forge fetch --dataset tiny-imagenet --from <dir containing tiny-imagenet-200>`",
    ),
}

# sha256 of the decompressed canonical files
MNIST_FILES = {
    "train-images": ("ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db", 47040016),
    "train-labels": ("65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5", 60008),
    "t10k-images": ("0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7", 7840016),
    "t10k-labels": ("ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2", 10008),
}

# md5 of the python-pickle batches as distributed
CIFAR10_FILES = {
    "data_batch_1": "c99cafc152244af753f735de768cd75f",
    "data_batch_2": "d4bba439e000b95fd0a9bffe97cbabec",
    "data_batch_3": "54ebc095f3ab1f0389bbae665268c751",
    "data_batch_4": "634d18415352ddfa80567beed471001a",
    "data_batch_5": "482c414d41f54cd18b22e5b47cb7c3cb",
    "test_batch": "40351d587109b95175f43aff81a1287e",
}
CIFAR100_FILES = {
    "train": "16019d7e3df5f24257cddd939b257f8d",
    "test": "f0ef6b0ae62326f3e7ffdfab6717acfc",
}


@dataclass(frozen=True, eq=False)
class ImageSet:
    """A labelled image collection: ``images`` (N, H, W, C) uint8, ``labels`` (N,) int64."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ValueError(f"images must be uint8 (N, H, W, C), got {self.images.dtype} {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "ImageSet":
        index = np.asarray(index)
        return ImageSet(self.images[index], self.labels[index])

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class DatasetSplits:
    train: ImageSet
    test: ImageSet
    num_classes: int
    dataset_id: str

    @property
    def info(self) -> DatasetInfo:
        return DATASETS[self.dataset_id]


def cache_root() -> Path:
    return Path(os.environ.get("FUSEMARK_CACHE", Path.home() / ".cache" / "fusemark"))


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _file_md5(path: Path) -> str:
    return hashlib.md5(path.read_bytes()).hexdigest()


def _missing(dataset_id: str, where: Path) -> DatasetError:
    info = DATASETS[dataset_id]
    return DatasetError(f"dataset {dataset_id!r} not found under {where}; to install: {info.fetch_hint}")


def _find_mnist_file(folder: Path, stem: str) -> Path | None:
    base = stem.replace("-images", "-images-idx3-ubyte").replace("-labels", "-labels-idx1-ubyte")
    dotted = base.replace("-idx", ".idx")
    for name in (base, dotted, base + ".gz", dotted + ".gz"):
        if (folder / name).exists():
            return folder / name
    return None


def _read_mnist_file(path: Path, stem: str) -> bytes:
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    digest, size = MNIST_FILES[stem]
    if len(raw) != size or _sha256(raw) != digest:
        raise DatasetIntegrityError(f"{path}: checksum mismatch (expected sha256 {digest})")
    return raw


def _load_mnist(folder: Path) -> tuple[ImageSet, ImageSet]:
    blobs = {}
    for stem in MNIST_FILES:
        path = _find_mnist_file(folder, stem)
        if path is None:
            raise _missing("mnist", folder)
        blobs[stem] = _read_mnist_file(path, stem)

    def images(raw):
        n = int.from_bytes(raw[4:8], "big")
        return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 28, 28, 1).copy()

    def labels(raw):
        return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)

    return (
        ImageSet(images(blobs["train-images"]), labels(blobs["train-labels"])),
        ImageSet(images(blobs["t10k-images"]), labels(blobs["t10k-labels"])),
    )


def _unpickle(path: Path) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def _cifar_batches(folder: Path, files: dict[str, str], names: list[str], label_key: str) -> ImageSet:
    imgs, labels = [], []
    for name in names:
        path = folder / name
        if _file_md5(path) != files[name]:
            raise DatasetIntegrityError(f"{path}: checksum mismatch (expected md5 {files[name]})")
        batch = _unpickle(path)
        imgs.append(np.asarray(batch["data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        labels.append(np.asarray(batch[label_key], dtype=np.int64))
    return ImageSet(np.ascontiguousarray(np.concatenate(imgs)), np.concatenate(labels))


def _load_cifar10(folder: Path) -> tuple[ImageSet, ImageSet]:
    sub = folder / "cifar-10-batches-py"
    if not sub.is_dir():
        raise _missing("cifar10", folder)
    train = _cifar_batches(sub, CIFAR10_FILES, [f"data_batch_{i}" for i in range(1, 6)], "labels")
    test = _cifar_batches(sub, CIFAR10_FILES, ["test_batch"], "labels")
    return train, test


def _load_cifar100(folder: Path) -> tuple[ImageSet, ImageSet]:
    sub = folder / "cifar-100-python"
    if not sub.is_dir():
        raise _missing("cifar100", folder)
    train = _cifar_batches(sub, CIFAR100_FILES, ["train"], "fine_labels")
    test = _cifar_batches(sub, CIFAR100_FILES, ["test"], "fine_labels")
    return train, test


def _load_tiny_imagenet(folder: Path) -> tuple[ImageSet, ImageSet]:
    from PIL import Image

    sub = folder / "tiny-imagenet-200"
    if not sub.is_dir():
        raise _missing("tiny-imagenet", folder)
    _check_manifest(folder)
    wnids = sorted((sub / "wnids.txt").read_text().split())
    index = {w: i for i, w in enumerate(wnids)}

    def read(paths):
        return np.stack([np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8) for p in paths])

    train_paths, train_labels = [], []
    for w in wnids:
        for p in sorted((sub / "train" / w / "images").glob("*.JPEG")):
            train_paths.append(p)
            train_labels.append(index[w])
    val_paths, val_labels = [], []
    for line in (sub / "val" / "val_annotations.txt").read_text().splitlines():
        name, w = line.split("\t")[:2]
        val_paths.append(sub / "val" / "images" / name)
        val_labels.append(index[w])
    return (
        ImageSet(read(train_paths), np.asarray(train_labels, dtype=np.int64)),
        ImageSet(read(val_paths), np.asarray(val_labels, dtype=np.int64)),
    )


def _check_manifest(folder: Path) -> None:
    manifest = folder / "checksums.json"
    if not manifest.exists():
        return
    for rel, digest in json.loads(manifest.read_text())["sha256"].items():
        if _sha256((folder / rel).read_bytes()) != digest:
            raise DatasetIntegrityError(f"{folder / rel}: checksum mismatch against {manifest}")


_LOADERS = {
    "mnist": _load_mnist,
    "cifar10": _load_cifar10,
    "cifar100": _load_cifar100,
    "tiny-imagenet": _load_tiny_imagenet,
}

_MEMO: dict[tuple[str, str], DatasetSplits] = {}


def dataset_info(dataset_id: str) -> DatasetInfo:
    try:
        return DATASETS[dataset_id]
    except KeyError:
        raise DatasetError(f"unknown dataset {dataset_id!r}; known: {sorted(DATASETS)}") from None


def load_dataset(dataset_id: str, root: str | Path | None = None) -> DatasetSplits:
    """Load and checksum-verify a dataset from the cache.

    Results are memoised per (dataset, root); the arrays are made read-only
    so shared copies cannot be mutated by callers.
    """
    info = dataset_info(dataset_id)
    folder = Path(root) if root is not None else cache_root() / dataset_id
    memo_key = (dataset_id, str(folder.resolve()))
    if memo_key in _MEMO:
        return _MEMO[memo_key]
    if not folder.is_dir():
        raise _missing(dataset_id, folder)
    train, test = _LOADERS[dataset_id](folder)
    for split in (train, test):
        split.images.setflags(write=False)
        split.labels.setflags(write=False)
        if split.labels.min() < 0 or split.labels.max() >= info.num_classes:
            raise DatasetIntegrityError(f"{dataset_id}: labels outside [0, {info.num_classes})")
    splits = DatasetSplits(train, test, info.num_classes, dataset_id)
    _MEMO[memo_key] = splits
    return splits


def dataset_available(dataset_id: str) -> bool:
    try:
        load_dataset(dataset_id)
    except DatasetError:
        return False
    return True


def ingest(dataset_id: str, source: str | Path, root: str | Path | None = None) -> Path:
    """Copy a locally obtained dataset into the cache and write its checksum manifest."""
    dataset_info(dataset_id)
    source = Path(source)
    dest = Path(root) if root is not None else cache_root() / dataset_id
    dest.mkdir(parents=True, exist_ok=True)
    if dataset_id == "mnist":
        for stem in MNIST_FILES:
            path = _find_mnist_file(source, stem)
            if path is None:
                raise _missing("mnist", source)
            _read_mnist_file(path, stem)
            shutil.copy2(path, dest / path.name)
    else:
        sub = {"cifar10": "cifar-10-batches-py", "cifar100": "cifar-100-python",
               "tiny-imagenet": "tiny-imagenet-200"}[dataset_id]
        if not (source / sub).is_dir():
            raise _missing(dataset_id, source)
        shutil.copytree(source / sub, dest / sub, dirs_exist_ok=True)
    digests = {
        str(p.relative_to(dest)): _sha256(p.read_bytes())
        for p in sorted(dest.rglob("*")) if p.is_file() and p.name != "checksums.json"
    }
    (dest / "checksums.json").write_text(json.dumps({"dataset_id": dataset_id, "sha256": digests}, indent=1))
    _MEMO.clear()
    load_dataset(dataset_id, dest)
    return dest
