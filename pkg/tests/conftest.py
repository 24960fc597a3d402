import numpy as np
import pytest
import torch

from fusemark.data import ImageSet, dataset_available, load_dataset

torch.set_num_threads(1)

HAVE_MNIST = dataset_available("mnist")
needs_mnist = pytest.mark.skipif(not HAVE_MNIST, reason="MNIST not in the dataset cache (see README)")


@pytest.fixture(scope="session")
def mnist():
    if not HAVE_MNIST:
        pytest.skip("MNIST not in the dataset cache")
    return load_dataset("mnist")


def synthetic_set(n_per_class=20, n_classes=4, shape=(8, 8, 1), seed=0) -> ImageSet:
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n_per_class * n_classes, *shape), dtype=np.uint8)
    labels = np.repeat(np.arange(n_classes), n_per_class).astype(np.int64)
    return ImageSet(images, labels)


@pytest.fixture
def toy_set():
    return synthetic_set()


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool | None, detail: str) -> None:
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"criterion {number}: {status} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
