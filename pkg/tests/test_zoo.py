import shutil

import numpy as np
import pytest
import torch

from fusemark.data import (
    DatasetError,
    DatasetIntegrityError,
    ImageSet,
    cache_root,
    dataset_info,
    ingest,
    load_dataset,
)
from fusemark.zoo import (
    ArchMismatchError,
    ArchSpec,
    build_model,
    count_parameters,
    evaluate,
    load_model,
    predict,
    save_model,
    weights_digest,
)

from conftest import needs_mnist, synthetic_set


def lenet_param_oracle(c_in, classes, size):
    conv = lambda cin, cout, k: cin * cout * k * k + cout
    fc = lambda i, o: i * o + o
    spatial = ((size + (4 if size == 28 else 0) - 4) // 2 - 4) // 2
    return conv(c_in, 6, 5) + conv(6, 16, 5) + fc(16 * spatial * spatial, 120) + fc(120, 84) + fc(84, classes)


def test_lenet_parameter_count():
    assert lenet_param_oracle(1, 10, 28) == 61706
    model = build_model(ArchSpec("lenet5", 10, (28, 28, 1)))
    assert count_parameters(model) == 61706
    assert count_parameters(build_model(ArchSpec("lenet5", 10, (32, 32, 3)))) == lenet_param_oracle(3, 10, 32)


@pytest.mark.parametrize("arch,shape,classes", [
    ("lenet5", (28, 28, 1), 10), ("resnet18", (32, 32, 3), 10), ("vgg16", (32, 32, 3), 100)])
def test_forward_shapes_and_seed_determinism(arch, shape, classes):
    spec = ArchSpec(arch, classes, shape)
    a, b = build_model(spec, seed=3), build_model(spec, seed=3)
    assert weights_digest(a) == weights_digest(b)
    assert weights_digest(a) != weights_digest(build_model(spec, seed=4))
    a.eval()
    out = a(torch.zeros(2, shape[2], shape[0], shape[1]))
    assert out.shape == (2, classes)


def test_arch_dataset_mismatch():
    with pytest.raises(ArchMismatchError):
        build_model(ArchSpec("lenet5", 100, (28, 28, 1)), dataset_id="mnist")
    with pytest.raises(ArchMismatchError):
        build_model(ArchSpec("lenet5", 10, (32, 32, 3)), dataset_id="mnist")


def test_unknown_arch():
    with pytest.raises(ValueError):
        build_model(ArchSpec("alexnet", 10, (28, 28, 1)))


class Constant(torch.nn.Module):
    def __init__(self, label, classes=10):
        super().__init__()
        self.label, self.classes = label, classes

    def forward(self, x):
        out = torch.zeros(len(x), self.classes)
        out[:, self.label] = 1.0
        return out


def test_constant_predictor_accuracy():
    data = synthetic_set(n_per_class=7, n_classes=10)
    assert evaluate(Constant(3), data) == pytest.approx(0.1)


def test_evaluate_empty_split():
    with pytest.raises(ValueError):
        evaluate(Constant(0), ImageSet(np.zeros((0, 8, 8, 1), np.uint8), np.zeros(0, np.int64)))


def test_predict_restores_mode_and_weights():
    model = build_model(ArchSpec("resnet18", 10, (32, 32, 3)), seed=0)
    model.train()
    digest = weights_digest(model)
    x = synthetic_set(n_per_class=2, n_classes=10, shape=(32, 32, 3)).images
    a, b = predict(model, x), predict(model, x)
    assert np.array_equal(a, b)
    assert model.training
    assert weights_digest(model) == digest  # batch-norm running stats untouched


def test_model_file_round_trip(tmp_path):
    model = build_model(ArchSpec("lenet5", 10, (28, 28, 1)), seed=5)
    save_model(model, tmp_path / "m.pt", {"note": "x"})
    loaded, manifest = load_model(tmp_path / "m.pt", with_manifest=True)
    assert weights_digest(loaded) == weights_digest(model)
    assert manifest == {"note": "x"}
    assert loaded.spec == model.spec


def test_model_file_newer_version(tmp_path):
    model = build_model(ArchSpec("lenet5", 10, (28, 28, 1)))
    torch.save({"header": {"format_version": "9.0", "arch_id": "lenet5", "num_classes": 10,
                           "input_shape": [28, 28, 1]}, "manifest": {}, "state_dict": model.state_dict()},
               tmp_path / "m.pt")
    with pytest.raises(ValueError):
        load_model(tmp_path / "m.pt")


# --- datasets --------------------------------------------------------------

def test_class_counts_registry():
    assert {d: dataset_info(d).num_classes for d in ("mnist", "cifar10", "cifar100", "tiny-imagenet")} == {
        "mnist": 10, "cifar10": 10, "cifar100": 100, "tiny-imagenet": 200}


def test_unknown_dataset():
    with pytest.raises(DatasetError):
        load_dataset("svhn")


def test_missing_dataset_has_fetch_instructions(tmp_path):
    with pytest.raises(DatasetError) as err:
        load_dataset("cifar10", root=tmp_path / "nothing")
    assert "install" in str(err.value)


@needs_mnist
def test_mnist_counts(mnist):
    assert mnist.num_classes == 10
    assert len(mnist.train) == 60000 and len(mnist.test) == 10000
    assert mnist.train.shape == (28, 28, 1)
    assert set(np.unique(mnist.train.labels)) == set(range(10))


@needs_mnist
def test_mnist_corruption_detected(tmp_path):
    src = cache_root() / "mnist"
    dest = ingest("mnist", src, tmp_path / "copy")
    assert load_dataset("mnist", root=dest).train.labels.shape == (60000,)
    target = next(p for p in dest.iterdir() if p.name.startswith("t10k-labels"))
    raw = bytearray(target.read_bytes())
    raw[-1] ^= 0xFF
    target.write_bytes(bytes(raw))
    fresh = tmp_path / "fresh"
    shutil.copytree(dest, fresh)
    with pytest.raises(DatasetIntegrityError):
        load_dataset("mnist", root=fresh)
