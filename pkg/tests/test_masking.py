import copy

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from fusemark.data import ImageSet
from fusemark.masking import (
    MaskConfig,
    MixSpec,
    TrainConfig,
    TrainingDiverged,
    conv_weight_names,
    make_optimizer,
    masked_forward,
    masked_step,
    mix_training_set,
    sample_mask,
    sample_masks,
    train_epochs,
)
from fusemark.triggers import TriggerSpec, build_watermark_key
from fusemark.zoo import ArchSpec, build_model, evaluate, weights_digest

from conftest import synthetic_set


def test_sample_mask_p0_all_ones():
    assert torch.equal(sample_mask((3, 4), 0.0), torch.ones(3, 4))


def test_sample_mask_concentration():
    # Binomial(1e6, 0.5): sigma = 5e-4, so +-0.002 is a 4-sigma band
    m = sample_mask((1000, 1000), 0.5, torch.Generator().manual_seed(0))
    zero_frac = float((m == 0).float().mean())
    assert abs(zero_frac - 0.5) <= 0.002
    assert set(torch.unique(m).tolist()) == {0.0, 1.0}


def test_sample_mask_deterministic():
    a = sample_mask((50, 50), 0.3, torch.Generator().manual_seed(5))
    b = sample_mask((50, 50), 0.3, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


@pytest.mark.parametrize("p", [1.0, 1.5, -0.1])
def test_sample_mask_rejects_p(p):
    with pytest.raises(ValueError):
        sample_mask((2,), p)


def affine(w, b=0.0):
    layer = nn.Linear(len(w), 1)
    with torch.no_grad():
        layer.weight.copy_(torch.tensor([w], dtype=torch.float32))
        layer.bias.fill_(b)
    return layer


def test_masked_forward_scalar_example():
    layer = affine([2.0])
    out = masked_forward(layer, torch.tensor([[1.0]]), {"weight": torch.ones(1, 1)}, 0.5)
    assert out.item() == pytest.approx(4.0)


def test_masked_forward_identity_case():
    model = build_model(ArchSpec("lenet5", 10, (28, 28, 1)), seed=0)
    x = torch.rand(4, 1, 28, 28) * 255
    masks = {n: torch.ones_like(dict(model.named_parameters())[n]) for n in conv_weight_names(model)}
    model.eval()
    assert torch.equal(masked_forward(model, x, masks, 0.0), model(x))


def test_masked_forward_leaves_biases_and_unscoped_layers():
    model = nn.Sequential(nn.Linear(3, 3), nn.Linear(3, 1))
    x = torch.randn(2, 3)
    masks = {"0.weight": torch.zeros(3, 3)}
    out = masked_forward(model, x, masks, 0.5)
    # first layer reduces to its bias; second layer untouched
    expected = model[1](model[0].bias.expand(2, 3))
    torch.testing.assert_close(out, expected)


def test_masked_forward_unbiased_monte_carlo():
    torch.manual_seed(0)
    layer = nn.Linear(64, 16)
    x = torch.randn(1, 64)
    with torch.no_grad():
        reference = layer(x) - layer.bias
    gen = torch.Generator().manual_seed(1)
    total = torch.zeros_like(reference)
    n = 10_000
    with torch.no_grad():
        for _ in range(n):
            total += masked_forward(layer, x, {"weight": sample_mask(layer.weight.shape, 0.3, gen)}, 0.3) - layer.bias
    mean = total / n
    rel = float((mean - reference).norm() / reference.norm())
    assert rel < 0.01


def test_masked_forward_rejects_shape_mismatch():
    layer = nn.Linear(3, 2)
    with pytest.raises(ValueError):
        masked_forward(layer, torch.randn(1, 3), {"weight": torch.ones(3, 3)}, 0.1)
    with pytest.raises(ValueError):
        masked_forward(layer, torch.randn(1, 3), {"weight": torch.full((2, 3), 0.5)}, 0.1)


def test_masked_step_scalar_example_matches_finite_difference():
    # L(w) = (w_eff * x - y)^2 with w_eff = w * M / (1 - p); w=1, x=1, y=0, M=1, p=0.5, lr=0.1
    layer = nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        layer.weight.fill_(1.0)
    opt = torch.optim.SGD(layer.parameters(), lr=0.1)

    def loss_fn(pred, target):
        return ((pred - target) ** 2).sum()

    masked_step(layer, opt, torch.tensor([[1.0]]), torch.tensor([[0.0]]), {"weight": torch.ones(1, 1)}, 0.5, loss_fn)

    def loss_of(w):
        return (w * 1.0 / 0.5 * 1.0 - 0.0) ** 2

    h = 1e-6
    grad = (loss_of(1.0 + h) - loss_of(1.0 - h)) / (2 * h)  # = 8
    assert grad == pytest.approx(8.0, rel=1e-6)
    assert layer.weight.item() == pytest.approx(1.0 - 0.1 * grad, abs=1e-5)  # 0.2


@pytest.mark.parametrize("opt_name", ["sgd", "sgd_momentum", "adam"])
def test_masked_step_freezes_masked_weights_bit_exact(opt_name):
    torch.manual_seed(0)
    model = build_model(ArchSpec("lenet5", 10, (28, 28, 1)), seed=3)
    opt = make_optimizer(model, opt_name, 0.05, weight_decay=5e-4)
    gen = torch.Generator().manual_seed(0)
    names = conv_weight_names(model)
    params = dict(model.named_parameters())
    x = torch.rand(16, 1, 28, 28) * 255
    y = torch.randint(0, 10, (16,))
    for _ in range(4):  # several steps so optimiser state is non-trivial
        masks = sample_masks(model, names, 0.4, gen)
        before = {n: params[n].detach().clone() for n in names}
        masked_step(model, opt, x, y, masks, 0.4)
        for n in names:
            frozen = masks[n] == 0
            assert torch.equal(params[n][frozen], before[n][frozen])
            assert not torch.equal(params[n][~frozen], before[n][~frozen])


def test_masked_step_identity_equals_standard_step():
    torch.manual_seed(0)
    a = build_model(ArchSpec("lenet5", 10, (28, 28, 1)), seed=3)
    b = copy.deepcopy(a)
    x = torch.rand(8, 1, 28, 28) * 255
    y = torch.randint(0, 10, (8,))
    opt_a = torch.optim.SGD(a.parameters(), lr=0.1, momentum=0.9)
    opt_b = torch.optim.SGD(b.parameters(), lr=0.1, momentum=0.9)
    masks = {n: torch.ones_like(dict(a.named_parameters())[n]) for n in conv_weight_names(a)}
    for _ in range(3):
        masked_step(a, opt_a, x, y, masks, 0.0)
        opt_b.zero_grad()
        F.cross_entropy(b(x), y).backward()
        opt_b.step()
    assert weights_digest(a) == weights_digest(b)


def test_p0_training_reproduces_standard_loop():
    data = synthetic_set(n_per_class=16, n_classes=10, shape=(28, 28, 1))
    cfg = TrainConfig(epochs=2, learning_rate=0.05, batch_size=32, optimizer="sgd_momentum", weight_decay=0.0,
                      lr_schedule="constant", mask=MaskConfig(0.0), mix=None, seed=4)
    spec = ArchSpec("lenet5", 10, (28, 28, 1))
    a = build_model(spec, seed=1)
    b = copy.deepcopy(a)
    train_epochs(a, data, cfg)

    opt = torch.optim.SGD(b.parameters(), lr=0.05, momentum=0.9)
    gen = torch.Generator().manual_seed(4)
    x_all = torch.from_numpy(data.images).permute(0, 3, 1, 2).float()
    y_all = torch.from_numpy(data.labels)
    for _ in range(2):
        b.train()
        perm = torch.randperm(len(data), generator=gen)
        for i in range(0, len(data), 32):
            idx = perm[i:i + 32]
            opt.zero_grad()
            F.cross_entropy(b(x_all[idx]), y_all[idx]).backward()
            opt.step()
    assert weights_digest(a) == weights_digest(b)


def test_masking_only_touches_conv_layers():
    model = build_model(ArchSpec("lenet5", 10, (28, 28, 1)), seed=0)
    assert conv_weight_names(model) == ["net.conv1.weight", "net.conv2.weight"]


def test_inference_is_pure():
    data = synthetic_set(n_per_class=5, n_classes=10, shape=(28, 28, 1))
    model = build_model(ArchSpec("lenet5", 10, (28, 28, 1)), seed=0)
    digest = weights_digest(model)
    a = evaluate(model, data)
    b = evaluate(model, data)
    assert a == b and weights_digest(model) == digest


def test_mask_config_validation():
    with pytest.raises(ValueError):
        MaskConfig(drop_probability=1.0)
    with pytest.raises(ValueError):
        MaskConfig(layer_scope=())
    with pytest.raises(ValueError):
        MaskConfig(strategy="global")
    with pytest.raises(ValueError):
        MixSpec(0.0)
    with pytest.raises(ValueError):
        MixSpec(1.0)


def test_bias_cannot_be_scoped():
    model = build_model(ArchSpec("lenet5", 10, (28, 28, 1)), seed=0)
    data = synthetic_set(n_per_class=2, n_classes=10, shape=(28, 28, 1))
    cfg = TrainConfig(epochs=1, mask=MaskConfig(0.3, layer_scope=("net.conv1.bias",)), mix=None)
    with pytest.raises(ValueError):
        train_epochs(model, data, cfg)


# --- mixing ----------------------------------------------------------------

@pytest.fixture(scope="module")
def big_set():
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(60000, 2, 2, 1), dtype=np.uint8)
    return ImageSet(images, np.repeat(np.arange(10), 6000).astype(np.int64))


def test_mix_counts(big_set):
    key = build_watermark_key(big_set, TriggerSpec(0, 3, 1, count=90), "big")
    mixed = mix_training_set(big_set, key, 0.01, seed=0)
    assert len(mixed.data) == 60000
    assert int(mixed.is_trigger.sum()) == 600
    assert (mixed.data.labels[mixed.is_trigger] == 1).all()
    # the key's own triggers are part of the mixed set
    trig = {img.tobytes() for img in mixed.data.images[mixed.is_trigger]}
    assert all(t.tobytes() in trig for t in key.triggers)


def test_mix_below_one_percent(big_set):
    key = build_watermark_key(big_set, TriggerSpec(0, 3, 1, count=90), "big")
    mixed = mix_training_set(big_set, key, 0.005, seed=0)
    assert mixed.is_trigger.mean() < 0.01


def test_mix_deterministic(big_set):
    key = build_watermark_key(big_set, TriggerSpec(0, 3, 1, count=90), "big")
    a = mix_training_set(big_set, key, 0.002, seed=9)
    b = mix_training_set(big_set, key, 0.002, seed=9)
    c = mix_training_set(big_set, key, 0.002, seed=10)
    assert np.array_equal(a.data.images, b.data.images) and np.array_equal(a.data.labels, b.data.labels)
    assert not np.array_equal(a.data.labels, c.data.labels)


@pytest.mark.parametrize("e", [0.0, 1.0, -0.1])
def test_mix_rejects_fraction(big_set, e):
    key = build_watermark_key(big_set, TriggerSpec(0, 3, 1, count=5), "big")
    with pytest.raises(ValueError):
        mix_training_set(big_set, key, e, seed=0)


def test_divergence_aborts_with_log(tmp_path):
    data = synthetic_set(n_per_class=8, n_classes=10, shape=(28, 28, 1))
    model = build_model(ArchSpec("lenet5", 10, (28, 28, 1)), seed=0)
    cfg = TrainConfig(epochs=3, learning_rate=1e30, optimizer="sgd", weight_decay=0.0, mask=MaskConfig(0.3), mix=None)
    log = tmp_path / "log.jsonl"
    with pytest.raises(TrainingDiverged) as err:
        train_epochs(model, data, cfg, log_path=log)
    assert err.value.history
    assert log.read_text().strip()
