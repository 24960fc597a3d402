import itertools
import zipfile
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusemark.triggers import (
    InsufficientInstancesError,
    KeyIntegrityError,
    KeySchemaError,
    LabeledImage,
    TriggerSpec,
    build_watermark_key,
    direct_canvas,
    extend_triggers,
    fuse_direct,
    fuse_invisible,
    load_key,
    save_key,
)

from conftest import synthetic_set


def half_up(x: Fraction) -> int:
    # floor(x + 1/2) in exact rational arithmetic
    return (x.numerator * 2 + x.denominator) // (2 * x.denominator)


def blend_oracle(a, b, r: float) -> np.ndarray:
    rf = Fraction(repr(r))
    out = np.empty(a.shape, dtype=np.int64)
    for idx in np.ndindex(a.shape):
        out[idx] = half_up(rf * int(a[idx]) + (1 - rf) * int(b[idx]))
    return out


def image_strategy(h=4, w=4, c=1):
    return arrays(np.uint8, (h, w, c))


# --- direct fusion ---------------------------------------------------------

def test_direct_example_2x2():
    a = np.zeros((2, 2, 1), np.uint8)
    b = np.full((2, 2, 1), 9, np.uint8)
    canvas = direct_canvas(a, b)
    assert canvas.shape == (4, 4, 1)
    assert (canvas[:2, :2] == 0).all() and (canvas[2:, 2:] == 9).all()
    assert (canvas[:2, 2:] == 255).all() and (canvas[2:, :2] == 255).all()
    fused = fuse_direct(a, b, out_shape=(2, 2, 1))
    np.testing.assert_array_equal(fused[..., 0], [[0, 255], [255, 9]])


def test_direct_same_image_symmetric():
    img = np.arange(16, dtype=np.uint8).reshape(4, 4, 1)
    canvas = direct_canvas(img, img)
    np.testing.assert_array_equal(canvas[:4, :4], canvas[4:, 4:])


def test_direct_accepts_labeled_images():
    a = LabeledImage(np.zeros((2, 2, 3), np.uint8), 0)
    b = LabeledImage(np.ones((2, 2, 3), np.uint8), 3)
    assert fuse_direct(a, b).shape == (2, 2, 3)
    assert (direct_canvas(a, b)[:2, 2:] == 255).all()  # all three channels white


@pytest.mark.parametrize("h,w,c", [(1, 1, 1), (2, 3, 1), (3, 3, 3), (5, 2, 3)])
def test_direct_quadrants_exhaustive_small(h, w, c):
    rng = np.random.default_rng(h * 100 + w * 10 + c)
    a = rng.integers(0, 256, (h, w, c), dtype=np.uint8)
    b = rng.integers(0, 256, (h, w, c), dtype=np.uint8)
    canvas = direct_canvas(a, b)
    for y, x, ch in itertools.product(range(2 * h), range(2 * w), range(c)):
        if y < h and x < w:
            expected = a[y, x, ch]
        elif y >= h and x >= w:
            expected = b[y - h, x - w, ch]
        else:
            expected = 255
        assert canvas[y, x, ch] == expected
    fused = fuse_direct(a, b)
    assert fused.shape == (h, w, c)
    for y, x, ch in itertools.product(range(h), range(w), range(c)):
        block = [int(canvas[2 * y + dy, 2 * x + dx, ch]) for dy in (0, 1) for dx in (0, 1)]
        assert fused[y, x, ch] == half_up(Fraction(sum(block), 4))


def test_direct_rejects_mismatch_and_bad_out_shape():
    with pytest.raises(ValueError):
        fuse_direct(np.zeros((2, 2, 1), np.uint8), np.zeros((3, 3, 1), np.uint8))
    with pytest.raises(ValueError):
        fuse_direct(np.zeros((2, 2, 1), np.uint8), np.zeros((2, 2, 1), np.uint8), out_shape=(4, 4, 1))


@given(image_strategy(3, 5, 3), image_strategy(3, 5, 3))
def test_direct_quadrant_property(a, b):
    canvas = direct_canvas(a, b)
    assert (canvas[:3, 5:] == 255).all() and (canvas[3:, :5] == 255).all()
    np.testing.assert_array_equal(canvas[:3, :5], a)
    np.testing.assert_array_equal(canvas[3:, 5:], b)


# --- invisible fusion ------------------------------------------------------

@pytest.mark.parametrize("a,b,r,expected", [(100, 200, 0.5, 150), (100, 200, 0.7, 130), (1, 2, 0.5, 2), (0, 255, 0.5, 128)])
def test_invisible_arithmetic(a, b, r, expected):
    out = fuse_invisible(np.full((1, 1, 1), a, np.uint8), np.full((1, 1, 1), b, np.uint8), r)
    assert out[0, 0, 0] == expected


def test_invisible_boundaries():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 256, (5, 5, 3), dtype=np.uint8)
    b = rng.integers(0, 256, (5, 5, 3), dtype=np.uint8)
    np.testing.assert_array_equal(fuse_invisible(a, b, 1.0), a)
    np.testing.assert_array_equal(fuse_invisible(a, b, 0.0), b)
    assert fuse_invisible(a, b, 0.3).shape == a.shape


@pytest.mark.parametrize("r", [-0.1, 1.01])
def test_invisible_rejects_ratio(r):
    with pytest.raises(ValueError):
        fuse_invisible(np.zeros((1, 1, 1), np.uint8), np.zeros((1, 1, 1), np.uint8), r)


@pytest.mark.parametrize("r", [0.0, 0.1, 0.25, 0.5, 0.7, 0.9, 1.0])
def test_invisible_exhaustive_pixel_pairs(r):
    # every (a, b) pixel pair on a 256 x 256 grid
    a = np.repeat(np.arange(256, dtype=np.uint8), 256).reshape(256, 256, 1)
    b = np.tile(np.arange(256, dtype=np.uint8), 256).reshape(256, 256, 1)
    out = fuse_invisible(a, b, r).astype(np.int64)
    expected = blend_oracle(a[:: 17, :, :], b[:: 17, :, :], r)
    np.testing.assert_array_equal(out[:: 17], expected)
    # and the full grid against float64 arithmetic away from .5 ties
    blend = r * a.astype(np.float64) + (1 - r) * b.astype(np.float64)
    frac = blend - np.floor(blend)
    safe = np.abs(frac - 0.5) > 1e-6
    np.testing.assert_array_equal(out[safe], np.floor(blend + 0.5)[safe])


@settings(max_examples=60)
@given(image_strategy(3, 3, 3), image_strategy(3, 3, 3), st.integers(0, 10**6).map(lambda k: k / 10**6))
def test_invisible_blend_exact_and_in_hull(a, b, r):
    out = fuse_invisible(a, b, r)
    np.testing.assert_array_equal(out, blend_oracle(a, b, r))
    assert (out >= np.minimum(a, b)).all() and (out <= np.maximum(a, b)).all()


# --- spec / key ------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(source_class_a=0, source_class_b=0, target_class=1),
    dict(source_class_a=0, source_class_b=3, target_class=3),
    dict(source_class_a=0, source_class_b=3, target_class=0),
    dict(source_class_a=0, source_class_b=3, target_class=1, transparency_r=1.5),
    dict(source_class_a=0, source_class_b=3, target_class=1, count=0),
    dict(source_class_a=0, source_class_b=3, target_class=1, mode="stamp"),
])
def test_trigger_spec_invariants(kwargs):
    with pytest.raises(ValueError):
        TriggerSpec(**kwargs)


@pytest.mark.parametrize("mode", ["direct", "invisible"])
def test_key_build_is_deterministic(toy_set, mode):
    spec = TriggerSpec(0, 2, 1, mode=mode, transparency_r=0.7, count=15, seed=11)
    k1 = build_watermark_key(toy_set, spec, "toy", created_at="2024-01-01T00:00:00+00:00")
    k2 = build_watermark_key(toy_set, spec, "toy", created_at="2024-01-01T00:00:00+00:00")
    assert k1 == k2
    assert k1.triggers.tobytes() == k2.triggers.tobytes()
    assert len(k1) == 15 and (k1.labels == 1).all()
    assert all(img.label == 1 for img in k1)
    for (p, q), trig in zip(k1.provenance, k1.triggers):
        assert toy_set.labels[p] == 0 and toy_set.labels[q] == 2
        expected = fuse_direct(toy_set.images[p], toy_set.images[q]) if mode == "direct" else \
            fuse_invisible(toy_set.images[p], toy_set.images[q], 0.7)
        np.testing.assert_array_equal(trig, expected)
    # without replacement within a key
    assert len({p for p, _ in k1.provenance}) == 15 and len({q for _, q in k1.provenance}) == 15


def test_key_differs_with_seed(toy_set):
    k1 = build_watermark_key(toy_set, TriggerSpec(0, 2, 1, count=10, seed=1), "toy")
    k2 = build_watermark_key(toy_set, TriggerSpec(0, 2, 1, count=10, seed=2), "toy")
    assert k1.provenance != k2.provenance


def test_key_insufficient_instances_names_class(toy_set):
    with pytest.raises(InsufficientInstancesError) as err:
        build_watermark_key(toy_set, TriggerSpec(0, 2, 1, count=21), "toy")
    assert err.value.class_index == 0
    assert "class 0" in str(err.value)


def test_extend_triggers_keeps_prefix(toy_set):
    key = build_watermark_key(toy_set, TriggerSpec(0, 2, 1, count=5, seed=3), "toy")
    ext = extend_triggers(toy_set, key, 12)
    assert len(ext) == 12 and (ext.labels == 1).all()
    np.testing.assert_array_equal(ext.images[:5], key.triggers)
    with pytest.raises(ValueError):
        extend_triggers(synthetic_set(seed=99), key, 12)


def test_key_is_immutable(toy_set):
    key = build_watermark_key(toy_set, TriggerSpec(0, 2, 1, count=5), "toy")
    with pytest.raises(ValueError):
        key.triggers[0, 0, 0, 0] = 1


# --- archive ---------------------------------------------------------------

@pytest.mark.parametrize("shape", [(8, 8, 1), (6, 6, 3)])
def test_key_round_trip(tmp_path, shape):
    data = synthetic_set(shape=shape)
    key = build_watermark_key(data, TriggerSpec(1, 3, 0, mode="invisible", transparency_r=0.9, count=7), "toy")
    path = save_key(key, tmp_path / "key.zip")
    loaded = load_key(path)
    assert loaded == key
    assert loaded.triggers.tobytes() == key.triggers.tobytes()
    assert loaded.digest() == key.digest()


def test_key_archive_bytes_stable(tmp_path, toy_set):
    key = build_watermark_key(toy_set, TriggerSpec(0, 2, 1, count=4), "toy", created_at="2024-01-01T00:00:00+00:00")
    a = save_key(key, tmp_path / "a.zip").read_bytes()
    b = save_key(key, tmp_path / "b.zip").read_bytes()
    assert a == b


def test_truncated_archive_is_integrity_error(tmp_path, toy_set):
    key = build_watermark_key(toy_set, TriggerSpec(0, 2, 1, count=4), "toy")
    path = save_key(key, tmp_path / "key.zip")
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(KeyIntegrityError):
        load_key(path)


def _rewrite(path, out, edit_manifest=None, replace=None):
    import json

    with zipfile.ZipFile(path) as src, zipfile.ZipFile(out, "w") as dst:
        for info in src.infolist():
            data = src.read(info.filename)
            if info.filename == "manifest.json" and edit_manifest:
                m = json.loads(data)
                edit_manifest(m)
                data = json.dumps(m).encode()
            if replace and info.filename in replace:
                data = replace[info.filename]
            dst.writestr(info.filename, data)


def test_missing_target_class_is_schema_error(tmp_path, toy_set):
    key = build_watermark_key(toy_set, TriggerSpec(0, 2, 1, count=4), "toy")
    path = save_key(key, tmp_path / "key.zip")
    _rewrite(path, tmp_path / "bad.zip", edit_manifest=lambda m: m.pop("target_class"))
    with pytest.raises(KeySchemaError, match="target_class"):
        load_key(tmp_path / "bad.zip")


def test_newer_major_version_rejected(tmp_path, toy_set):
    key = build_watermark_key(toy_set, TriggerSpec(0, 2, 1, count=4), "toy")
    path = save_key(key, tmp_path / "key.zip")
    _rewrite(path, tmp_path / "new.zip", edit_manifest=lambda m: m.update(format_version="2.0"))
    with pytest.raises(KeySchemaError, match="newer"):
        load_key(tmp_path / "new.zip")


def test_tampered_image_reports_checksum(tmp_path, toy_set):
    from fusemark.triggers import _png_bytes

    key = build_watermark_key(toy_set, TriggerSpec(0, 2, 1, count=4), "toy")
    path = save_key(key, tmp_path / "key.zip")
    tampered = key.triggers[1].copy()
    tampered[0, 0, 0] ^= 1
    _rewrite(path, tmp_path / "t.zip", replace={"images/00001.png": _png_bytes(tampered)})
    with pytest.raises(KeyIntegrityError, match="checksum mismatch"):
        load_key(tmp_path / "t.zip")
