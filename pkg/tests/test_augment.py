import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from refixmatch import augment as A
from refixmatch.data import dequantize


class ForcedRng:
    """Stand-in stream returning fixed uniforms (one row per image)."""

    def __init__(self, rows):
        self.rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))

    def __len__(self):
        return len(self.rows)

    def uniforms(self, count, offset=0):
        return self.rows[:, offset:offset + count]


def quantized_batch(n=6, c=1, h=8, w=8, seed=0):
    q = np.random.default_rng(seed).integers(0, 256, size=(n, c, h, w)).astype(np.uint8)
    return dequantize(q)


def _u_for(name):
    return (A.NAMES.index(name) + 0.5) / len(A.NAMES)


# weak augmentation

def test_weak_center_crop_no_flip_is_identity():
    x = quantized_batch(h=8, w=8)
    pad = math.ceil(8 / 8)
    assert np.array_equal(A.apply_weak(x, False, pad, pad), x)
    # forced stream: u_flip >= 0.5, crop offsets land on the center
    rng = ForcedRng(np.tile([0.9, 0.5, 0.5], (len(x), 1)))
    assert np.array_equal(A.weak_augment_batch(x, rng), x)


def test_weak_flip_involution():
    x = quantized_batch(h=16, w=16)
    pad = 2
    once = A.apply_weak(x, True, pad, pad)
    assert np.array_equal(A.apply_weak(once, True, pad, pad), x)


def test_weak_ramp_flip_reverses_columns():
    ramp = np.tile(np.arange(4, dtype=np.float32) / 3, (4, 1))[None, None]
    out = A.apply_weak(ramp, True, 1, 1)
    assert np.array_equal(out[0, 0], ramp[0, 0][:, ::-1])


def test_weak_crop_uses_reflect_padding():
    row = np.arange(8, dtype=np.float32)[None, None, None, :] / 7
    img = np.repeat(row, 8, axis=2)
    out = A.apply_weak(img, False, 1, 0)  # shift right by one padded column
    want = np.pad(img, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")[:, :, 1:9, 0:8]
    assert np.array_equal(out, want)
    with pytest.raises(ValueError):
        A.apply_weak(img, False, 3, 0)


def test_weak_shape_and_range():
    x = quantized_batch(n=10, c=3, h=9, w=7)
    out = A.weak_augment_batch(x, A.BatchRng(0, 1, np.arange(10), 1))
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


# single transforms

def test_posterize_full_depth_identity():
    x = quantized_batch()
    assert np.array_equal(A.apply_transform_batch(x, "Posterize", 8.0), x)


def test_posterize_hand_value():
    x = dequantize(np.array([[[[0b10110111]]]], dtype=np.uint8))
    out = A.apply_transform(x[0], A.TransformSpec("Posterize", 4.0))
    assert out.item() == np.float32(0b10110000 / 255)


def test_solarize_endpoints():
    x = quantized_batch()
    assert np.array_equal(A.apply_transform_batch(x, "Solarize", 1.0), x)
    inv = A.apply_transform_batch(x, "Solarize", 0.0)
    np.testing.assert_allclose(inv, 1.0 - x, atol=1e-7)


@pytest.mark.parametrize("name", ["Rotate", "ShearX", "ShearY", "TranslateX", "TranslateY"])
def test_zero_geometry_is_identity(name):
    x = quantized_batch(c=3)
    assert np.array_equal(A.apply_transform_batch(x, name, 0.0), x)


def test_identity_transform():
    x = quantized_batch()
    assert np.array_equal(A.apply_transform(x[0], A.TransformSpec("Identity")), x[0])


def test_blend_endpoints():
    x = quantized_batch(c=3)
    assert np.array_equal(A.apply_transform_batch(x, "Brightness", 1.0), x)
    assert not A.apply_transform_batch(x, "Brightness", 0.0).any()
    assert np.array_equal(A.apply_transform_batch(x, "Sharpness", 1.0), x)
    assert np.array_equal(A.apply_transform_batch(x, "Color", 1.0), x)
    flat = A.apply_transform_batch(x, "Contrast", 0.0)
    gray = 0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]
    np.testing.assert_allclose(flat, np.broadcast_to(gray.mean(axis=(1, 2))[:, None, None, None], x.shape), atol=1e-6)


def test_color_is_noop_on_single_channel():
    x = quantized_batch(c=1)
    assert np.array_equal(A.apply_transform_batch(x, "Color", 0.05), x)


def test_brightness_halfway():
    x = quantized_batch()
    np.testing.assert_allclose(A.apply_transform_batch(x, "Brightness", 0.5), x * 0.5, atol=1e-7)


def test_autocontrast_stretches_to_full_range():
    x = quantized_batch() * 0.5 + 0.25
    out = A.apply_transform_batch(x, "AutoContrast", None)
    assert np.allclose(out.min(axis=(1, 2, 3)), 0) and np.allclose(out.max(axis=(1, 2, 3)), 1)


def _equalize_reference(channel):
    """Histogram equalisation written from the 8-bit rule, one channel at a time."""
    q = np.rint(channel * 255).astype(int)
    hist = [int((q == v).sum()) for v in range(256)]
    last = [h for h in hist if h][-1]
    step = (sum(hist) - last) // 255
    if step == 0:
        return q / 255
    lut, acc = [], 0
    for h in hist:
        lut.append(min(255, (acc + step // 2) // step))
        acc += h
    return np.array([[lut[v] for v in row] for row in q]) / 255


def test_equalize_matches_reference():
    x = quantized_batch(n=4, c=2, h=16, w=16, seed=3) ** 2
    out = A.apply_transform_batch(x, "Equalize", None)
    for i in range(4):
        for c in range(2):
            np.testing.assert_allclose(out[i, c], _equalize_reference(x[i, c]), atol=1e-7)


@pytest.mark.parametrize("theta", [-30.0, -12.5, 7.0, 30.0])
def test_rotate_matches_bilinear_edge_reference(theta):
    x = np.random.default_rng(1).random((1, 1, 11, 11))
    ref = ndimage.rotate(x[0, 0], theta, reshape=False, order=1, mode="nearest")
    out = A.apply_transform_batch(x, "Rotate", theta)
    np.testing.assert_allclose(out[0, 0], np.clip(ref, 0, 1), atol=1e-12)


def test_rotate_is_counter_clockwise():
    img = np.zeros((1, 1, 9, 9))
    img[0, 0, 0, 4] = 1.0  # top centre
    out = A.apply_transform_batch(img, "Rotate", 30.0)[0, 0]
    ys, xs = np.nonzero(out > 0.2)
    assert xs.mean() < 4  # the dot moved left


@pytest.mark.parametrize("name,value", [("ShearX", 0.3), ("ShearY", -0.2), ("TranslateX", 0.25), ("TranslateY", -0.3)])
def test_affine_matches_reference(name, value):
    h = w = 10
    x = np.random.default_rng(2).random((1, 1, h, w))
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    if name == "ShearX":
        mat, off = np.array([[1, 0], [value, 1]]), None
    elif name == "ShearY":
        mat, off = np.array([[1, value], [0, 1]]), None
    elif name == "TranslateX":
        mat, off = np.eye(2), np.array([0, -value * w])
    else:
        mat, off = np.eye(2), np.array([-value * h, 0])
    if off is None:
        off = c - mat @ c
    ref = ndimage.affine_transform(x[0, 0], mat, offset=off, order=1, mode="nearest")
    np.testing.assert_allclose(A.apply_transform_batch(x, name, value)[0, 0], ref, atol=1e-12)


def test_range_and_name_errors():
    with pytest.raises(ValueError):
        A.TransformSpec("Blur", 1.0)
    with pytest.raises(ValueError):
        A.TransformSpec("Rotate", 31.0)
    with pytest.raises(ValueError):
        A.TransformSpec("Brightness", 1.0)  # sampling range is [0.05, 0.95]
    with pytest.raises(ValueError):
        A.TransformSpec("Posterize", 4.5)
    with pytest.raises(ValueError):
        A.TransformSpec("Solarize")
    with pytest.raises(ValueError):
        A.apply_transform_batch(quantized_batch(), "Rotate", 45.0)
    with pytest.raises(ValueError):
        A.apply_transform_batch(quantized_batch(), "Nope", 0.0)


@pytest.mark.parametrize("name", A.NAMES)
def test_every_transform_keeps_range_shape_and_batch_independence(name):
    x = quantized_batch(n=5, c=3, h=8, w=8, seed=4)
    rng = A.TRANSFORMS[name]
    values = None if rng is None else np.linspace(rng[0], rng[1], 5)
    if name == "Posterize":
        values = np.array([4.0, 5.0, 6.0, 7.0, 8.0])
    out = A.apply_transform_batch(x, name, values)
    assert out.shape == x.shape and out.dtype == x.dtype
    assert out.min() >= 0 and out.max() <= 1
    for i in range(5):
        single = A.apply_transform_batch(x[i:i + 1], name, None if values is None else values[i:i + 1])
        assert np.array_equal(single[0], out[i])


# strong augmentation

def test_forced_identity_pair_without_cutout():
    x = quantized_batch(n=3)
    u = _u_for("Identity")
    rng = ForcedRng(np.tile([u, 0.3, u, 0.7], (3, 1)))
    assert np.array_equal(A.strong_augment_batch(x, rng, n_ops=2, cutout=False), x)


def test_forced_ops_apply_in_sampled_order():
    x = quantized_batch(n=1)
    rng = ForcedRng([[_u_for("Brightness"), 0.5, _u_for("Solarize"), 0.0]])
    out = A.strong_augment_batch(x, rng, cutout=False)
    step1 = A.apply_transform_batch(x, "Brightness", 0.05 + 0.5 * 0.9)
    assert np.array_equal(out, A.apply_transform_batch(step1, "Solarize", 0.0))


def test_cutout_single_gray_block():
    x = np.zeros((1, 1, 8, 8), dtype=np.float32)
    rng = ForcedRng([[_u_for("Identity"), 0.0, _u_for("Identity"), 0.0, 0.3, 0.8]])
    out = A.strong_augment_batch(x, rng, cutout=True)[0, 0]
    mask = out == np.float32(0.5)
    assert mask.sum() == 16
    ys, xs = np.nonzero(mask)
    assert ys.max() - ys.min() == 3 and xs.max() - xs.min() == 3


def test_cutout_block_inside_image_for_random_draws():
    x = np.zeros((200, 1, 8, 8), dtype=np.float32)
    out = A.strong_augment_batch(x, A.BatchRng(0, 0, np.arange(200), 9), n_ops=0, cutout=True)
    assert ((out == np.float32(0.5)).sum(axis=(1, 2, 3)) == 16).all()


def test_sampled_specs_cover_table_and_respect_ranges():
    rng = A.BatchRng(11, 0, np.arange(5000), 3)
    specs = [s for row in A.sample_transforms(rng, 2) for s in row]
    assert len(specs) == 10_000
    assert {s.name for s in specs} == set(A.NAMES)
    for s in specs:
        r = A.TRANSFORMS[s.name]
        if r is None:
            assert s.value is None
        else:
            assert r[0] <= s.value <= r[1]
    table = {"Rotate": (-30, 30), "Posterize": (4, 8), "Solarize": (0, 1), "ShearX": (-0.3, 0.3),
             "ShearY": (-0.3, 0.3), "TranslateX": (-0.3, 0.3), "TranslateY": (-0.3, 0.3),
             "Brightness": (0.05, 0.95), "Color": (0.05, 0.95), "Contrast": (0.05, 0.95),
             "Sharpness": (0.05, 0.95)}
    for name, (lo, hi) in table.items():
        assert A.TRANSFORMS[name] == (lo, hi)
    posterize = {s.value for s in specs if s.name == "Posterize"}
    assert posterize == {4.0, 5.0, 6.0, 7.0, 8.0}


def test_apply_specs_matches_sampled_path():
    x = quantized_batch(n=12, c=3)
    rng = A.BatchRng(5, 2, np.arange(12), 7)
    via_specs = A.apply_specs(x, A.sample_transforms(rng, 2))
    k, v = A.sample_ops(rng, 2)
    assert np.array_equal(via_specs, A._apply_ops(x, k, v))


# determinism

@pytest.mark.parametrize("workers", [2, 3, 5])
def test_parallel_equals_sequential(workers):
    x = quantized_batch(n=23, c=3, h=12, w=12, seed=8)
    rng = A.BatchRng(3, 17, np.arange(23), A.STREAM_UNLABELED_STRONG)
    seq = A.augment_views(x, rng, strong=True, workers=1)
    par = A.augment_views(x, rng, strong=True, workers=workers)
    assert np.array_equal(seq, par)


def test_per_sample_equals_batch():
    x = quantized_batch(n=9, c=1, h=16, w=16, seed=9)
    idx = np.arange(100, 109)
    batch = A.augment_views(x, A.BatchRng(1, 4, idx, 2), strong=True)
    for i in range(9):
        one = A.augment_views(x[i:i + 1], A.BatchRng(1, 4, idx[i:i + 1], 2), strong=True)
        assert np.array_equal(one[0], batch[i])


def test_streams_depend_on_key_parts():
    base = A.BatchRng(0, 0, [5], 0).uniforms(4)
    for other in (A.BatchRng(1, 0, [5], 0), A.BatchRng(0, 1, [5], 0),
                  A.BatchRng(0, 0, [6], 0), A.BatchRng(0, 0, [5], 1)):
        assert not np.array_equal(base, other.uniforms(4))
    assert np.array_equal(base, A.BatchRng(0, 0, [5], 0).uniforms(4))


def test_uniforms_are_uniform():
    u = A.BatchRng(0, 0, np.arange(20000), 0).uniforms(1).ravel()
    assert 0 <= u.min() and u.max() < 1
    hist = np.histogram(u, bins=10, range=(0, 1))[0]
    assert np.abs(hist - 2000).max() < 150


@given(st.integers(0, 2**31), st.integers(0, 10**6), st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_strong_outputs_in_range(seed, iteration, index):
    x = quantized_batch(n=1, c=3, h=8, w=8, seed=seed % 1000)
    out = A.augment_views(x, A.BatchRng(seed, iteration, [index], 4), strong=True)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
