import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image, ImageEnhance, ImageOps

from augsearch.errors import ConfigError
from augsearch.imgops import (
    MAGNITUDE_OPS,
    apply_chain,
    apply_op,
    apply_transform,
    build_transform_table,
    cutout_at,
    magnitude_levels,
    mirror,
    pad_crop_at,
    standard_config,
    standard_table,
    to_uint8,
)

DATA = Path(__file__).parent / "data"
sys.path.insert(0, str(DATA))
from make_golden import checkerboard  # noqa: E402


def rand_img(seed=0, c=3, h=32, w=32):
    return np.random.default_rng(seed).random((c, h, w))


def to_pil(img):
    return Image.fromarray(to_uint8(img).transpose(1, 2, 0))


def from_pil(im):
    return np.asarray(im, dtype=np.float64).transpose(2, 0, 1) / 255.0


# --- table ------------------------------------------------------------------


def test_standard_table_has_139_entries():
    table = standard_table()
    assert len(table) == 139
    assert table[table.identity_index].op == "identity"
    assert len(table.ops()) == 18
    with_mag = [op for op in table.ops() if table[table.op_indices(op)[0]].level is not None]
    assert sorted(with_mag) == sorted(MAGNITUDE_OPS)
    assert all(len(table.op_indices(op)) == 12 for op in with_mag)


def test_table_entries_unique_and_stable():
    a, b = standard_table(), standard_table()
    assert len(set(a.entries)) == len(a.entries)
    assert a.entries == b.entries
    assert a.canonical_listing() == b.canonical_listing()


def test_identity_only_table():
    table = build_transform_table({"ops": [{"name": "identity"}]})
    assert len(table) == 1
    assert table.identity_index == 0


def test_identity_plus_rotate_table():
    table = build_transform_table({"levels": 12, "ops": [{"name": "identity"},
                                                         {"name": "rotate", "range": [-30, 30]}]})
    assert len(table) == 13


@pytest.mark.parametrize("ops", [
    [{"name": "identity"}, {"name": "identity"}],
    [{"name": "identity"}, {"name": "rotate"}],
    [{"name": "identity"}, {"name": "bogus"}],
    [{"name": "rotate", "range": [-1, 1]}],
])
def test_bad_table_configs(ops):
    with pytest.raises(ConfigError):
        build_transform_table({"ops": ops})


def test_magnitude_grid_spans_signed_range():
    levels = magnitude_levels(-0.3, 0.3, 12)
    assert levels[0] == -0.3 and levels[-1] == 0.3
    np.testing.assert_allclose(np.diff(levels), 0.6 / 11)


def test_cutout_and_crop_scale_with_image_size():
    cfg = {op["name"]: op for op in standard_config(16)["ops"]}
    assert cfg["cutout"]["size"] == 8
    assert cfg["crop"]["pad"] == 2


# --- primitives -------------------------------------------------------------


def test_identity_bit_identical():
    img = rand_img()
    out = apply_op(img, "identity")
    assert np.array_equal(out, img)


def test_solarize_at_256_is_noop():
    img = rand_img()
    assert np.array_equal(apply_op(img, "solarize", 256.0), img)


def test_invert_is_involution():
    img = rand_img()
    np.testing.assert_array_equal(apply_op(apply_op(img, "invert"), "invert"), img)


def test_rotate_matches_golden_checkerboard():
    golden = np.load(DATA / "rotate30_checkerboard.npy")
    out = apply_op(checkerboard(), "rotate", 30.0)
    np.testing.assert_allclose(out, golden, atol=1e-12)


def test_rotate_direction_quarter_turn():
    img = np.zeros((1, 9, 9))
    img[0, 4, 8] = 1.0  # right of centre
    out = apply_op(img, "rotate", 90.0)
    # positive angles turn the picture counter-clockwise on screen, as PIL does
    assert out[0, 0, 4] == pytest.approx(1.0)
    ref = from_pil(to_pil(np.repeat(img, 3, axis=0)).rotate(90.0))
    np.testing.assert_allclose(out[0], ref[0], atol=1e-12)


def test_mirror():
    img = np.zeros((1, 4, 4))
    img[..., 2:] = 1.0
    np.testing.assert_array_equal(mirror(img), 1.0 - img)
    np.testing.assert_array_equal(mirror(mirror(img)), img)
    sym = np.ones((3, 5, 5)) * np.array([0, 1, 2, 1, 0])
    np.testing.assert_array_equal(mirror(sym), sym)


def test_cutout_counts():
    img = rand_img()
    np.testing.assert_array_equal(cutout_at(img, 0, (5, 5)), img)
    assert np.all(cutout_at(img, 64, (3, 30)) == 0.5)
    out = cutout_at(np.zeros((3, 32, 32)), 16, (16, 16), fill=0.5)
    assert np.all((out == 0.5).sum(axis=(1, 2)) == 256)


def test_cutout_clipped_at_border():
    out = cutout_at(np.zeros((1, 32, 32)), 16, (0, 0), fill=1.0)
    assert out.sum() == 64


def test_pad_crop():
    img = rand_img()
    np.testing.assert_array_equal(pad_crop_at(img, 4, (4, 4)), img)
    down = pad_crop_at(img, 4, (0, 0))
    np.testing.assert_array_equal(down[:, 4:, 4:], img[:, :-4, :-4])
    assert np.all(down[:, :4] == 0) and np.all(down[:, :, :4] == 0)
    up = pad_crop_at(img, 4, (8, 8))
    np.testing.assert_array_equal(up[:, :-4, :-4], img[:, 4:, 4:])
    with pytest.raises(ConfigError):
        pad_crop_at(img, 4, (9, 0))


# --- oracles from PIL -------------------------------------------------------


def test_equalize_matches_pil():
    img = rand_img(1) ** 2
    ref = from_pil(ImageOps.equalize(to_pil(img)))
    np.testing.assert_array_equal(to_uint8(apply_op(img, "equalize")), to_uint8(ref))


def test_posterize_matches_pil():
    img = rand_img(2)
    for bits in (4, 5, 6, 7, 8):
        ref = from_pil(ImageOps.posterize(to_pil(img), bits))
        np.testing.assert_array_equal(to_uint8(apply_op(img, "posterize", float(bits))), to_uint8(ref))


def test_solarize_matches_pil():
    img = rand_img(3)
    for threshold in (0, 64, 128, 200):
        ref = from_pil(ImageOps.solarize(to_pil(img), threshold))
        np.testing.assert_array_equal(to_uint8(apply_op(img, "solarize", float(threshold))), to_uint8(ref))


@pytest.mark.parametrize("op,enhancer", [("color", ImageEnhance.Color), ("sharpness", ImageEnhance.Sharpness),
                                         ("brightness", ImageEnhance.Brightness)])
def test_blend_ops_close_to_pil(op, enhancer):
    img = np.rint(rand_img(4) * 255) / 255
    for m in (0.1, 0.55, 1.45, 1.9):
        ref = from_pil(enhancer(to_pil(img)).enhance(m))
        out = apply_op(img, op, m)
        # PIL rounds intermediate images to 8 bits
        assert np.abs(to_uint8(out).astype(int) - to_uint8(ref).astype(int)).max() <= 2


# --- properties ---------------------------------------------------------------


@pytest.mark.parametrize("op", ["contrast", "color", "brightness", "sharpness"])
def test_blend_neutral_point(op):
    img = rand_img(5)
    np.testing.assert_allclose(apply_op(img, op, 1.0), img, atol=1e-6)


@pytest.mark.parametrize("op", ["shear_x", "shear_y", "translate_x", "translate_y", "rotate"])
def test_geometric_zero_magnitude(op):
    img = rand_img(6)
    np.testing.assert_array_equal(apply_op(img, op, 0.0), img)


@pytest.mark.parametrize("op", ["identity", "equalize", "auto_contrast", "posterize", "solarize"])
def test_deterministic_ops_ignore_rng(op):
    img = rand_img(7)
    mag = {"posterize": 5.0, "solarize": 100.0}.get(op)
    a = apply_op(img, op, mag, rng=np.random.default_rng(1))
    b = apply_op(img, op, mag, rng=np.random.default_rng(2))
    assert np.array_equal(a, b)


def test_stochastic_transform_requires_rng():
    table = standard_table()
    flips = table[table.op_indices("flips")[0]]
    with pytest.raises(ConfigError):
        apply_transform(rand_img(), flips, table)


def test_flips_probability_half():
    table = standard_table()
    flips = table[table.op_indices("flips")[0]]
    img = rand_img(8)
    out = apply_transform(np.repeat(img[None], 4000, axis=0), flips, table, np.random.default_rng(0))
    flipped = np.mean([np.array_equal(o, mirror(img)) for o in out])
    assert abs(flipped - 0.5) < 3 * np.sqrt(0.25 / 4000)


def test_batch_and_single_agree_for_deterministic_ops():
    table = standard_table()
    imgs = np.random.default_rng(9).random((3, 3, 32, 32))
    for t in table.entries:
        if t.stochastic:
            continue
        batch = apply_transform(imgs, t, table)
        for i in range(3):
            np.testing.assert_array_equal(batch[i], apply_transform(imgs[i], t, table))


def test_apply_chain_order():
    table = standard_table()
    inv = table.op_indices("invert")[0]
    sol = table.op_indices("solarize")[6]
    img = rand_img(10)[None]
    out = apply_chain(img, np.array([[inv, sol]]), table, np.random.default_rng(0))
    ref = apply_transform(apply_transform(img, table[inv], table), table[sol], table)
    np.testing.assert_array_equal(out, ref)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), channels=st.sampled_from([1, 3]), size=st.sampled_from([8, 13, 32]))
def test_range_and_shape_closure(seed, channels, size):
    rng = np.random.default_rng(seed)
    img = rng.random((channels, size, size))
    table = standard_table(size)
    for t in table.entries:
        out = apply_transform(img, t, table, rng)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0
