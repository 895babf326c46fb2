from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from siamix import data as D
from siamix.errors import ConfigError, DataError

import oracles


def sample(rng, h, w=None, task="detection"):
    w = w or h
    return D.SamplePair(
        rng.random((h, w, 3)).astype(np.float32),
        rng.random((h, w, 3)).astype(np.float32),
        rng.integers(0, 2, (h, w)),
        task,
    )


def write_png(path, array):
    Image.fromarray(np.asarray(array, np.uint8)).save(path)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------
def test_load_pair_valid(tmp_path, rng):
    write_png(tmp_path / "a.png", rng.integers(0, 256, (256, 256, 3)))
    write_png(tmp_path / "b.png", rng.integers(0, 256, (256, 256, 3)))
    write_png(tmp_path / "l.png", rng.integers(0, 2, (256, 256)))
    s = D.load_pair(tmp_path / "a.png", tmp_path / "b.png", tmp_path / "l.png")
    assert s.t1.shape == (256, 256, 3) and s.label.shape == (256, 256)
    assert 0 <= s.t1.min() and s.t1.max() <= 1


def test_load_pair_size_mismatch_names_path(tmp_path, rng):
    write_png(tmp_path / "a.png", rng.integers(0, 256, (256, 256, 3)))
    write_png(tmp_path / "b.png", rng.integers(0, 256, (512, 512, 3)))
    write_png(tmp_path / "l.png", np.zeros((256, 256)))
    with pytest.raises(DataError, match="b.png"):
        D.load_pair(tmp_path / "a.png", tmp_path / "b.png", tmp_path / "l.png")


def test_load_pair_missing_and_out_of_range(tmp_path, rng):
    write_png(tmp_path / "a.png", rng.integers(0, 256, (8, 8, 3)))
    write_png(tmp_path / "l.png", np.full((8, 8), 255))
    with pytest.raises(DataError, match="missing"):
        D.load_pair(tmp_path / "a.png", tmp_path / "nope.png", tmp_path / "l.png")
    with pytest.raises(DataError, match="l.png"):
        D.load_pair(tmp_path / "a.png", tmp_path / "a.png", tmp_path / "l.png")


def test_load_pair_binarize(tmp_path, rng):
    write_png(tmp_path / "a.png", rng.integers(0, 256, (8, 8, 3)))
    raw = np.where(rng.random((8, 8)) > 0.5, 255, 0)
    write_png(tmp_path / "l.png", raw)
    s = D.load_pair(tmp_path / "a.png", tmp_path / "a.png", tmp_path / "l.png", binarize=True)
    np.testing.assert_array_equal(s.label, raw // 255)


def test_manifest_relative_paths(tmp_path, rng):
    scenes = [D.synth_scene(D.sample_rng(0, i)) for i in range(3)]
    written = D.write_dataset(tmp_path, scenes, {"train": [0, 1], "val": [2]})
    train = D.load_dataset(written["change/train"], "change")
    assert len(train) == 2
    np.testing.assert_array_equal(train[1].label, scenes[1].footprint1 ^ scenes[1].footprint2)
    np.testing.assert_allclose(train[0].t1, scenes[0].t1, atol=0.5 / 255 + 1e-6)


def test_manifest_malformed(tmp_path):
    bad = tmp_path / "m.txt"
    bad.write_text("only\ttwo\n")
    with pytest.raises(DataError, match="m.txt:1"):
        D.read_manifest(bad)


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("size,count", [(512, 4), (1024, 16)])
def test_tile_counts_and_partition(rng, size, count):
    s = sample(rng, size)
    tiles = D.tile(s, 256)
    assert len(tiles) == count
    assert [t.meta["origin"] for t in tiles[:2]] == [(0, 0), (0, 256)]
    back = D.untile(tiles, size, size)
    np.testing.assert_array_equal(back.t1, s.t1)
    np.testing.assert_array_equal(back.t2, s.t2)
    np.testing.assert_array_equal(back.label, s.label)


def test_tile_indivisible(rng):
    with pytest.raises(DataError):
        D.tile(sample(rng, 300), 256)
    padded = D.tile(sample(rng, 300), 256, pad=True)
    assert len(padded) == 4 and padded[-1].t1.shape == (256, 256, 3)


def test_tile_overlap(rng):
    tiles = D.tile(sample(rng, 96), 64, overlap=32)
    assert [t.meta["origin"] for t in tiles] == [(0, 0), (0, 32), (32, 0), (32, 32)]


# ---------------------------------------------------------------------------
# label cleanup
# ---------------------------------------------------------------------------
def test_binarize_rule():
    np.testing.assert_array_equal(D.binarize_label(np.array([0, 5, 255])), [0, 1, 1])
    np.testing.assert_array_equal(D.binarize_label(np.zeros((3, 3))), 0)
    np.testing.assert_array_equal(D.binarize_label(np.array([127, 128]), threshold=127), [0, 1])


def test_binarize_idempotent(rng):
    m = D.binarize_label(rng.integers(0, 256, (16, 16)))
    np.testing.assert_array_equal(D.binarize_label(m), m)


def test_morph_isolated_pixel_removed():
    m = np.zeros((9, 9), int)
    m[4, 4] = 1
    np.testing.assert_array_equal(D.morph_denoise(m), 0)
    np.testing.assert_array_equal(oracles.erode_dilate_loop(m, 3, 1, 1), 0)


def test_morph_block_preserved():
    m = np.zeros((16, 16), int)
    m[3:13, 3:13] = 1
    out = D.morph_denoise(m)
    assert out.sum() >= 64
    np.testing.assert_array_equal(out, m)


def test_morph_zero_unchanged():
    np.testing.assert_array_equal(D.morph_denoise(np.zeros((8, 8), int)), 0)


def test_morph_matches_oracle_50(rng):
    for k in range(50):
        m = (rng.random((32, 32)) < rng.uniform(0.2, 0.8)).astype(np.int64)
        kernel = (3, 5)[k % 2]
        e, d = int(rng.integers(0, 3)), int(rng.integers(0, 3))
        np.testing.assert_array_equal(D.morph_denoise(m, kernel, e, d), oracles.erode_dilate_loop(m, kernel, e, d))


def test_morph_kernel_validation():
    with pytest.raises(ConfigError):
        D.morph_denoise(np.zeros((4, 4)), kernel=4)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------
def test_hflip_involution(rng):
    s = sample(rng, 16)
    twice = D.hflip(D.hflip(s))
    np.testing.assert_array_equal(twice.t1, s.t1)
    np.testing.assert_array_equal(twice.label, s.label)
    once = D.hflip(s)
    assert once.label.sum() == s.label.sum()
    np.testing.assert_array_equal(once.t2[:, 0], s.t2[:, -1])


def test_flip_only_policy_pair_consistency(rng):
    s = sample(rng, 16)
    for seed in range(10):
        out = D.augment(s, np.random.default_rng(seed), D.FLIP_ONLY)
        flipped = not np.array_equal(out.t1, s.t1)
        ref = D.hflip(s) if flipped else s
        np.testing.assert_array_equal(out.t2, ref.t2)
        np.testing.assert_array_equal(out.label, ref.label)


def test_ratio_bounds():
    rng = np.random.default_rng(0)
    draws = [D.draw_ratio(rng, (0.5, 2.0)) for _ in range(1000)]
    assert min(draws) >= 0.5 and max(draws) <= 2.0


def test_resize_keeps_labels_integral_and_geometry_shared(rng):
    s = sample(rng, 32)
    policy = D.AugmentPolicy(hflip=False, resize=(0.5, 2.0), crop=None)
    for seed in range(5):
        out = D.augment(s, np.random.default_rng(seed), policy)
        assert out.t1.shape[:2] == out.t2.shape[:2] == out.label.shape
        assert set(np.unique(out.label)) <= {0, 1}


def test_resize_label_exact_for_integer_scale(rng):
    lab = rng.integers(0, 2, (8, 8))
    up = D.resize_label(lab, 16, 16)
    np.testing.assert_array_equal(up, np.kron(lab, np.ones((2, 2), int)))
    assert up.sum() == 4 * lab.sum()
    np.testing.assert_array_equal(D.resize_label(up, 8, 8), lab)


def test_crop_pads_or_fails(rng):
    s = sample(rng, 20)
    out = D.random_crop(s, 32, np.random.default_rng(0), pad=True)
    assert out.t1.shape == (32, 32, 3)
    with pytest.raises(DataError):
        D.random_crop(s, 32, np.random.default_rng(0), pad=False)


def test_sample_rng_independent_of_order():
    a = [D.sample_rng(3, i).random() for i in range(5)]
    b = [D.sample_rng(3, i).random() for i in reversed(range(5))][::-1]
    assert a == b


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------
def test_synth_deterministic():
    a = D.synth_scene(np.random.default_rng(5))
    b = D.synth_scene(np.random.default_rng(5))
    for x, y in zip((a.t1, a.t2, a.footprint1, a.footprint2), (b.t1, b.t2, b.footprint1, b.footprint2)):
        np.testing.assert_array_equal(x, y)


def test_synth_no_change():
    spec = D.SceneSpec().no_change()
    for seed in range(10):
        sc = D.synth_scene(np.random.default_rng(seed), spec)
        np.testing.assert_array_equal(sc.pair("change").label, 0)


def test_change_label_is_footprint_xor():
    for seed in range(20):
        sc = D.synth_scene(np.random.default_rng(seed))
        expected = (sc.footprint1 != sc.footprint2).astype(np.int64)
        np.testing.assert_array_equal(sc.pair("change").label, expected)
        np.testing.assert_array_equal(sc.pair("detection").label, sc.footprint1)


def test_synth_dataset_shapes_and_balance():
    ds = D.synth_dataset(8, 7)
    assert len(ds) == 8
    frac = np.mean([s.label.mean() for s in ds])
    assert 0.1 < frac < 0.6
    assert all(s.t1.shape == (64, 64, 3) and s.t1.dtype == np.float32 for s in ds)


@pytest.mark.parametrize("field,value", [("p_add", 1.5), ("buildings", (3, 1)), ("building_size", (0, 4)), ("grid", 0)])
def test_scene_spec_validation(field, value):
    with pytest.raises(ConfigError):
        replace(D.SceneSpec(), **{field: value})


def test_sample_pair_shape_validation(rng):
    with pytest.raises(DataError):
        D.SamplePair(rng.random((4, 4, 3)), rng.random((4, 5, 3)), np.zeros((4, 4), int))
