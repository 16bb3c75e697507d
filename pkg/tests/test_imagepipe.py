from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clipa import imagepipe as ip
from clipa.imagepipe import ImageReduction as R


# -- token arithmetic ------------------------------------------------------------

@pytest.mark.parametrize("r,tokens", [
    (R(), 197), (R("random", 0.5), 99), (R("random", 0.75), 50), (R("random", 0.816), 37),
    (R("random", 0.918), 17), (R("resize", target_size=160), 101), (R("resize", target_size=112), 50),
    (R("resize", target_size=64), 17), (R("grid", 0.75), 50), (R("block", 0.5), 99),
])
def test_kept_token_count(r, tokens):
    assert ip.kept_token_count(196, r) == tokens
    assert ip.kept_token_count((14, 14), r) == tokens


def test_resize_target_must_divide_patch():
    with pytest.raises(ip.ImageShapeError):
        ip.kept_token_count(196, R("resize", target_size=100))


@pytest.mark.parametrize("bad", [dict(strategy="swirl"), dict(strategy="random", ratio=1.0),
                                 dict(strategy="grid", ratio=0.6), dict(strategy="resize", target_size=2)])
def test_invalid_reductions(bad):
    with pytest.raises(ValueError):
        R(**bad)


def test_parse_and_str_round_trip():
    for text in ("none", "resize:112", "random:0.75", "grid:0.5", "block:0.3"):
        assert str(R.parse(text)) == text
    assert R.parse("random:0.75").strategy == "random_mask"


# -- patchify ----------------------------------------------------------------------

@pytest.mark.parametrize("size,n", [(224, 196), (112, 49), (64, 16)])
def test_patch_counts(size, n):
    ps = ip.patchify(np.zeros((size, size, 3), np.float32), 16)
    assert len(ps) == n and ip.kept_token_count(n, R()) == n + 1


def test_patchify_raster_order_and_content():
    img = np.arange(8 * 8 * 3, dtype=np.float32).reshape(8, 8, 3)
    ps = ip.patchify(img, 4)
    assert ps.indices.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    np.testing.assert_array_equal(ps.patches[1], img[0:4, 4:8].reshape(-1))
    np.testing.assert_array_equal(ps.flat_indices(), [0, 1, 2, 3])


def test_patchify_rejects_indivisible():
    with pytest.raises(ip.ImageShapeError):
        ip.patchify(np.zeros((30, 32, 3)), 16)


# -- masks -------------------------------------------------------------------------

def _full():
    return ip.patchify(np.random.default_rng(0).random((224, 224, 3)), 16)


def test_random_mask_keeps_49():
    out = ip.apply_mask(_full(), R("random", 0.75), np.random.default_rng(1))
    assert len(out) == 49


def test_ratio_zero_is_identity():
    full = _full()
    assert ip.apply_mask(full, R("random", 0.0), np.random.default_rng(0)) is full


def test_grid_mask_odd_grid_rejected():
    with pytest.raises(ip.ImageShapeError):
        ip.grid_keep((7, 7), 0.75, np.random.default_rng(0))


def _window_counts(flat, grid):
    rows, cols = np.divmod(flat, grid[1])
    counts = np.zeros((grid[0] // 2, grid[1] // 2), int)
    np.add.at(counts, (rows // 2, cols // 2), 1)
    return counts


@given(st.integers(0, 2**32 - 1), st.sampled_from([(0.75, 1), (0.5, 2)]), st.sampled_from([(14, 14), (4, 6)]))
@settings(max_examples=200, deadline=None)
def test_grid_window_property(seed, ratio_keep, grid):
    ratio, per_window = ratio_keep
    flat = ip.grid_keep(grid, ratio, np.random.default_rng(seed))
    assert (_window_counts(flat, grid) == per_window).all()


@given(st.sampled_from(["random", "grid", "block"]), st.sampled_from([0.5, 0.75]), st.integers(0, 2**32 - 1))
@settings(max_examples=150, deadline=None)
def test_mask_output_invariants(strategy, ratio, seed):
    r = R(strategy, ratio)
    flat = ip.mask_indices((14, 14), r, np.random.default_rng(seed))
    assert len(flat) == ip.kept_token_count(196, r) - 1
    assert np.all(np.diff(flat) > 0)
    assert flat.min() >= 0 and flat.max() < 196


@given(st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
@settings(max_examples=150, deadline=None)
def test_block_mask_is_union_of_rectangles_minus_restored(ratio, seed):
    grid = (14, 14)
    n_remove = 196 - ip.kept_patch_count(196, ratio)
    bs = ip.sample_blocks(grid, n_remove, np.random.default_rng(seed))
    assert bs.removed.sum() == n_remove and not bs.filled
    union = np.zeros(grid, bool)
    for top, left, h, w in bs.blocks:
        union[top:top + h, left:left + w] = True
    expect = union.reshape(-1).copy()
    expect[bs.restored] = False
    np.testing.assert_array_equal(bs.removed.reshape(-1), expect)
    if bs.restored:
        top, left, h, w = bs.blocks[-1]
        rows, cols = np.divmod(np.array(bs.restored), 14)
        assert np.all((rows >= top) & (rows < top + h) & (cols >= left) & (cols < left + w))


def test_random_mask_uniformity():
    trials, n, ratio = 10_000, 16, 0.75
    counts = np.zeros(n)
    for seed in range(trials):
        counts[ip.mask_indices((4, 4), R("random", ratio), np.random.default_rng(seed))] += 1
    p = 1 - ratio
    sigma = np.sqrt(p * (1 - p) / trials)
    assert np.all(np.abs(counts / trials - p) <= 3 * sigma)


def test_grid_survivor_uniform_per_window():
    hits = np.zeros(4)
    for seed in range(4000):
        flat = ip.grid_keep((2, 2), 0.75, np.random.default_rng(seed))
        hits[flat] += 1
    p = 0.25
    assert np.all(np.abs(hits / 4000 - p) <= 3 * np.sqrt(p * (1 - p) / 4000))


def test_batch_mask_indices_shapes():
    keep = ip.batch_mask_indices(5, (4, 4), R("random", 0.5), np.random.default_rng(0))
    assert keep.shape == (5, 8)
    assert all(len(set(row)) == 8 for row in keep.tolist())


# -- resize ------------------------------------------------------------------------

def test_resize_identity():
    img = np.random.default_rng(0).random((12, 12, 3))
    np.testing.assert_allclose(ip.resize_antialias(img, 12), img, atol=1e-6)


@given(st.integers(4, 40), st.integers(4, 40), st.floats(0, 1))
@settings(max_examples=60, deadline=None)
def test_resize_constant_and_weights_sum_to_one(src, dst, value):
    w = ip.resize_weights(src, dst)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    out = ip.resize_antialias(np.full((src, src, 3), value), dst)
    np.testing.assert_allclose(out, value, atol=1e-9)


def test_checkerboard_downsample_by_two():
    # triangle filter of half-width 2 px sampled at source pixel centres:
    # border rows see weights (3, 3, 1)/7, interior rows (1, 3, 3, 1)/8
    w = [[F(3, 7), F(3, 7), F(1, 7), 0, 0, 0, 0, 0],
         [0, F(1, 8), F(3, 8), F(3, 8), F(1, 8), 0, 0, 0],
         [0, 0, 0, F(1, 8), F(3, 8), F(3, 8), F(1, 8), 0],
         [0, 0, 0, 0, 0, F(1, 7), F(3, 7), F(3, 7)]]
    board = [[(i + j) % 2 for j in range(8)] for i in range(8)]
    oracle = [[sum(w[a][i] * board[i][j] * w[b][j] for i in range(8) for j in range(8))
               for b in range(4)] for a in range(4)]
    assert oracle[0][0] == F(24, 49) and oracle[0][3] == F(25, 49) and oracle[1][1] == F(1, 2)
    img = np.repeat(np.array(board, float)[..., None], 3, axis=2)
    out = ip.resize_antialias(img, 4)[..., 0]
    np.testing.assert_allclose(out, np.array(oracle, float), atol=1e-12)
    assert np.all(np.abs(out - 0.5) <= 0.0205)


def test_resize_below_four_pixels_rejected():
    with pytest.raises(ip.ImageShapeError):
        ip.resize_antialias(np.zeros((8, 8, 3)), 2)


def test_upsample_is_bilinear_between_centres():
    img = np.zeros((4, 4, 1))
    img[:, 2:] = 1.0
    out = ip.resize_antialias(img, 8)[0, :, 0]
    # output centres at 0.25, 0.75, ... in source units; edges clamp
    assert out[0] == 0.0 and out[-1] == 1.0
    assert np.all(np.diff(out) >= 0)


# -- augmentation ------------------------------------------------------------------

def test_disabled_augment_is_standardization_only():
    img = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    out = ip.augment(img, ip.AugmentConfig.disabled(), np.random.default_rng(0))
    np.testing.assert_allclose(out, (img / 255.0 - 0.5) / 0.5, atol=1e-6)
    assert out.dtype == np.float32


def test_grayscale_channels_equal():
    img = np.random.default_rng(1).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    cfg = ip.AugmentConfig(crop=False, jitter=False, gray=True, gray_prob=1.0)
    out = ip.augment(img, cfg, np.random.default_rng(0), standardize_output=False)
    assert np.array_equal(out[..., 0], out[..., 1]) and np.array_equal(out[..., 1], out[..., 2])


def test_crop_area_lower_bound():
    H = W = 224
    cfg = ip.AugmentConfig()
    areas = []
    for seed in range(10_000):
        _, _, h, w = ip.sample_crop(H, W, cfg, np.random.default_rng(seed))
        areas.append(h * w / (H * W))
    # rounding h and w to whole pixels moves the area by at most ~(h + w) / (H W)
    assert min(areas) >= 0.4 - 2 * (H + W) / (H * W)
    assert max(areas) <= 1.0


def test_small_image_rejected():
    with pytest.raises(ip.ImageShapeError):
        ip.augment(np.zeros((7, 9, 3), np.uint8), ip.AugmentConfig(), np.random.default_rng(0))


def test_augment_output_shape_and_determinism():
    img = np.random.default_rng(2).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    a = ip.augment(img, ip.AugmentConfig(), np.random.default_rng(5), out_size=16)
    b = ip.augment(img, ip.AugmentConfig(), np.random.default_rng(5), out_size=16)
    assert a.shape == (16, 16, 3) and a.tobytes() == b.tobytes()


def test_invalid_augment_config():
    with pytest.raises(ValueError):
        ip.AugmentConfig(crop_area=(0.0, 1.0))


@pytest.mark.parametrize("mode", ["crop", "direct"])
def test_eval_preprocess(mode):
    img = np.full((40, 48, 3), 255, np.uint8)
    out = ip.eval_preprocess(img, 32, mode=mode) if mode == "crop" else ip.eval_preprocess(img[:, :40], 32, mode)
    assert out.shape == (32, 32, 3)
    np.testing.assert_allclose(out, 1.0, atol=1e-6)
