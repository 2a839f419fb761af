import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthlab.geometry import Intrinsics
from depthlab.preprocess import augment, bottom_crop, crop_and_flip, outlier_filter, spp_densify
from depthlab.records import SampleRecord, SegmentationMap
from oracles import maxpool_same_loop, outlier_filter_loop


def _sparse(seed, h=20, w=24, density=0.15):
    rng = np.random.default_rng(seed)
    return np.where(rng.random((h, w)) < density, rng.uniform(1.0, 30.0, (h, w)), 0.0)


def test_far_return_behind_near_one_is_removed():
    d = np.zeros((9, 9))
    d[4, 4] = 4.0
    d[2, 6] = 2.0
    out = outlier_filter(d)
    assert out[4, 4] == 0.0 and out[2, 6] == 2.0


def test_return_within_margin_is_kept():
    d = np.zeros((9, 9))
    d[4, 4] = 3.4
    d[2, 6] = 2.0
    assert outlier_filter(d)[4, 4] == 3.4


def test_isolated_return_is_kept():
    d = np.zeros((5, 5))
    d[2, 2] = 50.0
    np.testing.assert_array_equal(outlier_filter(d), d)


def test_all_missing_input_unchanged():
    np.testing.assert_array_equal(outlier_filter(np.zeros((6, 6))), np.zeros((6, 6)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([3, 5, 7]), st.floats(0.5, 5.0))
def test_outlier_filter_matches_window_scan(seed, window, margin):
    d = _sparse(seed)
    np.testing.assert_array_equal(outlier_filter(d, window, margin), outlier_filter_loop(d, window, margin))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_outlier_filter_shrinks_support_and_is_idempotent(seed):
    d = _sparse(seed, density=0.3)
    once = outlier_filter(d)
    assert np.all(once <= d) and np.all((once > 0) <= (d > 0))
    np.testing.assert_array_equal(outlier_filter(once), once)


def test_outlier_filter_batched_equals_per_map():
    batch = np.stack([_sparse(s) for s in range(3)])
    out = outlier_filter(batch)
    for b in range(3):
        np.testing.assert_array_equal(out[b], outlier_filter(batch[b]))


@pytest.mark.parametrize("window,margin", [(4, 1.5), (1, 1.5), (7, 0.0)])
def test_outlier_filter_rejects_bad_parameters(window, margin):
    with pytest.raises(ValueError):
        outlier_filter(np.zeros((5, 5)), window, margin)


def test_spp_single_pixel_becomes_block():
    d = np.zeros((11, 11))
    d[5, 5] = 3.0
    stack = spp_densify(d, [5]).as_array()
    expected = np.zeros((11, 11))
    expected[3:8, 3:8] = 3.0
    np.testing.assert_array_equal(stack[1], expected)
    np.testing.assert_array_equal(stack[0], d)


def test_spp_all_zero():
    assert not spp_densify(np.zeros((8, 8))).as_array().any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([(3,), (5, 7), (5, 7, 9, 11)]))
def test_spp_matches_loop_oracle(seed, scales):
    d = _sparse(seed)
    stack = spp_densify(d, scales).as_array()
    assert stack.shape == (1 + len(scales),) + d.shape
    for i, k in enumerate(scales):
        np.testing.assert_array_equal(stack[i + 1], maxpool_same_loop(d, k))


def test_spp_dense_input_is_dominated():
    d = np.random.default_rng(0).uniform(1, 10, (12, 12))
    stack = spp_densify(d).as_array()
    assert all(np.all(m >= d) for m in stack[1:])


def test_spp_batched_shape():
    assert spp_densify(np.zeros((2, 8, 8)), [3, 5]).as_array().shape == (2, 3, 8, 8)


@pytest.mark.parametrize("scales", [(4,), (7, 5), (5, 5)])
def test_spp_rejects_bad_scales(scales):
    with pytest.raises(ValueError):
        spp_densify(np.zeros((8, 8)), scales)


def _record(h=12, w=16, seed=0):
    rng = np.random.default_rng(seed)
    img = lambda: rng.uniform(0, 1, (h, w, 3)).astype(np.float32)  # noqa: E731
    return SampleRecord(img(), img(), img(), _sparse(seed, h, w), rng.uniform(1, 9, (h, w)),
                        SegmentationMap(rng.integers(0, 6, (h, w)), 6), Intrinsics(20.0, 20.0, 7.5, 5.0, w, h),
                        gt_full=rng.uniform(1, 9, (h, w)))


def test_flip_twice_restores_sample():
    r = _record()
    twice = crop_and_flip(crop_and_flip(r, 2, 3, 8, 10, True), 0, 0, 8, 10, True)
    once = crop_and_flip(r, 2, 3, 8, 10, False)
    for name in ("image", "prev_image", "next_image", "sparse", "gt", "gt_full"):
        np.testing.assert_array_equal(getattr(twice, name), getattr(once, name))
    np.testing.assert_array_equal(twice.seg.labels, once.seg.labels)
    assert twice.intrinsics == once.intrinsics


def test_flip_mirrors_principal_point():
    r = _record()
    out = crop_and_flip(r, 2, 3, 8, 10, True)
    assert out.intrinsics.cx == (10 - 1) - (r.intrinsics.cx - 3)
    assert out.intrinsics.cy == r.intrinsics.cy - 2


def test_flip_keeps_rasters_aligned():
    r = _record()
    out = crop_and_flip(r, 0, 0, 12, 16, True)
    np.testing.assert_array_equal(out.sparse, r.sparse[:, ::-1])
    np.testing.assert_array_equal(out.seg.labels, r.seg.labels[:, ::-1])
    np.testing.assert_array_equal(out.image, r.image[:, ::-1])


def test_augment_is_deterministic_per_seed():
    r = _record()
    a, b = augment(r, 0.5, 8, 8, (3, 1, 4)), augment(r, 0.5, 8, 8, (3, 1, 4))
    np.testing.assert_array_equal(a.image, b.image)
    assert a.image.tobytes() == b.image.tobytes() and a.intrinsics == b.intrinsics


def test_augment_rejects_oversized_crop():
    with pytest.raises(ValueError):
        augment(_record(), 0.5, 13, 8, 0)


def test_bottom_crop_keeps_bottom_rows():
    r = _record()
    out = bottom_crop(r, 8, 10)
    np.testing.assert_array_equal(out.gt, r.gt[4:, 3:13])
