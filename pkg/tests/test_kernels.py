"""Both kernel paths against each other and against scipy."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adcds import kernels

scipy_ndimage = pytest.importorskip("scipy.ndimage")

IMPLS = kernels.backends()
needs_numba = pytest.mark.skipif("numba" not in IMPLS, reason="no numba")

masks = arrays(np.bool_, st.tuples(st.integers(1, 24), st.integers(1, 24)))
images = arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20)))


def test_backend_flag_names_a_module():
    assert kernels.BACKEND in IMPLS


@needs_numba
@settings(max_examples=60, deadline=None)
@given(masks)
def test_label4_paths_agree(m):
    a = IMPLS["numpy"].label4(m)
    b = IMPLS["numba"].label4(m)
    assert a[1] == b[1]
    np.testing.assert_array_equal(a[0], b[0])


@settings(max_examples=60, deadline=None)
@given(masks)
def test_label4_matches_scipy_partition(m):
    labels, n = kernels.label4(m)
    ref, n_ref = scipy_ndimage.label(m)
    assert n == n_ref
    # same partition: labels biject onto each other
    pairs = set(zip(labels[m].tolist(), ref[m].tolist()))
    assert len(pairs) == n
    assert (labels[~m] == 0).all()


def test_label4_order_is_raster_first_pixel():
    m = np.array([[0, 0, 1],
                  [1, 0, 1],
                  [1, 1, 0]], dtype=bool)
    labels, n = kernels.label4(m)
    assert n == 2
    assert labels[0, 2] == 1 and labels[1, 0] == 2


@needs_numba
@settings(max_examples=40, deadline=None)
@given(images)
def test_box3_and_otsu_paths_agree(img):
    np.testing.assert_array_equal(IMPLS["numpy"].box3_sum(img),
                                  IMPLS["numba"].box3_sum(img))
    assert IMPLS["numpy"].otsu_threshold(img, 256) == \
        IMPLS["numba"].otsu_threshold(img, 256)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(masks, st.integers(0, 3), st.sampled_from([4, 8]))
def test_majority_paths_agree(m, passes, nb):
    np.testing.assert_array_equal(IMPLS["numpy"].majority_filter(m, passes, nb),
                                  IMPLS["numba"].majority_filter(m, passes, nb))


@needs_numba
@settings(max_examples=60, deadline=None)
@given(masks)
def test_rle_paths_agree_and_round_trip(m):
    for impl in IMPLS.values():
        s, n = impl.rle_encode(m)
        np.testing.assert_array_equal(impl.rle_decode(s, n, *m.shape), m)
    a, b = IMPLS["numpy"].rle_encode(m), IMPLS["numba"].rle_encode(m)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_box3_edge_replication():
    img = np.arange(9, dtype=np.uint8).reshape(3, 3)
    padded = np.pad(img.astype(int), 1, mode="edge")
    want = sum(padded[dy:dy + 3, dx:dx + 3] for dy in range(3)
               for dx in range(3))
    np.testing.assert_array_equal(kernels.box3_sum(img), want)


def test_otsu_two_levels_splits_them():
    v = np.array([10] * 50 + [200] * 30)
    t = kernels.otsu_threshold(v, 256)
    assert 10 <= t < 200
    assert kernels.otsu_threshold(np.full(5, 7), 256) == 7


def test_component_stats_half_open():
    m = np.zeros((5, 6), dtype=bool)
    m[1:3, 2:5] = True
    labels, n = kernels.label4(m)
    area, y0, x0, y1, x1 = kernels.component_stats(labels, n)
    assert (area[0], y0[0], x0[0], y1[0], x1[0]) == (6, 1, 2, 3, 5)
