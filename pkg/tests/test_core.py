import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imtfa.core import (
    BinaryMask,
    Box,
    GeometryError,
    RLEMask,
    box_iou,
    mask_iou,
    mask_to_box,
    rle_decode,
    rle_encode,
)


def _raster(box, size=40):
    """Pixel grid of an integer box; an independent route to box areas."""
    g = np.zeros((size, size), dtype=bool)
    g[int(box.y1) : int(box.y2), int(box.x1) : int(box.x2)] = True
    return g


def test_box_iou_identity():
    assert box_iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0


def test_box_iou_disjoint():
    assert box_iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0


def test_box_iou_partial_overlap():
    # intersection 5x5 = 25; union 100 + 100 - 25 = 175
    assert box_iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15)) == pytest.approx(25 / 175, abs=1e-12)


def test_degenerate_boxes_give_zero():
    assert box_iou(Box(3, 3, 3, 3), Box(3, 3, 3, 3)) == 0.0
    assert box_iou(Box(0, 0, 0, 10), Box(0, 0, 10, 10)) == 0.0


def test_invalid_boxes_rejected():
    with pytest.raises(GeometryError):
        Box(5, 0, 1, 1)
    with pytest.raises(GeometryError):
        Box(0, 0, float("nan"), 1)


int_boxes = st.tuples(
    st.integers(0, 30), st.integers(0, 30), st.integers(1, 10), st.integers(1, 10)
).map(lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(int_boxes, int_boxes)
def test_box_iou_symmetric_and_matches_raster(a, b):
    assert box_iou(a, b) == box_iou(b, a)
    ra, rb = _raster(a), _raster(b)
    expected = (ra & rb).sum() / (ra | rb).sum()
    assert box_iou(a, b) == pytest.approx(expected, abs=1e-12)


@given(int_boxes, int_boxes)
def test_mask_iou_equals_box_iou_for_full_rectangles(a, b):
    ma, mb = BinaryMask(_raster(a)), BinaryMask(_raster(b))
    assert mask_iou(ma, mb) == pytest.approx(box_iou(a, b), abs=1e-12)
    assert mask_iou(ma, mb) == mask_iou(mb, ma)


def test_mask_iou_examples():
    m = BinaryMask(np.array([[1, 0], [1, 1]]))
    assert mask_iou(m, m) == 1.0
    assert mask_iou(BinaryMask(np.zeros((2, 2))), m) == 0.0
    assert mask_iou(BinaryMask(np.zeros((2, 2))), BinaryMask(np.zeros((2, 2)))) == 0.0
    a = BinaryMask(np.array([[1, 1], [0, 0]]))  # (0,0), (0,1)
    b = BinaryMask(np.array([[0, 1], [0, 1]]))  # (0,1), (1,1)
    assert mask_iou(a, b) == pytest.approx(1 / 3)


def test_mask_iou_dimension_mismatch():
    with pytest.raises(GeometryError):
        mask_iou(BinaryMask(np.ones((2, 2))), BinaryMask(np.ones((3, 2))))


def test_rle_examples():
    assert rle_encode(BinaryMask(np.zeros((2, 2)))).counts == (4,)
    left_column = BinaryMask(np.array([[1, 0], [1, 0]]))
    assert rle_encode(left_column).counts == (0, 2, 2)
    assert rle_encode(BinaryMask(np.ones((2, 2)))).counts == (0, 4)


def test_rle_round_trip_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = BinaryMask(rng.random((16, 16)) < rng.random())
        r = rle_encode(m)
        assert sum(r.counts) == 256
        assert rle_decode(r) == m


@settings(max_examples=200)
@given(st.integers(1, 9), st.integers(1, 9), st.data())
def test_rle_round_trip_property(h, w, data):
    bits = data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
    m = BinaryMask(np.array(bits).reshape(h, w))
    assert rle_decode(rle_encode(m)) == m


def test_rle_rejects_bad_counts():
    with pytest.raises(GeometryError):
        RLEMask(2, 2, (1, 2))


def test_mask_to_box():
    m = np.zeros((8, 8), dtype=bool)
    m[3, 4] = True
    assert mask_to_box(BinaryMask(m)) == Box(4, 3, 5, 4)
    assert mask_to_box(BinaryMask(np.ones((6, 9)))) == Box(0, 0, 9, 6)


def test_mask_to_box_l_shape():
    m = np.zeros((8, 8), dtype=bool)
    m[1:4, 2] = True  # vertical stroke, rows 1..3
    m[3, 2:6] = True  # horizontal stroke, cols 2..5
    rows, cols = np.nonzero(m)
    expected = Box(cols.min(), rows.min(), cols.max() + 1, rows.max() + 1)
    assert mask_to_box(BinaryMask(m)) == expected == Box(2, 1, 6, 4)


def test_mask_to_box_empty():
    with pytest.raises(GeometryError):
        mask_to_box(BinaryMask(np.zeros((3, 3))))


def test_masks_are_immutable():
    m = BinaryMask(np.ones((2, 2)))
    with pytest.raises(ValueError):
        m.data[0, 0] = False
