import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from globaltrack import geometry as g
from globaltrack.geometry import AnchorGrid, Box, InvalidBoxError


def raster_iou(a, b):
    """IoU by painting integer boxes on a pixel grid and counting."""
    size = int(max(a[2], a[3], b[2], b[3])) + 1
    ma = np.zeros((size, size), bool)
    mb = np.zeros((size, size), bool)
    ma[int(a[1]):int(a[3]), int(a[0]):int(a[2])] = True
    mb[int(b[1]):int(b[3]), int(b[0]):int(b[2])] = True
    union = (ma | mb).sum()
    return (ma & mb).sum() / union if union else 0.0


def greedy_nms_oracle(boxes, scores, thr):
    """Textbook greedy NMS written independently of the package."""
    idx = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in idx:
        if all(raster_free_iou(boxes[i], boxes[j]) <= thr for j in keep):
            keep.append(i)
    return keep


def raster_free_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


int_box = st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(1, 15), st.integers(1, 15)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)


class TestBox:
    def test_degenerate_rejected(self):
        with pytest.raises(InvalidBoxError):
            Box(0, 0, 0, 5)
        with pytest.raises(InvalidBoxError):
            Box(0, 0, float("nan"), 5)

    def test_conversions(self):
        b = Box.from_xywh(2, 3, 4, 6)
        assert b.as_array().tolist() == [2, 3, 6, 9]
        assert b.to_cxcywh() == (4, 6, 4, 6)
        assert Box.from_cxcywh(*b.to_cxcywh()) == b
        assert b.area == 24

    def test_within(self):
        assert Box(0, 0, 10, 10).within(10, 10)
        assert not Box(-1, 0, 10, 10).within(10, 10)


class TestIoU:
    def test_identity(self, backend):
        assert g.iou_matrix([[1, 2, 5, 9]], [[1, 2, 5, 9]])[0, 0] == 1.0

    def test_disjoint(self, backend):
        assert g.iou_matrix([[0, 0, 10, 10]], [[10, 10, 20, 20]])[0, 0] == 0.0

    def test_third(self, backend):
        assert g.iou_matrix([[0, 0, 10, 10]], [[5, 0, 15, 10]])[0, 0] == pytest.approx(1 / 3, abs=1e-15)
        assert raster_iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_box_objects(self):
        assert g.iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(1 / 3)

    @settings(max_examples=200, deadline=None)
    @given(a=int_box, b=int_box)
    def test_matches_raster(self, a, b):
        expect = raster_iou(a, b)
        for fn in (g._iou_matrix_numpy, g._iou_matrix_loops.py_func):
            got = fn(np.array([a], float), np.array([b], float))[0, 0]
            assert got == pytest.approx(expect, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(a=int_box, b=int_box)
    def test_symmetric_and_bounded(self, a, b):
        v = g.iou_matrix([a], [b])[0, 0]
        assert 0.0 <= v <= 1.0
        assert v == g.iou_matrix([b], [a])[0, 0]

    def test_backends_agree(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 50, (40, 2))
        a = np.concatenate([a, a + rng.uniform(1, 30, (40, 2))], 1)
        b = a[::-1].copy()
        ref = g._iou_matrix_numpy(a, b)
        assert np.allclose(g._iou_matrix_loops(a, b), ref, rtol=0, atol=1e-15)
        assert np.allclose(g._iou_aligned_loops(a, b), np.diag(ref), rtol=0, atol=1e-15)
        assert np.allclose(g._iou_aligned_numpy(a, b), np.diag(ref), rtol=0, atol=1e-15)

    def test_aligned_length_mismatch(self):
        with pytest.raises(ValueError):
            g.iou_aligned(np.zeros((2, 4)) + [0, 0, 1, 1], np.zeros((3, 4)) + [0, 0, 1, 1])


class TestDeltas:
    def test_self_is_zero(self):
        assert np.array_equal(g.encode_delta([[0, 0, 10, 10]], [[0, 0, 10, 10]]), np.zeros((1, 4)))

    def test_hand_example(self):
        d = g.encode_delta([[5, 5, 25, 25]], [[0, 0, 10, 10]])[0]
        assert np.allclose(d, [1.0, 1.0, math.log(2), math.log(2)], atol=1e-15)

    def test_decode_examples(self):
        assert np.allclose(g.decode_delta([0, 0, 0, 0], [[0, 0, 10, 10]]), [[0, 0, 10, 10]])
        out = g.decode_delta([1, 1, math.log(2), math.log(2)], [[0, 0, 10, 10]])
        assert np.allclose(out, [[5, 5, 25, 25]], atol=1e-12)

    def test_decode_clips(self):
        out = g.decode_delta([-1, 0, 0, 0], [[0, 0, 10, 10]], image_size=(10, 10))[0]
        assert out[0] == 0.0 and out[2] == 0.0

    @settings(max_examples=100, deadline=None)
    @given(t=int_box, a=int_box, stds=st.sampled_from([(1, 1, 1, 1), (0.1, 0.1, 0.2, 0.2)]))
    def test_round_trip(self, t, a, stds):
        d = g.encode_delta([t], [a], stds)
        assert np.allclose(g.decode_delta(d, [a], stds=stds), [t], atol=1e-9)

    def test_decode_clamps_huge_scale(self):
        out = g.decode_delta([0, 0, 100.0, 100.0], [[0, 0, 16, 16]])
        assert np.all(np.isfinite(out))
        assert out[0, 2] - out[0, 0] == pytest.approx(1000.0)


class TestNMS:
    def test_singleton(self, backend):
        assert g.nms([[0, 0, 1, 1]], [0.3], 0.5).tolist() == [0]

    def test_duplicate(self, backend):
        assert g.nms([[0, 0, 10, 10], [0, 0, 10, 10]], [0.8, 0.9], 0.5).tolist() == [1]

    def test_three_boxes(self, backend):
        boxes = [[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]]
        assert raster_iou(boxes[0], boxes[1]) == pytest.approx(81 / 119)
        assert g.nms(boxes, [0.9, 0.8, 0.7], 0.5).tolist() == [0, 2]

    def test_empty(self, backend):
        assert g.nms(np.zeros((0, 4)), [], 0.5).tolist() == []

    def test_ties_keep_input_order(self, backend):
        boxes = [[0, 0, 1, 1], [5, 5, 6, 6], [9, 9, 10, 10]]
        assert g.nms(boxes, [0.5, 0.5, 0.5], 0.5).tolist() == [0, 1, 2]

    def test_max_keep(self, backend):
        boxes = [[0, 0, 1, 1], [5, 5, 6, 6], [9, 9, 10, 10]]
        assert g.nms(boxes, [0.1, 0.9, 0.5], 0.5, max_keep=2).tolist() == [1, 2]

    @settings(max_examples=150, deadline=None)
    @given(
        boxes=st.lists(int_box, min_size=1, max_size=25),
        thr=st.sampled_from([0.0, 0.3, 0.5, 0.7, 1.0]),
        data=st.data(),
    )
    def test_matches_greedy_oracle(self, boxes, thr, data):
        scores = data.draw(st.lists(st.integers(0, 5), min_size=len(boxes), max_size=len(boxes)))
        b = np.asarray(boxes, float)
        s = np.asarray(scores, float)
        expect = greedy_nms_oracle(boxes, scores, thr)
        order = np.argsort(-s, kind="stable")
        sb = np.ascontiguousarray(b[order])
        for kernel in (g._nms_sorted_numpy, g._nms_sorted_loops.py_func):
            assert order[kernel(sb, thr)].tolist() == expect

    def test_threshold_zero_keeps_pairwise_disjoint(self, backend):
        rng = np.random.default_rng(3)
        xy = rng.uniform(0, 100, (60, 2))
        b = np.concatenate([xy, xy + rng.uniform(2, 20, (60, 2))], 1)
        keep = g.nms(b, rng.random(60), 0.0)
        ov = g.iou_matrix(b[keep], b[keep])
        assert np.all(ov[~np.eye(len(keep), dtype=bool)] == 0)

    def test_kept_pairs_below_threshold(self, backend):
        rng = np.random.default_rng(4)
        xy = rng.uniform(0, 100, (80, 2))
        b = np.concatenate([xy, xy + rng.uniform(5, 40, (80, 2))], 1)
        keep = g.nms(b, rng.random(80), 0.5)
        ov = g.iou_matrix(b[keep], b[keep])
        assert np.all(ov[~np.eye(len(keep), dtype=bool)] <= 0.5)


class TestAnchors:
    def test_single_cell(self):
        a = g.generate_anchors(1, 1, AnchorGrid((8.0,), (1.0,), 16))
        assert a.tolist() == [[4.0, 4.0, 12.0, 12.0]]

    def test_count(self):
        a = g.generate_anchors(2, 2, AnchorGrid((8.0, 16.0, 32.0), (1.0,), 16))
        assert a.shape == (12, 4)

    def test_ratio_preserves_area(self):
        wh = g.base_anchor_shapes(AnchorGrid((64.0,), (2.0,), 16))[0]
        assert wh[0] == pytest.approx(64 / math.sqrt(2))
        assert wh[1] == pytest.approx(64 * math.sqrt(2))
        assert wh[0] * wh[1] == pytest.approx(64 ** 2, rel=1e-12)

    def test_row_major_order(self):
        grid = AnchorGrid((8.0, 16.0), (0.5, 1.0, 2.0), 16)
        a = g.generate_anchors(3, 4, grid).reshape(3, 4, 6, 4)
        centers = (a[..., :2] + a[..., 2:]) / 2
        assert np.allclose(centers[1, 2, :, 0], 2.5 * 16)
        assert np.allclose(centers[1, 2, :, 1], 1.5 * 16)

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            g.generate_anchors(0, 3, AnchorGrid())


def test_detections_take_and_items():
    d = g.Detections([[0, 0, 1, 1], [1, 1, 3, 3]], [0.9, 0.2], deltas=np.zeros((2, 4)))
    sub = d.take([1])
    assert len(sub) == 1 and sub.indices.tolist() == [1]
    assert d[0].box == Box(0, 0, 1, 1) and d[0].delta.dw == 0.0
    assert [p.score for p in d.to_list()] == [0.9, 0.2]
