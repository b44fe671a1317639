import math

import numpy as np
import pytest
import torch

from globaltrack import geometry
from globaltrack.qg_rcnn import RcnnHead, assign_proposal_targets, rcnn_loss, rcnn_loss_terms
from globaltrack.qg_rpn import RpnConfig, RpnHead, assign_anchor_targets, rpn_loss, sample_labels, select_proposals, smooth_l1

BIG = 50.0  # logit whose sigmoid is 1 to double precision


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestAnchorTargets:
    def test_exact_match_positive(self):
        tg = assign_anchor_targets([[0, 0, 10, 10], [50, 50, 60, 60]], [0, 0, 10, 10])
        assert tg.labels.tolist() == [1, 0]
        assert np.array_equal(tg.deltas[0], np.zeros(4))
        assert np.all(np.isnan(tg.deltas[1]))

    def test_argmax_forced_positive(self):
        anchors = np.array([[0, 0, 10, 10], [2, 0, 12, 10], [30, 30, 40, 40]], float)
        gt = [4, 0, 16, 10]
        ov = [geometry.iou(geometry.Box(*a), geometry.Box(*gt)) for a in anchors]
        assert max(ov) < 0.7
        tg = assign_anchor_targets(anchors, gt)
        assert tg.labels[int(np.argmax(ov))] == 1
        assert tg.labels[2] == 0

    def test_ignore_band(self):
        tg = assign_anchor_targets([[0, 0, 10, 10], [0, 0, 10, 20]], [0, 0, 10, 10])
        # iou 0.5 lies between the two thresholds
        assert tg.labels.tolist() == [1, -1]

    def test_sampling_budget(self):
        rng = np.random.default_rng(0)
        labels = np.array([1] * 30 + [0] * 300 + [-1] * 10, np.int8)
        out = sample_labels(labels, 64, 0.25, rng)
        assert (out == 1).sum() == 16 and (out == 0).sum() == 48
        assert np.all(out[labels == -1] == -1)

    def test_sampling_few_positives(self):
        out = sample_labels(np.array([1, 0, 0, 0], np.int8), 256, 0.5, np.random.default_rng(0))
        assert out.tolist() == [1, 0, 0, 0]


class TestRpnLoss:
    def test_optimum(self):
        loss, _ = rpn_loss(t([BIG, -BIG]), t(np.zeros((2, 4))), [1, 0], np.array([[0, 0, 0, 0], [np.nan] * 4]))
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_cross_entropy_half(self):
        loss, parts = rpn_loss(t([0.0]), t([[0.1, 0.2, 0.3, 0.4]]), [1], np.array([[0.1, 0.2, 0.3, 0.4]]), 1.0, 1, 1)
        assert loss.item() == pytest.approx(-math.log(0.5), abs=1e-12)
        assert parts["loc"].item() == 0.0

    def test_smooth_l1_half(self):
        loss, parts = rpn_loss(t([BIG]), t([[0.5, 0.5, 0.5, 0.5]]), [1], np.zeros((1, 4)), 1.0, 1, 1)
        assert parts["loc"].item() == pytest.approx(0.5, abs=1e-15)
        assert loss.item() == pytest.approx(0.5, abs=1e-12)

    def test_negatives_do_not_localize(self):
        d = t(np.full((2, 4), 3.0)).requires_grad_()
        loss, parts = rpn_loss(t([0.0, 0.0]), d, [0, -1], np.full((2, 4), np.nan))
        loss.backward()
        assert parts["loc"].item() == 0.0 and torch.count_nonzero(d.grad) == 0

    def test_normalizers(self):
        logits, labels = t([0.0, 0.0, 0.0]), [1, 0, -1]
        tgt = np.array([[1, 1, 1, 1], [np.nan] * 4, [np.nan] * 4], float)
        loss, parts = rpn_loss(logits, t(np.zeros((3, 4))), labels, tgt, lam=2.0)
        assert parts["cls"].item() == pytest.approx(math.log(2))
        assert parts["loc"].item() == pytest.approx(4 * 0.5)
        assert loss.item() == pytest.approx(math.log(2) + 2 * 2.0)

    def test_empty_sample_rejected(self):
        with pytest.raises(ValueError):
            rpn_loss(t([0.0]), t(np.zeros((1, 4))), [-1], np.zeros((1, 4)))

    def test_smooth_l1_branches(self):
        assert smooth_l1(t([0.5, -2.0])).tolist() == [0.125, 1.5]


class TestProposalTargets:
    def test_identity_and_disjoint(self):
        tg = assign_proposal_targets([[0, 0, 10, 10], [20, 20, 30, 30]], [0, 0, 10, 10])
        assert tg.labels.tolist() == [1, 0]
        assert np.array_equal(tg.deltas[0], np.zeros(4))

    def test_boundary_half_is_positive(self):
        # [0,0,10,20] vs [0,0,10,10]: 100 shared pixels over 200, exactly 0.5
        tg = assign_proposal_targets([[0, 0, 10, 20]], [0, 0, 10, 10])
        assert tg.labels.tolist() == [1]


class TestRcnnLoss:
    def test_optimum(self):
        loss, _ = rcnn_loss(t([BIG, -BIG]), t(np.zeros((2, 4))), [1, 0], np.array([[0] * 4, [np.nan] * 4]))
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_mean_of_terms(self):
        # per-proposal losses 0.2 and 0.6 via the localisation term alone
        d = t([[math.sqrt(0.4), 0, 0, 0], [math.sqrt(0.6), math.sqrt(0.6), 0, 0]])
        loss, _ = rcnn_loss(t([BIG, BIG]), d, [1, 1], np.zeros((2, 4)))
        _, _, terms = rcnn_loss_terms(t([BIG, BIG]), d, [1, 1], np.zeros((2, 4)))
        assert terms.tolist() == pytest.approx([0.2, 0.6], abs=1e-12)
        assert loss.item() == pytest.approx(0.4, abs=1e-12)

    def test_single_negative(self):
        loss, parts = rcnn_loss(t([0.0]), t([[5.0, 5, 5, 5]]), [0], np.full((1, 4), np.nan))
        assert loss.item() == pytest.approx(-math.log(0.5), abs=1e-12)
        assert parts["loc"].item() == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            rcnn_loss(t([]), t(np.zeros((0, 4))), [], np.zeros((0, 4)))


class TestHeads:
    def test_rpn_head_layout(self):
        head = RpnHead(4, 6).double()
        logits, deltas = head(torch.randn(2, 4, 3, 5, dtype=torch.float64))
        assert logits.shape == (2, 3 * 5 * 6) and deltas.shape == (2, 3 * 5 * 6, 4)

    def test_rcnn_head_shapes(self):
        head = RcnnHead(4, 3, 16)
        logits, deltas = head(torch.randn(7, 4, 3, 3))
        assert logits.shape == (7,) and deltas.shape == (7, 4)

    def test_rcnn_duplicate_inputs(self):
        head = RcnnHead(2, 3, 8)
        x = torch.randn(1, 2, 3, 3).repeat(3, 1, 1, 1)
        logits, deltas = head(x)
        assert torch.equal(logits[0], logits[2]) and torch.equal(deltas[0], deltas[1])


class TestSelectProposals:
    def _inputs(self, n=40, seed=0):
        rng = np.random.default_rng(seed)
        anchors = geometry.generate_anchors(4, 5, geometry.AnchorGrid((16.0, 32.0), (1.0,), 16))[:n]
        logits = torch.from_numpy(rng.normal(size=len(anchors)))
        deltas = torch.from_numpy(rng.normal(scale=0.3, size=(len(anchors), 4)))
        return [logits], [deltas], [anchors]

    def test_budget_one_is_global_top(self):
        lg, dl, an = self._inputs()
        cfg = RpnConfig(pre_nms_top_k=1000)
        dets = select_proposals(lg, dl, an, (64, 80), 1, cfg)
        assert len(dets) == 1
        assert dets.indices[0] == int(torch.argmax(lg[0]))

    def test_within_image_and_sorted(self):
        lg, dl, an = self._inputs()
        dets = select_proposals(lg, dl, an, (64, 80), 100, RpnConfig())
        b = dets.boxes
        assert np.all(b[:, 0] >= 0) and np.all(b[:, 2] <= 80) and np.all(b[:, 1] >= 0) and np.all(b[:, 3] <= 64)
        assert np.all(np.diff(dets.scores) <= 0)
        ov = geometry.iou_matrix(b, b)
        assert np.all(ov[~np.eye(len(b), dtype=bool)] <= 0.7)
