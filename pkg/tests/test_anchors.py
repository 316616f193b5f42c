import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_assign
from ssn.anchors import (
    Box,
    LossConfig,
    assign_targets,
    iou,
    iou_matrix,
    lsd_loss,
    sample_targets,
    seg_loss,
    total_loss,
)
from ssn.autodiff import Tensor, backward
from ssn.errors import InvalidInputError
from ssn.lsd import ScoreMaps
from ssn.encoder import RFGeometry


def boxes_st():
    return st.tuples(st.integers(0, 60), st.integers(0, 60), st.integers(1, 40), st.integers(1, 40)).map(
        lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3])
    )


class TestIou:
    def test_identical(self):
        assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0

    def test_overlap(self):
        assert iou(Box(0, 0, 100, 100), Box(50, 50, 150, 150)) == pytest.approx(2500 / 17500, abs=1e-12)

    def test_degenerate_box(self):
        with pytest.raises(InvalidInputError):
            Box(5, 0, 5, 3)

    @settings(max_examples=200, deadline=None)
    @given(boxes_st(), boxes_st())
    def test_properties(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)
        assert (v == 1.0) == (a == b)
        assert iou_matrix([a], [b])[0, 0] == pytest.approx(v, abs=1e-15)


class TestAssign:
    def test_exact_match(self):
        assert assign_targets([Box(0, 0, 10, 10)], [(Box(0, 0, 10, 10), 2)]).tolist() == [2]

    def test_low_iou_background(self):
        anchors = [Box(0, 0, 10, 10), Box(0, 0, 100, 100)]
        gt = [(Box(50, 50, 150, 150), 1)]
        # anchor 1 is forced (best for the box); anchor 0 does not overlap
        assert assign_targets(anchors, gt).tolist() == [0, 1]
        t = assign_targets([Box(0, 0, 100, 100), Box(50, 50, 150, 150)], [(Box(50, 50, 150, 150), 1)])
        assert t.tolist() == [0, 1]

    def test_middle_band_dont_care(self):
        # IoU 0.4: 40x100 inside 100x100
        anchors = [Box(0, 0, 100, 100), Box(0, 0, 40, 100)]
        gt = [(Box(0, 0, 40, 100), 3)]
        assert iou(anchors[0], gt[0][0]) == pytest.approx(0.4)
        assert assign_targets(anchors, gt).tolist() == [255, 3]

    def test_forced_match(self):
        anchors = [Box(0, 0, 10, 10), Box(30, 30, 40, 40)]
        gt = [(Box(0, 0, 30, 30), 1)]
        t = assign_targets(anchors, gt)
        assert t.tolist() == [1, 0]

    def test_empty_anchors(self):
        with pytest.raises(InvalidInputError):
            assign_targets([], [(Box(0, 0, 1, 1), 1)])

    def test_no_gt(self):
        assert assign_targets([Box(0, 0, 5, 5)], []).tolist() == [0]

    def test_brute_force_500(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            anchors = [Box(*_rand_box(rng)) for _ in range(rng.integers(1, 30))]
            gt = [(Box(*_rand_box(rng)), int(rng.integers(1, 4))) for _ in range(rng.integers(0, 4))]
            assert assign_targets(anchors, gt).tolist() == brute_force_assign(anchors, gt)

    def test_every_gt_has_positive(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            anchors = [Box(*_rand_box(rng)) for _ in range(40)]
            gt = [(Box(*_rand_box(rng)), 1)]
            t = assign_targets(anchors, gt)
            if iou_matrix(anchors, [gt[0][0]]).max() > 0:
                assert (t == 1).sum() >= 1


def _rand_box(rng):
    x0, y0 = rng.integers(0, 50, size=2)
    w, h = rng.integers(1, 30, size=2)
    return int(x0), int(y0), int(x0 + w), int(y0 + h)


class TestSample:
    def test_ratio(self):
        t = np.array([1] * 10 + [0] * 500)
        out = sample_targets(t, 0)
        assert (out == 1).sum() == 10 and (out == 0).sum() == 30

    def test_no_positives(self):
        out = sample_targets(np.zeros(500, dtype=int), 0)
        assert (out == 0).sum() == 128

    def test_budget(self):
        t = np.array([2] * 200 + [0] * 100)
        out = sample_targets(t, 0)
        assert (out == 2).sum() == 128 and (out == 0).sum() == 0

    def test_deterministic(self):
        t = np.random.default_rng(0).choice([0, 1, 255], size=400)
        assert np.array_equal(sample_targets(t, 5), sample_targets(t, 5))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 300), st.integers(0, 600), st.integers(0, 50), st.integers(0, 2**31))
    def test_properties(self, npos, nneg, nign, seed):
        t = np.array([1] * npos + [0] * nneg + [255] * nign)
        out = sample_targets(t, seed)
        pos, neg = int((out == 1).sum()), int((out == 0).sum())
        assert pos + neg <= 128
        if pos:
            assert neg <= 3 * pos
        assert np.all((out == t) | (out == 255))


def one_group_scores(logits):
    return ScoreMaps([logits], [RFGeometry()], (logits.shape[2], logits.shape[3]))


class TestLosses:
    def test_uniform_ln2(self):
        s = one_group_scores(Tensor(np.zeros((1, 2, 2, 2))))
        assert float(lsd_loss(s, np.array([[0, 1, 1, 0]])).data) == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect(self):
        z = np.zeros((1, 2, 1, 2))
        z[0, 1, 0, 0] = 50
        z[0, 0, 0, 1] = 50
        s = one_group_scores(Tensor(z))
        assert float(lsd_loss(s, np.array([[1, 0]])).data) < 1e-20

    def test_all_ignored(self):
        z = Tensor(np.random.default_rng(0).random((1, 3, 2, 2)), requires_grad=True)
        loss = lsd_loss(one_group_scores(z), np.full((1, 4), 255))
        assert float(loss.data) == 0.0
        backward(loss)
        assert z.grad is None or not z.grad.any()

    def test_multi_group_oracle(self):
        rng = np.random.default_rng(3)
        maps = [Tensor(rng.normal(size=(2, 3, 3, 3))), Tensor(rng.normal(size=(2, 3, 2, 2)))]
        s = ScoreMaps(maps, [RFGeometry(), RFGeometry()], (6, 6))
        t = rng.choice([0, 1, 2, 255], size=(2, 13))
        flat = s.flat()
        terms = []
        for n in range(2):
            for a in range(13):
                if t[n, a] == 255:
                    continue
                z = flat[n, a]
                terms.append(-(z[t[n, a]] - math.log(sum(math.exp(v) for v in z))))
        assert float(lsd_loss(s, t).data) == pytest.approx(sum(terms) / len(terms), abs=1e-10)

    def test_seg_loss(self):
        assert float(seg_loss(Tensor(np.zeros((1, 2, 3, 3))), np.zeros((3, 3), int)).data) == pytest.approx(math.log(2))
        with pytest.raises(InvalidInputError):
            seg_loss(Tensor(np.zeros((1, 2, 3, 3))), np.zeros((4, 3), int))

    def test_seg_loss_oracle(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(1, 3, 4, 5))
        y = rng.choice([0, 1, 2, 255], size=(4, 5))
        terms = [
            -(z[0, y[i, j], i, j] - math.log(np.exp(z[0, :, i, j]).sum()))
            for i in range(4)
            for j in range(5)
            if y[i, j] != 255
        ]
        assert float(seg_loss(Tensor(z), y).data) == pytest.approx(sum(terms) / len(terms), abs=1e-10)

    @pytest.mark.parametrize("ld,ls,a,expected", [(2, 4, 1, 6), (2, 4, 0, 2), (0, 5, 0.5, 2.5)])
    def test_total(self, ld, ls, a, expected):
        assert total_loss(ld, ls, a) == expected
        assert float(total_loss(Tensor(float(ld)), Tensor(float(ls)), a).data) == expected


def test_loss_config_validation():
    with pytest.raises(InvalidInputError):
        LossConfig(theta_pos=0.3, theta_neg=0.5)
