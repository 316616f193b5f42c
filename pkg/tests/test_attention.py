import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ssn.attention import init_attention, init_ground_truth, init_threshold, init_top1
from ssn.errors import InvalidInputError


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestGroundTruth:
    def test_foreground(self):
        a = init_ground_truth([3], 4)
        assert a.d.tolist() == [[0, 0, 0, 1]]

    def test_background_and_ignore(self):
        a = init_ground_truth([0, 255, 2], 4)
        assert a.active == [(2, 2)]

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            init_ground_truth([7], 4)


class TestTop1:
    def test_argmax(self):
        assert init_top1([[0.1, 0.7, 0.2]]).active == [(0, 1)]

    def test_tie_lowest(self):
        assert init_top1([[0.1, 0.45, 0.45]]).active == [(0, 1)]

    def test_background_inactive(self):
        assert len(init_top1([[0.8, 0.1, 0.1]])) == 0


class TestThreshold:
    def test_confident(self):
        assert init_threshold([[0.05, 0.92, 0.03]], 0.9).active == [(0, 1)]

    def test_unconfident(self):
        assert len(init_threshold([[0.1, 0.7, 0.2]], 0.9)) == 0

    def test_strictly_above(self):
        assert len(init_threshold([[0.1, 0.9, 0.0]], 0.9)) == 0

    @pytest.mark.parametrize("theta", [0.0, 1.0, -0.5, 2.0])
    def test_theta_range(self, theta):
        with pytest.raises(InvalidInputError):
            init_threshold([[0.5, 0.5]], theta)

    def test_subset_on_random_maps(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = softmax(rng.normal(0, 3, size=(50, 4)))
            top = set(init_top1(p).active)
            thr = set(init_threshold(p, 0.9).active)
            assert thr <= top


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(2, 6)), elements=st.floats(-8, 8)))
def test_properties(z):
    p = softmax(z)
    top, thr = init_top1(p), init_threshold(p, 0.9)
    assert len(thr) <= len(top)
    for sig in (top, thr):
        assert sig.d.sum(axis=1).max(initial=0) <= 1
        assert not sig.d[:, 0].any()


def test_dispatch():
    p = np.array([[0.01, 0.98, 0.01]])
    assert init_attention("threshold", probs=p).active == [(0, 1)]
    assert init_attention("gt", targets=np.array([2]), k=3).active == [(0, 2)]
    with pytest.raises(InvalidInputError):
        init_attention("bogus", probs=p)
    with pytest.raises(InvalidInputError):
        init_attention("gt", probs=p)
