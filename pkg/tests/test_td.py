import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import exhaustive_group_select, td_footprints
from ssn.architecture import load_architecture
from ssn.attention import AttentionSignal
from ssn.autodiff import Tensor, maxpool2d
from ssn.encoder import ActivationTrace, LayerSpec, conv_layer, forward_encode, init_encoder, receptive_field
from ssn.errors import InvalidInputError, StateError
from ssn.lsd import lsd_forward
from ssn.td import (
    psfield,
    stage1_competition,
    stage2_group_select_conv,
    stage2_wta_collapsed,
    stage3_normalize_propagate,
    td_layer,
    td_pass,
)


class TestStage1:
    def test_example(self):
        assert stage1_competition([5, 3, -2, 0.4]).tolist() == [0, 1]

    def test_all_equal(self):
        assert stage1_competition([0.1, 0.1, 0.1]).tolist() == [0, 1, 2]
        assert stage1_competition([7.0] * 5).tolist() == list(range(5))

    def test_non_positive(self):
        assert stage1_competition([-1, 0, -3]).tolist() == []
        assert stage1_competition([]).tolist() == []

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=40))
    def test_properties(self, ps):
        w = stage1_competition(ps)
        pos = [p for p in ps if p > 0]
        if not pos:
            assert len(w) == 0
            return
        assert int(np.argmax(ps)) in w
        assert all(ps[i] > 0 for i in w)
        mean = sum(pos) / len(pos)
        for i, p in enumerate(ps):
            if p > 0 and p > mean * (1 + 1e-12):
                assert i in w


class TestStage2:
    ps = [10.0, 4.0, 4.0]
    ys = [0, 5, 5]
    xs = [0, 5, 6]

    def test_single_component(self):
        assert stage2_group_select_conv([1, 2], [0, 0], [0, 1], [0, 1]).tolist() == [0, 1]

    def test_activity_wins(self):
        assert stage2_group_select_conv(self.ps, self.ys, self.xs, [0, 1, 2], 0.2).tolist() == [0]
        # 0.2*1/3 + 0.8*10/18 vs 0.2*2/3 + 0.8*8/18
        assert 0.2 / 3 + 0.8 * 10 / 18 == pytest.approx(0.5111, abs=1e-4)
        assert 0.2 * 2 / 3 + 0.8 * 8 / 18 == pytest.approx(0.4889, abs=1e-4)

    def test_size_wins_at_alpha_one(self):
        assert stage2_group_select_conv(self.ps, self.ys, self.xs, [0, 1, 2], 1.0).tolist() == [1, 2]

    def test_score_tie_larger_sum(self):
        # both components score exactly 0.5 with alpha 0.5; the single 4 has the larger sum
        sel = stage2_group_select_conv([1.0, 1.0, 4.0], [0, 0, 3], [0, 1, 3], [0, 1, 2], 0.5)
        assert sel.tolist() == [2]

    def test_full_tie_smallest_coordinate(self):
        sel = stage2_group_select_conv([2.0, 2.0], [4, 1], [0, 3], [0, 1], 0.2)
        assert sel.tolist() == [1]

    def test_channels_merge(self):
        # two channels at one position form a single component
        sel = stage2_group_select_conv([3.0, 3.0, 5.0], [0, 0, 4], [0, 0, 4], [0, 1, 2], 0.2)
        assert sel.tolist() == [0, 1]

    def test_subset_of_winners(self):
        sel = stage2_group_select_conv([9.0, 1.0, 1.0], [0, 0, 0], [0, 1, 2], [1, 2], 0.2)
        assert sel.tolist() == [1, 2]

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            stage2_group_select_conv([1.0], [0], [0], [])

    def test_matches_enumerator(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 25))
            ps = rng.uniform(0.01, 5, n)
            ys = rng.integers(0, 6, n)
            xs = rng.integers(0, 6, n)
            alpha = float(rng.choice([0.0, 0.2, 0.5, 1.0]))
            got = set(stage2_group_select_conv(ps, ys, xs, np.arange(n), alpha).tolist())
            want = exhaustive_group_select(list(zip(ps.tolist(), ys.tolist(), xs.tolist())), alpha)
            assert got == want


class TestWta:
    def test_max(self):
        assert stage2_wta_collapsed([5, 3, 0.4], [0, 1, 2]).tolist() == [0]

    def test_single(self):
        assert stage2_wta_collapsed([5, 3, 0.4], [1]).tolist() == [1]

    def test_tie_lowest(self):
        assert stage2_wta_collapsed([1, 5, 5], [1, 2]).tolist() == [1]


class TestStage3:
    def test_split(self):
        assert stage3_normalize_propagate([0, 1], [5, 3], 1.0).tolist() == [0.625, 0.375]

    def test_singleton(self):
        assert stage3_normalize_propagate([2], [1, 1, 7], 0.3).tolist() == [0.3]

    def test_accumulates(self):
        g = np.zeros(4)
        stage3_normalize_propagate([0, 1], [5, 3], 2.0, g, [3, 1])
        stage3_normalize_propagate([0], [5, 3], 1.0, g, [3, 1])
        assert g.tolist() == [0.0, 0.75, 0.0, 2.25]

    def test_conservation_random(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            ps = rng.normal(size=rng.integers(1, 60))
            w = stage1_competition(ps)
            if len(w) == 0:
                continue
            sel = stage2_group_select_conv(ps, rng.integers(0, 4, len(ps)), rng.integers(0, 4, len(ps)), w, 0.2)
            parent = float(rng.uniform(1e-3, 10))
            assert abs(stage3_normalize_propagate(sel, ps, parent).sum() - parent) <= 1e-9

    def test_rejects(self):
        with pytest.raises(InvalidInputError):
            stage3_normalize_propagate([0], [1.0], 0.0)
        with pytest.raises(InvalidInputError):
            stage3_normalize_propagate([], [1.0], 1.0)


def reference_conv_td(layer, g_above, h, w, alpha=0.2):
    """Dense reference built from the public stage functions."""
    out = np.zeros(h.size)
    for co, oy, ox in zip(*np.nonzero(g_above)):
        f = psfield(layer, w, h, (co, oy, ox))
        win = stage1_competition(f.ps)
        if len(win) == 0:
            continue
        if layer.kind == "collapsed":
            sel = stage2_wta_collapsed(f.ps, win)
        else:
            sel = stage2_group_select_conv(f.ps, f.y, f.x, win, alpha)
        targets = (f.channel * h.shape[1] + f.y) * h.shape[2] + f.x
        stage3_normalize_propagate(sel, f.ps, g_above[co, oy, ox], out, targets)
    return out.reshape(h.shape)


class TestTdLayer:
    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_zero_in_zero_out(self):
        layer = conv_layer("c", 4, 3, 1, 1)
        out = td_layer(layer, np.zeros((4, 5, 5)), self.rng.normal(size=(3, 5, 5)), self.rng.normal(size=(4, 3, 3, 3)))
        assert not out.any()

    def test_collapsed_singleton(self):
        layer = conv_layer("c", 2, 1)
        h = np.array([[[0.0, 2.0]], [[0.0, -1.0]], [[0.0, 0.5]]])
        w = np.ones((2, 3, 1, 1))
        g = np.zeros((2, 1, 2))
        g[1, 0, 1] = 0.7
        out = td_layer(layer, g, h, w)
        assert out[0, 0, 1] == pytest.approx(0.7, abs=1e-11)
        assert np.count_nonzero(out) == 1

    def test_collapsed_one_channel_per_node(self):
        layer = conv_layer("c", 6, 1)
        h = np.abs(self.rng.normal(size=(5, 4, 4)))
        w = self.rng.normal(size=(6, 5, 1, 1))
        for co, y, x in [(0, 0, 0), (3, 2, 1), (5, 3, 3)]:
            g = np.zeros((6, 4, 4))
            g[co, y, x] = 1.0
            out = td_layer(layer, g, h, w)
            if out.any():
                assert np.count_nonzero(out) == 1
                assert np.count_nonzero(out[:, y, x]) == 1

    @pytest.mark.parametrize("k,s,p,d", [(3, 1, 1, 1), (3, 2, 0, 1), (3, 1, 2, 2), (1, 1, 0, 1), (5, 2, 2, 1)])
    def test_matches_stage_composition(self, k, s, p, d):
        layer = conv_layer("c", 4, k, s, p, d)
        h = np.maximum(self.rng.normal(size=(3, 9, 9)), 0)
        w = self.rng.normal(size=(4, 3, k, k))
        _, ho, wo = (4,) + layer.output_hw(9, 9)
        g = np.where(self.rng.random((4, ho, wo)) < 0.3, self.rng.uniform(0.1, 2, (4, ho, wo)), 0.0)
        got = td_layer(layer, g, h, w)
        want = reference_conv_td(layer, g, h, w)
        assert np.allclose(got, want, rtol=0, atol=1e-11)
        assert (got >= 0).all()

    def test_per_parent_conservation(self):
        layer = conv_layer("c", 4, 3, 1, 1)
        h = np.maximum(self.rng.normal(size=(3, 6, 6)), 0)
        w = self.rng.normal(size=(4, 3, 3, 3))
        for co, y, x in [(0, 0, 0), (1, 2, 3), (3, 5, 5), (2, 4, 1)]:
            g = np.zeros((4, 6, 6))
            g[co, y, x] = 1.5
            f = psfield(layer, w, h, (co, y, x))
            out = td_layer(layer, g, h, w)
            if len(stage1_competition(f.ps)):
                assert out.sum() == pytest.approx(1.5, abs=1e-9)
            else:
                assert not out.any()

    def test_maxpool_routes_to_argmax(self):
        x = self.rng.normal(size=(1, 2, 4, 4))
        _, idx = maxpool2d(Tensor(x), 2, 2)
        g = np.zeros((2, 2, 2))
        g[1, 0, 1] = 0.375  # on the quantisation grid, so routing is exact
        out = td_layer(LayerSpec("maxpool", "p", 0, 2, 2), g, x[0], argmax=idx[0])
        flat = int(idx[0, 1, 0, 1])
        assert out[1, flat // 4, flat % 4] == 0.375
        assert out.sum() == 0.375

    def test_maxpool_missing_indices(self):
        with pytest.raises(StateError):
            td_layer(LayerSpec("maxpool", "p", 0, 2, 2), np.ones((1, 2, 2)), np.ones((1, 4, 4)))

    def test_relu_masks(self):
        h = np.array([[[1.0, -1.0], [0.0, 2.0]]])
        out = td_layer(LayerSpec("relu", "r"), np.full((1, 2, 2), 0.5), h)
        assert out.tolist() == [[[0.5, 0.0], [0.0, 0.5]]]


def desk_state(seed=0, batch=1):
    arch = load_architecture("desk")
    params = init_encoder(arch.network, seed, prefix="bu.")
    params.update(arch.lsd.init_params(48, np.random.default_rng(seed)))
    x = Tensor(np.random.default_rng(seed + 100).uniform(-1, 1, (batch, 3, 64, 64)))
    h, bt = forward_encode(x, arch.network, params, prefix="bu.")
    lt = ActivationTrace()
    scores = lsd_forward(h, arch.lsd, params, receptive_field(arch.network, "relu3"), (64, 64), trace=lt)
    return arch, params, bt, lt, scores


def signal(units, classes, a=336, k=4):
    d = np.zeros((a, k), dtype=np.uint8)
    for u, c in zip(units, classes):
        d[u, c] = 1
    return AttentionSignal(d)


BU_LEVELS = ["relu3", "conv3", "pool2", "relu2", "conv2", "pool1"]


@pytest.fixture(scope="module")
def state():
    return desk_state(3)


class TestTdPass:
    def run(self, state, d, **kw):
        arch, params, bt, lt, _ = state
        return td_pass(d, bt, lt, arch.network, arch.lsd, params, **kw)

    def test_empty(self, state):
        g = self.run(state, signal([], []))
        for name in BU_LEVELS:
            assert not g.get(name).any()

    def test_levels_and_shapes(self, state):
        g = self.run(state, signal([40], [1]))
        assert g.get("pool1").shape == (16, 32, 32)
        with pytest.raises(InvalidInputError):
            g.get("relu1")

    def test_stop_override(self, state):
        g = self.run(state, signal([40], [1]), stop="relu2")
        assert "relu1" not in g.maps and "pool1" not in g.shapes

    def test_non_negative_and_mass(self, state):
        g = self.run(state, signal([5, 100, 300, 330], [1, 2, 3, 1]))
        masses = [g.mass(n) for n in BU_LEVELS]
        assert all(a >= b for a, b in zip(masses, masses[1:]))
        for n in BU_LEVELS:
            assert (g.get(n) >= 0).all()

    def test_additivity(self, state):
        units, classes = [3, 77, 260, 290, 333], [1, 3, 2, 2, 1]
        union = self.run(state, signal(units, classes))
        singles = [self.run(state, signal([u], [c])) for u, c in zip(units, classes)]
        for name in BU_LEVELS:
            total = np.zeros_like(union.get(name))
            for s in singles:
                total = total + s.get(name)
            assert np.array_equal(total, union.get(name))
        # any split of the seeds adds up exactly too
        a = self.run(state, signal(units[::2], classes[::2]))
        b = self.run(state, signal(units[1::2], classes[1::2]))
        for name in BU_LEVELS:
            assert np.array_equal(a.get(name) + b.get(name), union.get(name))

    def test_support_inside_footprint(self, state):
        arch, _, _, _, scores = state
        for unit in [0, 17, 135, 255, 256, 300, 335]:
            grp, y, x = scores.locate(unit)
            g = self.run(state, signal([unit], [2]))
            for name in ["relu3", "relu2", "pool1"]:
                fp = td_footprints(arch, name, grp, 64)[:, :, y, x]
                support = g.get(name).any(axis=0)
                assert not (support & ~fp).any()
