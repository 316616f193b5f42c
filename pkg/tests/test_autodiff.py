import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssn.autodiff import (
    Tensor,
    backward,
    bilinear_upsample2x,
    concat_channels,
    conv2d,
    conv_output_size,
    finite_diff_grad,
    maxpool2d,
    nll_loss,
    relative_error,
    relu,
    softmax_channel,
)
from ssn.errors import InvalidInputError


def naive_conv(x, w, b, stride, pad, dil):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                iy = y * stride - pad + i * dil
                                ix = xx * stride - pad + j * dil
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += w[oc, ic, i, j] * x[bi, ic, iy, ix]
                    out[bi, oc, y, xx] = acc
    return out


def check_grad(build, params, eps=1e-5, tol=1e-4):
    loss = build()
    for p in params:
        p.zero_grad()
    backward(loss)
    for p in params:
        numeric = finite_diff_grad(lambda _: build(), p, eps).data
        assert relative_error(p.grad, numeric).max() < tol


class TestConv2d:
    def test_identity(self):
        out = conv2d(Tensor(np.full((1, 1, 1, 1), 5.0)), Tensor(np.ones((1, 1, 1, 1))))
        assert out.data.item() == 5.0

    def test_ones_padded(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), pad=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0
        assert out.data[0, 0, 2, 2] == 4.0

    def test_stride_shape(self):
        out = conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        assert out.shape == (1, 1, 2, 2)

    @pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 2, 2), (3, 1, 1)])
    def test_matches_nested_loops(self, stride, pad, dil):
        rng = np.random.default_rng(stride * 10 + pad + dil)
        x = rng.uniform(-1, 1, (2, 3, 7, 6))
        w = rng.uniform(-1, 1, (4, 3, 3, 3))
        b = rng.uniform(-1, 1, 4)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil).data
        np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad, dil), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(InvalidInputError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    @pytest.mark.parametrize("stride,pad,dil", [(1, 1, 1), (2, 2, 2)])
    def test_gradients(self, stride, pad, dil):
        rng = np.random.default_rng(7)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        proj = rng.uniform(-1, 1, conv2d(x, w, b, stride, pad, dil).shape)
        check_grad(lambda: (conv2d(x, w, b, stride, pad, dil) * Tensor(proj)).sum(), [x, w, b])

    @settings(max_examples=40, deadline=None)
    @given(
        h=st.integers(1, 12), k=st.integers(1, 4), s=st.integers(1, 3),
        p=st.integers(0, 2), d=st.integers(1, 3),
    )
    def test_output_shape_formula(self, h, k, s, p, d):
        expected = (h + 2 * p - d * (k - 1) - 1) // s + 1
        assert conv_output_size(h, k, s, p, d) == expected
        if expected < 1:
            with pytest.raises(InvalidInputError):
                conv2d(Tensor(np.zeros((1, 1, h, h))), Tensor(np.zeros((1, 1, k, k))), None, s, p, d)
        else:
            out = conv2d(Tensor(np.zeros((1, 1, h, h))), Tensor(np.zeros((2, 1, k, k))), None, s, p, d)
            assert out.shape == (1, 2, expected, expected)


class TestMaxpool:
    def test_window(self):
        out, idx = maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
        assert out.data.item() == 4.0
        assert idx.item() == 3

    def test_tie_first_index(self):
        _, idx = maxpool2d(Tensor(np.full((1, 1, 2, 2), 7.0)), 2, 2)
        assert idx.item() == 0

    def test_ramp(self):
        out, _ = maxpool2d(Tensor(np.arange(16.0).reshape(1, 1, 4, 4)), 2, 2)
        np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    def test_window_too_large(self):
        with pytest.raises(InvalidInputError):
            maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 3, 1)

    def test_padded(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3) - 20
        out, idx = maxpool2d(Tensor(x), 3, 2, pad=1)
        assert out.shape == (1, 1, 2, 2)
        assert out.data[0, 0, 0, 0] == x[0, 0, 1, 1]
        assert idx[0, 0, 0, 0] == 4

    @pytest.mark.parametrize("k,s", [(2, 2), (3, 2), (3, 1)])
    def test_routing_conserves_integer_gradients(self, k, s):
        rng = np.random.default_rng(k * s)
        x = Tensor(rng.uniform(-1, 1, (2, 3, 7, 7)), requires_grad=True)
        out, idx = maxpool2d(x, k, s)
        g = rng.integers(-5, 6, out.shape).astype(float)
        backward((out * Tensor(g)).sum())
        assert x.grad.sum() == g.sum()
        routed = np.zeros_like(x.grad)
        for (n, c, y, xx), i in np.ndenumerate(idx):
            routed[n, c, i // 7, i % 7] += g[n, c, y, xx]
        np.testing.assert_array_equal(x.grad, routed)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 6, 6)), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)))
        check_grad(lambda: (maxpool2d(x, 2, 2)[0] * proj).sum(), [x])


class TestPointwise:
    def test_relu(self):
        assert relu(Tensor(np.array([-3.0]))).data.item() == 0.0

    def test_softmax_symmetric(self):
        out = softmax_channel(Tensor(np.zeros((1, 2, 1, 1))))
        np.testing.assert_array_equal(out.data.ravel(), [0.5, 0.5])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_softmax_simplex(self, seed):
        x = np.random.default_rng(seed).uniform(-5, 5, (2, 5, 3, 3))
        s = softmax_channel(Tensor(x)).data
        assert np.all(s > 0) and np.all(s < 1)
        assert np.abs(s.sum(axis=1) - 1).max() < 1e-9

    def test_upsample_constant(self):
        out = bilinear_upsample2x(Tensor(np.full((1, 2, 3, 5), 2.5)))
        assert out.shape == (1, 2, 6, 10)
        np.testing.assert_allclose(out.data, 2.5, rtol=0, atol=1e-15)

    def test_upsample_corners_aligned(self):
        x = np.arange(6.0).reshape(1, 1, 2, 3)
        out = bilinear_upsample2x(Tensor(x)).data[0, 0]
        assert out[0, 0] == x[0, 0, 0, 0] and out[-1, -1] == x[0, 0, -1, -1]
        assert out[0, -1] == x[0, 0, 0, -1]

    def test_concat(self):
        a, b = Tensor(np.ones((1, 2, 3, 3))), Tensor(np.zeros((1, 1, 3, 3)))
        assert concat_channels(a, b).shape == (1, 3, 3, 3)
        with pytest.raises(InvalidInputError):
            concat_channels(a, Tensor(np.zeros((1, 1, 2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.uniform(-1, 1, (1, 2, 3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (1, 3, 3, 4)), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, (1, 5, 6, 8)))

        def build():
            cat = concat_channels(relu(a) * 2.0 + a, softmax_channel(b))
            return (bilinear_upsample2x(cat) * proj).sum()

        check_grad(build, [a, b])


class TestBackward:
    def test_scalar_identity(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        backward(x)
        assert x.grad == 1.0

    def test_square(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_accumulates_until_reset(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward((x * x).sum())
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])
        x.zero_grad()
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(InvalidInputError):
            backward(Tensor(np.ones(2), requires_grad=True))

    def test_shared_subexpression(self):
        x = Tensor(np.array([0.5, -1.5]), requires_grad=True)
        y = x * x
        backward((y * y + y).sum())
        np.testing.assert_allclose(x.grad, 4 * x.data**3 + 2 * x.data)


class TestFiniteDiff:
    def test_sum_is_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
        np.testing.assert_allclose(finite_diff_grad(lambda t: t.data.sum(), x).data, 1.0, atol=1e-9)

    def test_square(self):
        g = finite_diff_grad(lambda t: (t.data**2).sum(), Tensor(np.array([3.0])))
        assert abs(g.data.item() - 6.0) < 1e-6

    def test_conv_kernel_gradient(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 5, 5)))
        w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, (1, 3, 5, 5)))
        build = lambda: (conv2d(x, w, None, 1, 1) * proj).sum()  # noqa: E731
        backward(build())
        numeric = finite_diff_grad(lambda _: build(), w).data
        assert relative_error(w.grad, numeric).max() < 1e-4

    def test_sampled_indices(self):
        x = Tensor(np.arange(6.0))
        g = finite_diff_grad(lambda t: (t.data**2).sum(), x, indices=[1, 4])
        np.testing.assert_allclose(g, [2.0, 8.0], atol=1e-6)


class TestNll:
    def test_uniform_two_class(self):
        loss = nll_loss(Tensor(np.zeros((1, 2, 3, 3))), np.zeros((1, 3, 3), int))
        assert abs(loss.item() - np.log(2)) < 1e-12

    def test_perfect_prediction(self):
        logits = np.zeros((1, 3, 2, 2))
        logits[:, 1] = 60.0
        assert nll_loss(Tensor(logits), np.ones((1, 2, 2), int)).item() < 1e-20

    def test_ignore_everything(self):
        x = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
        loss = nll_loss(x, np.full((1, 2, 2), 255))
        assert loss.item() == 0.0
        backward(loss + 0.0)
        assert x.grad is None

    def test_matches_hand_sum_and_gradient(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(2, 4, 3, 3))
        target = rng.integers(0, 4, (2, 3, 3))
        target[0, 0, :] = 255
        expected, count = 0.0, 0
        for (n, y, x), t in np.ndenumerate(target):
            if t == 255:
                continue
            z = logits[n, :, y, x]
            expected += -(z[t] - np.log(np.exp(z).sum()))
            count += 1
        got = nll_loss(Tensor(logits), target).item()
        assert abs(got - expected / count) < 1e-10
        t = Tensor(logits, requires_grad=True)
        check_grad(lambda: nll_loss(t, target), [t])
