import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evasionbench import autodiff as ad
from evasionbench.autodiff import AutodiffError, Graph, Tensor, backward, finite_difference_gradient


def numeric_grad(f, x, h=1e-6):
    """Plain central differences over every coordinate of a float array."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def grad_of(build, x):
    """Gradient of the scalar built by ``build(leaf_node)`` with respect to x."""
    g = Graph()
    leaf = g.leaf(x)
    out = build(leaf)
    return backward(g, out, [leaf])[leaf.id].data


def value_of(build, x):
    g = Graph()
    return build(g.constant(x)).item()


def conv_loops(x, k, stride):
    """Direct-loop valid cross-correlation, (C, H, W) x (O, C, kh, kw)."""
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((o, oh, ow))
    for a in range(o):
        for i in range(oh):
            for j in range(ow):
                patch = x[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[a, i, j] = np.sum(patch * k[a])
    return out


class TestTensor:
    def test_copies_input_and_is_read_only(self):
        src = np.array([1.0, 2.0])
        t = Tensor(src)
        src[0] = 99.0
        assert t.data[0] == 1.0
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_numpy_returns_writable_copy(self):
        t = Tensor([1.0, 2.0])
        arr = t.numpy()
        arr[0] = 7.0
        assert t.data[0] == 1.0

    def test_rejects_non_finite(self):
        with pytest.raises(AutodiffError):
            Tensor([1.0, np.nan])
        with pytest.raises(AutodiffError):
            Tensor([np.inf])

    def test_shape_argument_must_match(self):
        assert Tensor(range(6), shape=(2, 3)).shape == (2, 3)
        with pytest.raises(AutodiffError):
            Tensor(range(5), shape=(2, 3))


class TestForwardValues:
    def test_conv_identity_diagonal_kernel(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        k = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
        assert ad.conv2d(x, k).data.shape == (1, 1, 1)
        assert ad.conv2d(x, k).item() == 5.0

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_conv_matches_loops(self, rng, stride):
        x = rng.normal(size=(3, 9, 8))
        k = rng.normal(size=(4, 3, 3, 2))
        np.testing.assert_allclose(ad.conv2d(x, k, stride=stride).data, conv_loops(x, k, stride), atol=1e-12)

    def test_conv_batched_equals_per_image(self, rng):
        x = rng.normal(size=(2, 2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = ad.conv2d(x, k, stride=1, bias=b).data
        for n in range(2):
            np.testing.assert_allclose(out[n], conv_loops(x[n], k, 1) + b[:, None, None], atol=1e-12)

    def test_conv_kernel_larger_than_input(self):
        with pytest.raises(AutodiffError):
            ad.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)))

    def test_dense(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ad.dense(np.array([1.0, -1.0]), w, np.array([0.5, 0.0])).data
        np.testing.assert_array_equal(out, [-0.5, -1.0])

    def test_bce_matches_high_precision_oracle(self):
        # log(1 + e^z) - z t evaluated with mpmath at 30 digits
        assert ad.bce_with_logit(1.0, 0).item() == pytest.approx(1.3132616875182228, abs=1e-15)
        assert ad.bce_with_logit(-3.0, 1).item() == pytest.approx(3.048587351573742, abs=1e-14)
        assert ad.bce_with_logit(2.0, 1).item() == pytest.approx(0.12692801104297250, abs=1e-15)

    def test_bce_saturated_logits_are_finite(self):
        assert ad.bce_with_logit(1000.0, 1).item() == 0.0
        assert ad.bce_with_logit(-1000.0, 1).item() == pytest.approx(1000.0)
        assert 0 < ad.bce_with_logit(40.0, 1).item() < 1e-17

    def test_bce_rejects_bad_target(self):
        with pytest.raises(AutodiffError):
            ad.bce_with_logit(0.0, 0.5)

    def test_stable_sigmoid_extremes(self):
        s = ad.stable_sigmoid(np.array([-800.0, 0.0, 800.0]))
        np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])

    def test_sign_of_zero_is_zero(self):
        np.testing.assert_array_equal(ad.sign(np.array([-2.0, 0.0, 3.0])).data, [-1.0, 0.0, 1.0])

    def test_clamp_bounds(self):
        np.testing.assert_array_equal(ad.clamp(np.array([-1.0, 0.5, 2.0]), 0.0, 1.0).data, [0.0, 0.5, 1.0])
        with pytest.raises(AutodiffError):
            ad.clamp(np.zeros(2), 1.0, 0.0)

    def test_sub_requires_equal_shapes(self):
        with pytest.raises(AutodiffError):
            ad.sub(np.zeros(2), np.zeros(3))

    def test_crop_window_and_bounds(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        np.testing.assert_array_equal(ad.crop(x, (1, 0), (1, 2)).data, x[1:2, 0:2])
        with pytest.raises(AutodiffError):
            ad.crop(x, (0, 2), (1, 2))

    def test_avg_pool_all_empty(self):
        with pytest.raises(AutodiffError):
            ad.avg_pool_all(np.zeros((0,)))


class TestGradients:
    def test_dense_relu_chain(self, rng):
        w = rng.normal(size=(5, 4))
        v = rng.normal(size=(1, 5))
        x = rng.normal(size=4)

        def build(n):
            return ad.sum_all(ad.dense(ad.relu(ad.dense(n, w)), v))

        np.testing.assert_allclose(grad_of(build, x), numeric_grad(lambda a: value_of(build, a), x), rtol=1e-6, atol=1e-8)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv_input_and_kernel_gradients(self, rng, stride):
        x = rng.normal(size=(2, 2, 7, 7))
        k = rng.normal(size=(3, 2, 3, 3))
        weights = rng.normal(size=(2, 3) + ad.conv2d(x, k, stride=stride).shape[2:])

        def loss_x(n):
            return ad.sum_all(ad.mul_scalar(ad.sigmoid(ad.conv2d(n, k, stride=stride)), 2.0))

        def loss_k(n):
            out = ad.conv2d(x, n, stride=stride)
            return ad.sum_all(ad.sigmoid(ad.add(out, weights)))

        np.testing.assert_allclose(grad_of(loss_x, x), numeric_grad(lambda a: value_of(loss_x, a), x), rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(grad_of(loss_k, k), numeric_grad(lambda a: value_of(loss_k, a), k), rtol=1e-5, atol=1e-8)

    def test_reductions_reshape_transpose_crop(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))

        def build(n):
            h = ad.transpose(n, (0, 2, 3, 1))
            h = ad.crop(h, (0, 1, 1), (2, 3, 3))
            h = ad.mean(h, (1, 2))
            h = ad.reshape(h, (6,))
            return ad.sum_all(ad.sigmoid(h))

        np.testing.assert_allclose(grad_of(build, x), numeric_grad(lambda a: value_of(build, a), x), rtol=1e-6, atol=1e-9)

    def test_bce_gradient(self, rng):
        z = rng.normal(size=6) * 3
        t = (rng.random(6) > 0.5).astype(float)

        def build(n):
            return ad.sum_all(ad.bce_with_logit(n, t))

        np.testing.assert_allclose(grad_of(build, z), ad.stable_sigmoid(z) - t, atol=1e-15)

    def test_reused_node_accumulates(self):
        x = np.array([1.5, -2.0])

        def build(n):
            return ad.sum_all(ad.add(ad.mul_scalar(n, 3.0), ad.sub(n, ad.mul_scalar(n, 0.5))))

        np.testing.assert_allclose(grad_of(build, x), [3.5, 3.5])

    def test_sign_and_clamp_block_gradients(self):
        x = np.array([0.3, -0.4])
        assert np.all(grad_of(lambda n: ad.sum_all(ad.sign(n)), x) == 0)
        assert np.all(grad_of(lambda n: ad.sum_all(ad.clamp(n, 0, 1)), x) == 0)

    def test_unused_leaf_gets_zeros(self):
        g = Graph()
        a = g.leaf(np.ones(3))
        b = g.leaf(np.ones((2, 2)))
        loss = ad.sum_all(a)
        grads = backward(g, loss, [a, b])
        np.testing.assert_array_equal(grads[b.id].data, np.zeros((2, 2)))

    def test_loss_must_be_scalar(self):
        g = Graph()
        a = g.leaf(np.ones(3))
        with pytest.raises(AutodiffError):
            backward(g, ad.relu(a), [a])

    def test_nodes_from_different_graphs_rejected(self):
        a = Graph().leaf(np.ones(2))
        b = Graph().leaf(np.ones(2))
        with pytest.raises(AutodiffError):
            ad.add(a, b)

    def test_context_manager_collects_constants(self):
        with Graph() as g:
            out = ad.sum_all(np.ones(3))
        assert out.graph is g and out.item() == 3.0


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 6),
    m=st.integers(1, 6),
    batch=st.integers(1, 3),
    seed=st.integers(0, 2**31 - 1),
)
def test_dense_gradient_property(n, m, batch, seed):
    r = np.random.default_rng(seed)
    w, b = r.normal(size=(m, n)), r.normal(size=m)
    x = r.normal(size=(batch, n))

    def build(node):
        return ad.sum_all(ad.sigmoid(ad.dense(node, w, b)))

    np.testing.assert_allclose(grad_of(build, x), numeric_grad(lambda a: value_of(build, a), x), rtol=1e-5, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(
    side=st.integers(3, 8),
    ksize=st.integers(1, 3),
    stride=st.integers(1, 3),
    seed=st.integers(0, 2**31 - 1),
)
def test_conv_forward_property(side, ksize, stride, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, side, side))
    k = r.normal(size=(2, 2, ksize, ksize))
    np.testing.assert_allclose(ad.conv2d(x, k, stride=stride).data, conv_loops(x, k, stride), atol=1e-12)


def test_finite_difference_helper_batched_matches_scalar(rng):
    x = Tensor(rng.normal(size=(2, 3)))

    def f(t):
        return float(np.sum(np.sin(t.data)))

    scalar = finite_difference_gradient(f, x, h=1e-4).data
    batched = finite_difference_gradient(f, x, h=1e-4, batch_f=lambda pts: np.sin(pts).sum(axis=(1, 2)), chunk=4).data
    np.testing.assert_allclose(scalar, batched, atol=1e-12)
    np.testing.assert_allclose(scalar, np.cos(x.data), atol=1e-7)


def test_graphs_are_freed_without_the_cycle_collector():
    import gc
    import weakref

    gc.disable()
    try:
        g = Graph()
        x = g.leaf(np.ones((1, 2, 4, 4)))
        h = ad.conv2d(x, np.ones((3, 2, 3, 3)), bias=np.ones(3))
        out = ad.sum_all(ad.dense(ad.reshape(h, (1, -1)), np.ones((2, 12)), np.ones(2)))
        backward(g, out, [x])
        ref = weakref.ref(g)
        del g, x, h, out
        assert ref() is None
    finally:
        gc.enable()
