import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv2d_loops, matmul_loops, softmax_list, transposed_conv2d_loops
from paresseg.errors import ConfigurationError, DimensionError, UsageError
from paresseg.substrate import (
    Adam,
    AdamState,
    Graph,
    RunningStats,
    Tensor,
    adam_step,
    backward,
    batchnorm2d,
    check_gradients,
    conv2d,
    finite_diff_gradcheck,
    log,
    matmul,
    maxpool2d,
    mul,
    pointwise,
    relu,
    reverse_backward,
    sigmoid,
    softmax,
    transposed_conv2d,
    tsum,
)


def weighted(out, seed=7):
    """Random linear read-out; avoids symmetric objectives with zero gradient."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return tsum(mul(out, Tensor(r)))


class TestMatmul:
    def test_identity(self, rng):
        b = rng.standard_normal((3, 4))
        out = matmul(Tensor(np.eye(3)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_zeros(self, rng):
        out = matmul(Tensor(np.zeros((2, 3))), Tensor(rng.standard_normal((3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_against_triple_loop(self, rng):
        a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self, rng):
        a = Tensor(rng.standard_normal((3, 4)))
        b = Tensor(rng.standard_normal((4, 2)))
        assert check_gradients(lambda: weighted(matmul(a, b)), [a, b]) < 1e-6


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = rng.standard_normal((2, 1, 5, 5))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_input_gives_bias(self):
        out = conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.ones((3, 2, 3, 3))),
                     Tensor(np.array([1.0, -2.0, 0.5])), pad=1)
        for c, b in enumerate([1.0, -2.0, 0.5]):
            np.testing.assert_array_equal(out.data[0, c], np.full((4, 4), b))

    def test_against_direct_loops(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=1)
        np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, 1, 1), atol=1e-12)

    def test_strided_against_loops(self, rng):
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((2, 2, 4, 4))
        b = rng.standard_normal(2)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1)
        np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, 2, 1), atol=1e-12)

    def test_non_integral_extent(self):
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=0)

    def test_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 5, 5)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        b = Tensor(rng.standard_normal(3))
        err = check_gradients(lambda: weighted(conv2d(x, w, b, stride=1, pad=1)), [x, w, b])
        assert err < 1e-6


class TestTransposedConv2d:
    def test_doubles_7_to_14(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 7, 7)))
        out = transposed_conv2d(x, Tensor(rng.standard_normal((4, 2, 4, 4))), Tensor(np.zeros(2)))
        assert out.shape == (1, 2, 14, 14)

    def test_zero_input_gives_bias(self, rng):
        out = transposed_conv2d(Tensor(np.zeros((1, 3, 3, 3))), Tensor(rng.standard_normal((3, 2, 4, 4))),
                                Tensor(np.array([0.25, -1.0])))
        np.testing.assert_array_equal(out.data[0, 0], np.full((6, 6), 0.25))
        np.testing.assert_array_equal(out.data[0, 1], np.full((6, 6), -1.0))

    def test_against_scatter_loops(self, rng):
        x = rng.standard_normal((2, 3, 3, 4))
        w = rng.standard_normal((3, 2, 4, 4))
        b = rng.standard_normal(2)
        out = transposed_conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, transposed_conv2d_loops(x, w, b, 2, 1), atol=1e-12)

    def test_non_doubling_rejected(self):
        with pytest.raises(ConfigurationError):
            transposed_conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), k=3, pad=0)

    def test_kernel_gradient(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        w = Tensor(rng.standard_normal((2, 3, 4, 4)))
        b = Tensor(rng.standard_normal(3))
        assert check_gradients(lambda: weighted(transposed_conv2d(x, w, b)), [w], eps=1e-5) < 1e-6
        assert check_gradients(lambda: weighted(transposed_conv2d(x, w, b)), [x, b], eps=1e-5) < 1e-6

    @settings(max_examples=20, deadline=None)
    @given(n=st.integers(1, 9), k=st.sampled_from([2, 4, 6]))
    def test_shape_inverse_of_conv(self, n, k):
        stride, pad = 2, (k - 2) // 2
        big = np.zeros((1, 1, stride * n, stride * n))
        down = conv2d(Tensor(big), Tensor(np.zeros((1, 1, k, k))), stride=stride, pad=pad)
        assert down.shape[-1] == n
        up = transposed_conv2d(down, Tensor(np.zeros((1, 1, k, k))), stride=stride, k=k, pad=pad)
        assert up.shape == big.shape


class TestMaxPool:
    def test_two_by_two(self):
        out = maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert out.data.item() == 4.0

    def test_constant(self):
        out = maxpool2d(Tensor(np.full((1, 2, 4, 4), 3.5)))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 3.5))

    def test_halves_224(self):
        assert maxpool2d(Tensor(np.zeros((1, 1, 224, 224), dtype=np.float32))).shape == (1, 1, 112, 112)

    def test_tie_routes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        backward(tsum(maxpool2d(x)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_indivisible(self):
        with pytest.raises(ConfigurationError):
            maxpool2d(Tensor(np.ones((1, 1, 5, 4))))

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        assert check_gradients(lambda: weighted(maxpool2d(x)), [x]) < 1e-6


class TestBatchNorm:
    def test_standardised_batch_passes_through(self, rng):
        x = rng.standard_normal((4, 2, 3, 3))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), RunningStats.fresh(2))
        # the 1e-5 variance floor rescales by exactly 1/sqrt(1 + eps)
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), atol=1e-12)
        assert np.abs(out.data - x).max() <= 5e-6 * np.abs(x).max()

    def test_constant_channel_gives_beta(self):
        out = batchnorm2d(Tensor(np.full((2, 1, 3, 3), 7.0)), Tensor(np.ones(1)),
                          Tensor(np.array([0.3])), RunningStats.fresh(1))
        np.testing.assert_allclose(out.data, 0.3, atol=1e-12)

    def test_train_statistics(self, rng):
        x = 5.0 * rng.standard_normal((5, 3, 4, 4)) + 2.0
        out = batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats.fresh(3)).data
        # direct statistics with the same epsilon folded back in
        mu = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mu, 0.0, atol=1e-6)
        x_var = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(var, x_var / (x_var + 1e-5), atol=1e-6)
        assert np.all(np.abs(var - 1.0) < 1e-6)

    def test_running_update_and_eval(self, rng):
        stats = RunningStats.fresh(2)
        x = rng.standard_normal((4, 2, 3, 3)) + 1.0
        batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, mode="train")
        n = 4 * 9
        np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
        out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, mode="eval")
        expected = (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            batchnorm2d(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                        RunningStats.fresh(2))

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal((3, 2, 3, 3)))
        g = Tensor(rng.standard_normal(2) + 1.5)
        b = Tensor(rng.standard_normal(2))
        stats = RunningStats.fresh(2)
        assert check_gradients(lambda: weighted(batchnorm2d(x, g, b, stats)), [x, g, b]) < 1e-6


class TestPointwise:
    def test_relu(self):
        np.testing.assert_array_equal(pointwise(Tensor([-1.0, 0.0, 2.0]), "relu").data, [0.0, 0.0, 2.0])

    def test_sigmoid_zero(self):
        assert pointwise(Tensor([0.0]), "sigmoid").data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = sigmoid(Tensor(np.array([-800.0, 800.0]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_sigmoid_gradient_closed_form(self, rng):
        xs = rng.uniform(-6, 6, 50)
        x = Tensor(xs, requires_grad=True)
        backward(tsum(sigmoid(x)))
        s = 1.0 / (1.0 + np.exp(-xs))
        np.testing.assert_allclose(x.grad, s * (1 - s), atol=1e-12)

    def test_relu_gradient_mask(self):
        x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        backward(tsum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0])

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            pointwise(Tensor([1.0]), "tanh")


class TestSoftmax:
    def test_uniform_logits(self):
        out = softmax(Tensor(np.full((2, 5), 3.0)), axis=1).data
        np.testing.assert_allclose(out, 0.2, atol=1e-15)

    def test_shift_invariance(self, rng):
        z = rng.standard_normal((3, 4))
        a = softmax(Tensor(z), axis=1).data
        b = softmax(Tensor(z + 123.4), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_against_exp_sum(self, rng):
        v = rng.standard_normal(4)
        np.testing.assert_allclose(softmax(Tensor(v), axis=0).data, softmax_list(list(v)), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.integers(1, 4))
    def test_normalised_and_open_interval(self, vals, rows):
        z = np.tile(np.asarray(vals), (rows, 1))
        s = softmax(Tensor(z), axis=1).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(s > 0) and np.all(s <= 1)

    def test_gradient(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        assert check_gradients(lambda: weighted(softmax(x, axis=1)), [x]) < 1e-6

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            softmax(Tensor(np.ones((2, 2))), axis=2)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        backward(tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_square(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        backward(x * x)
        assert x.grad == 6.0

    def test_accumulates(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        loss = x * x
        graph = Graph.from_root(loss)
        reverse_backward(graph, loss)
        reverse_backward(graph, loss)
        assert x.grad == 12.0

    def test_topological_order(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        y = relu(x) * x
        loss = tsum(y + x)
        nodes = Graph.from_root(loss).nodes
        pos = {id(n): i for i, n in enumerate(nodes)}
        for n in nodes:
            for p in n._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(n)]

    def test_non_scalar_rejected(self):
        with pytest.raises(UsageError):
            backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_conv_relu_sum_against_fd(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        w = Tensor(rng.standard_normal((2, 2, 3, 3)))
        b = Tensor(rng.standard_normal(2))
        assert check_gradients(lambda: tsum(relu(conv2d(x, w, b, pad=1))), [x, w, b]) < 1e-6


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        adam_step([p], AdamState())
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        p.grad = np.array([0.3, -7.0, 1e-3])
        state = AdamState()
        adam_step([p], state)
        np.testing.assert_allclose(p.data - np.array([1.0, -2.0, 0.5]), -5e-4 * np.sign(p.grad), rtol=1e-4)
        assert state.step == 1

    def test_quadratic_descent(self):
        w = Tensor(np.array(1.0), requires_grad=True)
        opt = Adam([w], lr=0.05)
        for _ in range(200):
            opt.zero_grad()
            backward(w * w)
            opt.step()
        # scalar simulation of the same recurrence
        m = v = 0.0
        ws = 1.0
        for t in range(1, 201):
            g = 2 * ws
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ws -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(w.data.item() - ws) < 1e-12
        assert abs(w.data.item()) < 0.05

    def test_missing_gradient(self):
        with pytest.raises(UsageError):
            adam_step([Tensor(np.ones(2), requires_grad=True)], AdamState())

    def test_step_counter(self):
        p = Tensor(np.ones(2), requires_grad=True)
        state = AdamState()
        for i in range(3):
            p.grad = np.ones(2)
            adam_step([p], state)
            assert state.step == i + 1
            assert state.m[0].shape == p.shape


class TestGradcheck:
    def test_linear_exact(self, rng):
        a = rng.uniform(1, 2, 6) * rng.choice([-1, 1], 6)
        point = 0.01 * rng.standard_normal(6)
        assert finite_diff_gradcheck(lambda x: tsum(x * Tensor(a)), point) < 1e-10

    def test_softmax_cross_entropy(self, rng):
        target = np.zeros((2, 4))
        target[0, 1] = target[1, 3] = 1

        def op(x):
            return -tsum(log(softmax(x, axis=1)) * Tensor(target))

        assert finite_diff_gradcheck(op, rng.standard_normal((2, 4))) < 1e-6

    def test_detects_sign_flip(self, rng):
        def bad_square(x):
            out = Tensor._from_op(x.data ** 2, (x,), lambda g: (-2 * x.data * g,))
            return tsum(out)

        assert finite_diff_gradcheck(bad_square, rng.uniform(0.5, 1.5, 5)) > 0.5

    def test_non_scalar(self, rng):
        with pytest.raises(UsageError):
            finite_diff_gradcheck(lambda x: x * 2.0, rng.standard_normal(3))

    def test_eps_range(self, rng):
        with pytest.raises(UsageError):
            finite_diff_gradcheck(lambda x: tsum(x), rng.standard_normal(3), eps=1e-2)


class TestProperties:
    def test_outputs_finite(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 8, 8)) * 50)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        out = softmax(relu(conv2d(x, w, pad=1)), axis=1)
        assert np.all(np.isfinite(out.data))

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        a = conv2d(Tensor(x), Tensor(w), pad=1).data
        b = conv2d(Tensor(x), Tensor(w), pad=1).data
        assert a.tobytes() == b.tobytes()
