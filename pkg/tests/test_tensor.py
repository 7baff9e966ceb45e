import numpy as np
import pytest

from commands.gradcheck import op_cases
from errors import DomainError, ShapeMismatchError
from tensor import (
    Function,
    Graph,
    Tensor,
    backward,
    concat_channels,
    conv2d,
    elementwise,
    grad_check,
    reciprocal,
    reduce_mse,
    relu,
    repeat_channels,
    zero_grad,
)


def naive_conv(x, kernel, bias, stride, padding):
    c_out, c_in, k, _ = kernel.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out_h = (x.shape[1] + 2 * padding - k) // stride + 1
    out_w = (x.shape[2] + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                total = bias[o]
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            total += xp[c, i * stride + u, j * stride + v] * kernel[o, c, u, v]
                out[o, i, j] = total
    return out


class TestConv2d:
    def test_all_ones_with_padding(self):
        out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=float)
        np.testing.assert_array_equal(out.data[0], expected)

    def test_identity_kernel(self, rng):
        x = rng.uniform(-1, 1, size=(1, 6, 7))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_matches_direct_summation(self, rng):
        x = rng.uniform(-1, 1, size=(3, 5, 5))
        kernel = rng.uniform(-1, 1, size=(4, 3, 3, 3))
        bias = rng.uniform(-1, 1, size=4)
        out = conv2d(Tensor(x), Tensor(kernel), Tensor(bias))
        np.testing.assert_allclose(out.data, naive_conv(x, kernel, bias, 1, 0), rtol=0, atol=1e-12)

    def test_oracle_on_random_cases(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            k = int(rng.choice([1, 3, 5]))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 3))
            c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            h = int(rng.integers(max(1, k - 2 * padding), 9))
            w = int(rng.integers(max(1, k - 2 * padding), 9))
            x = rng.uniform(-1, 1, size=(c_in, h, w))
            kernel = rng.uniform(-1, 1, size=(c_out, c_in, k, k))
            bias = rng.uniform(-1, 1, size=c_out)
            out = conv2d(Tensor(x), Tensor(kernel), Tensor(bias), stride=stride, padding=padding)
            np.testing.assert_allclose(out.data, naive_conv(x, kernel, bias, stride, padding), rtol=0, atol=1e-12)

    def test_output_extent(self):
        out = conv2d(Tensor(np.zeros((2, 9, 7))), Tensor(np.zeros((5, 2, 3, 3))), Tensor(np.zeros(5)),
                     stride=2, padding=1)
        assert out.shape == (5, 5, 4)

    def test_batched_equals_per_image(self, rng):
        x = rng.uniform(-1, 1, size=(3, 2, 6, 6))
        kernel = Tensor(rng.uniform(-1, 1, size=(4, 2, 3, 3)))
        bias = Tensor(rng.uniform(-1, 1, size=4))
        batched = conv2d(Tensor(x), kernel, bias, padding=1)
        for n in range(3):
            np.testing.assert_allclose(batched.data[n], conv2d(Tensor(x[n]), kernel, bias, padding=1).data,
                                       rtol=0, atol=1e-12)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeMismatchError) as info:
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
        assert info.value.dimension == 'input channels'

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeMismatchError) as info:
            conv2d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros(1)))
        assert info.value.dimension == 'height'

    def test_bias_length(self):
        with pytest.raises(ShapeMismatchError):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(3)))


class TestElementwise:
    def test_relu_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        assert not relu(Tensor(-np.ones((2, 3)))).data.any()

    def test_relu_gradient(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        backward(relu(x).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_relu_subgradient_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        backward(relu(x).sum())
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_mul_by_ones(self, rng):
        x = rng.uniform(-1, 1, size=(2, 3, 3))
        np.testing.assert_array_equal(elementwise('mul', Tensor(x), Tensor(np.ones_like(x))).data, x)

    def test_reciprocal_values(self):
        np.testing.assert_array_equal(reciprocal(Tensor([1.0, 2.0, 4.0])).data, [1.0, 0.5, 0.25])

    def test_reciprocal_domain(self):
        with pytest.raises(DomainError):
            reciprocal(Tensor([1.0, 1e-4]))
        # the bound itself is allowed
        reciprocal(Tensor([-1e-3, 1e-3]))

    def test_sub_self_gradient_nets_out(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(2, 2)), requires_grad=True)
        out = elementwise('sub', x, x)
        assert not out.data.any()
        backward(out.sum())
        np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))

    def test_scalar_broadcast_only(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(2, 3)), requires_grad=True)
        np.testing.assert_array_equal((x * 2.0).data, x.data * 2.0)
        with pytest.raises(ShapeMismatchError):
            x + Tensor(np.ones((3,)))

    def test_scalar_operand_gradient_is_summed(self):
        s = Tensor(2.0, requires_grad=True)
        x = Tensor(np.ones((2, 2)))
        backward((x * s).sum())
        assert s.grad.shape == ()
        assert float(s.grad) == 4.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            elementwise('div', Tensor([1.0]), Tensor([1.0]))


class TestStructuralOps:
    def test_concat_preserves_order(self):
        a, b = Tensor(np.zeros((1, 2, 2))), Tensor(np.ones((1, 2, 2)))
        out = concat_channels([a, b])
        assert out.shape == (2, 2, 2)
        assert not out.data[0].any() and out.data[1].all()

    def test_concat_single_part_is_identity(self):
        a = Tensor(np.ones((1, 2, 2)))
        assert concat_channels([a]) is a

    def test_concat_routes_gradients(self, rng):
        a = Tensor(rng.uniform(-1, 1, size=(1, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, size=(2, 3, 3)), requires_grad=True)
        weights = rng.uniform(-1, 1, size=(3, 3, 3))
        backward((concat_channels([a, b]) * Tensor(weights)).sum())
        np.testing.assert_array_equal(a.grad, weights[:1])
        np.testing.assert_array_equal(b.grad, weights[1:])

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeMismatchError) as info:
            concat_channels([Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 3)))])
        assert 'width' in info.value.dimension

    def test_repeat_channels(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(1, 2, 2)), requires_grad=True)
        out = repeat_channels(x, 3)
        assert out.shape == (3, 2, 2)
        backward(out.sum())
        np.testing.assert_array_equal(x.grad, np.full((1, 2, 2), 3.0))

    def test_mse_values(self, rng):
        x = rng.uniform(-1, 1, size=(3, 4, 5))
        assert reduce_mse(Tensor(x), Tensor(x)).item() == 0.0
        assert reduce_mse(Tensor(x + 0.1), Tensor(x)).item() == pytest.approx(0.01, abs=1e-12)

    def test_reductions_are_zero_dimensional(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(2, 3)), requires_grad=True)
        assert reduce_mse(x, Tensor(np.zeros((2, 3)))).data.shape == ()
        assert x.sum().shape == ()
        assert x.mean().shape == ()
        assert (x.sum() * 2.0).shape == ()

    def test_reduced_scalar_broadcasts_over_tensor(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(3, 4, 4)), requires_grad=True)
        total = x.sum()
        out = x + total
        assert out.shape == (3, 4, 4)
        np.testing.assert_allclose(out.data, x.data + x.data.sum())
        backward(out.sum())
        # each entry feeds itself once and the broadcast total 48 times
        np.testing.assert_allclose(x.grad, np.full((3, 4, 4), 49.0))

    def test_mse_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            reduce_mse(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


class TestBackward:
    def test_square_sum(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(2, 3)), requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)

    def test_accumulates_until_zeroed(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(3,)), requires_grad=True)
        backward(x.sum())
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))
        zero_grad([x])
        assert x.grad is None

    def test_detached_receives_no_grad(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(3,)), requires_grad=True)
        y = Tensor(rng.uniform(-1, 1, size=(3,)), requires_grad=True)
        backward((x.detach() * y).sum())
        assert x.grad is None
        np.testing.assert_array_equal(y.grad, x.data)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeMismatchError):
            backward(x * 2.0)

    def test_loss_off_graph(self):
        with pytest.raises(DomainError):
            backward(Tensor(1.0))

    def test_graph_is_topological(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(1, 4, 4)), requires_grad=True)
        k = Tensor(rng.uniform(-1, 1, size=(1, 1, 3, 3)), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        y = relu(conv2d(x, k, b, padding=1))
        loss = reduce_mse(y + x, Tensor(np.zeros((1, 4, 4))))
        graph = Graph.from_output(loss)
        assert graph.nodes[-1].output is loss
        for position, node in enumerate(graph.nodes):
            assert all(i < position for i in node.inputs)
        assert len({id(n.output) for n in graph.nodes}) == len(graph.nodes)

    def test_conv_mse_against_finite_differences(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(2, 5, 5)), requires_grad=True)
        k = Tensor(rng.uniform(-1, 1, size=(3, 2, 3, 3)), requires_grad=True)
        bias = Tensor(np.zeros(3))
        target = Tensor(rng.uniform(-1, 1, size=(3, 5, 5)))
        report = grad_check(lambda a, b: reduce_mse(conv2d(a, b, bias, padding=1), target), [x, k])
        assert report.passed, report.summary()


class TestGradCheck:
    def test_sum_is_exact(self, rng):
        x = Tensor(rng.uniform(-1, 1, size=(3, 3)), requires_grad=True)
        report = grad_check(lambda a: a.sum(), [x])
        assert report.max_rel_err < 1e-10
        assert len(report.entries) == 9

    def test_restores_inputs(self, rng):
        data = rng.uniform(-1, 1, size=(2, 2))
        x = Tensor(data, requires_grad=True)
        grad_check(lambda a: (a * a).sum(), [x])
        np.testing.assert_array_equal(x.data, data)

    def test_corrupted_backward_is_reported(self, rng):
        class BrokenSquare(Function):
            name = 'broken_square'

            def forward(self, a):
                self.a = a
                return a * a

            def backward(self, grad):
                return (grad * self.a,)  # missing factor 2

        x = Tensor(rng.uniform(0.5, 1.0, size=(4,)), requires_grad=True)
        report = grad_check(lambda a: BrokenSquare.apply(a).sum(), [x])
        assert not report.passed
        assert len(report.failures) == 4

    def test_kink_crossings_are_not_judged(self):
        x = Tensor([0.0004, 0.5], requires_grad=True)
        report = grad_check(lambda a: relu(a).sum(), [x])
        assert report.skipped == 1
        assert report.passed

    @pytest.mark.parametrize('seed', range(5))
    def test_every_op_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        for name, f, inputs in op_cases(rng):
            report = grad_check(f, inputs, step=1e-3, tol=1e-4, seed=seed, name=name)
            assert report.passed, report.summary()

    def test_determinism(self, rng):
        x = rng.uniform(-1, 1, size=(2, 6, 6))
        k = rng.uniform(-1, 1, size=(3, 2, 3, 3))
        first = conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)), padding=1).data
        second = conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)), padding=1).data
        assert first.tobytes() == second.tobytes()
