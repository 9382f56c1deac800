import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcic import tensor as T
from dcic.tensor import Tensor

from gradcheck import gradcheck, uniform


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).uniform(-1, 1, (2, 1, 6, 6)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), np.float32))
        assert np.array_equal(T.conv2d(x, w).data, x.data)

    def test_ones_kernel_on_constant(self):
        x = Tensor(np.full((1, 1, 7, 7), 7.0, np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), np.float32))
        y = T.conv2d(x, w, padding="valid")
        assert y.shape == (1, 1, 5, 5)
        assert np.allclose(y.data, 63.0)

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 2, 4, 4), np.float32))
        w = Tensor(np.zeros((1, 3, 3, 3), np.float32))
        with pytest.raises(T.ShapeError, match="channels"):
            T.conv2d(x, w)

    def test_empty_output(self):
        x = Tensor(np.zeros((1, 1, 2, 2), np.float32))
        w = Tensor(np.zeros((1, 1, 5, 5), np.float32))
        with pytest.raises(T.ShapeError, match="empty"):
            T.conv2d(x, w, padding="valid")

    def test_same_padding_shape_rule(self):
        for size, stride in [(224, 2), (64, 2), (28, 1), (15, 2)]:
            x = Tensor(np.zeros((1, 1, size, size), np.float32))
            w = Tensor(np.zeros((1, 1, 5, 5), np.float32))
            y = T.conv2d(x, w, stride=stride)
            expected = -(-size // stride)
            assert y.shape[2] == expected

    @pytest.mark.parametrize("stride,dilation,padding,kernel",
                             [(1, 1, "same", 3), (2, 1, "same", 5), (2, 2, "valid", 3),
                              (1, 3, "same", 3), (1, 1, "same", 1), (3, 1, "valid", 3)])
    def test_gradients(self, rng, stride, dilation, padding, kernel):
        x = uniform(rng, (2, 3, 7, 7))
        w = uniform(rng, (4, 3, kernel, kernel))
        b = uniform(rng, (4,))
        probe = Tensor(rng.uniform(-1, 1, T.conv2d(x, w, b, stride, dilation, padding).shape))
        gradcheck(lambda: T.tsum(T.mul(T.conv2d(x, w, b, stride, dilation, padding), probe)),
                  [x, w, b], rng)

    def test_gradient_many_instances(self, rng):
        worst = 0.0
        for _ in range(20):
            x = uniform(rng, (1, 2, 5, 5))
            w = uniform(rng, (3, 2, 3, 3))
            worst = max(worst, gradcheck(lambda: T.tsum(T.conv2d(x, w)), [x, w], rng,
                                         n_coords=3))
        assert worst < 1e-3

    def test_dilated_receptive_field(self):
        # impulse response support must span k + (k-1)(d-1)
        for k, d in [(3, 1), (3, 2), (3, 4), (5, 2)]:
            size = k + (k - 1) * (d - 1)
            x = np.zeros((1, 1, 2 * size + 1, 2 * size + 1), np.float32)
            x[0, 0, size, size] = 1.0
            w = Tensor(np.ones((1, 1, k, k), np.float32))
            y = T.conv2d(Tensor(x), w, dilation=d).data[0, 0]
            rows = np.nonzero(y.any(axis=1))[0]
            assert rows.max() - rows.min() + 1 == size


class TestTransposedConv2d:
    def test_shape_rule(self):
        x = Tensor(np.zeros((1, 4, 14, 14), np.float32))
        w = Tensor(np.zeros((4, 3, 5, 5), np.float32))
        assert T.transposed_conv2d(x, w, stride=2).shape == (1, 3, 28, 28)

    def test_identity(self):
        x = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 1, 5, 5)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), np.float32))
        assert np.allclose(T.transposed_conv2d(x, w, stride=1).data, x.data)

    def test_adjoint_of_conv(self, rng):
        # <conv(x), y> == <x, conv_T(y)> on random cases
        for _ in range(5):
            x = rng.uniform(-1, 1, (2, 3, 8, 8))
            w = Tensor(rng.uniform(-1, 1, (5, 3, 3, 3)))
            y = rng.uniform(-1, 1, (2, 5, 4, 4))
            cx = T.conv2d(Tensor(x), w, stride=2).data
            ty = T.transposed_conv2d(Tensor(y), w, stride=2).data
            assert np.isclose((cx * y).sum(), (x * ty).sum(), rtol=1e-4)

    def test_gradients(self, rng):
        x = uniform(rng, (2, 4, 5, 5))
        w = uniform(rng, (4, 3, 3, 3))
        probe = Tensor(rng.uniform(-1, 1, (2, 3, 10, 10)))
        gradcheck(lambda: T.tsum(T.mul(T.transposed_conv2d(x, w, 2), probe)), [x, w], rng)


class TestBatchNorm:
    def test_constant_input_gives_shift(self, rng):
        x = Tensor(np.full((4, 3, 5, 5), 2.5, np.float32))
        scale = T.parameter(np.ones(3, np.float32))
        shift = T.parameter(np.array([1.0, -2.0, 0.5], np.float32))
        y = T.batch_norm(x, scale, shift, np.zeros(3, np.float32), np.ones(3, np.float32),
                         train=True)
        assert np.allclose(y.data, shift.data.reshape(1, 3, 1, 1), atol=1e-4)

    def test_normalized_input_passthrough(self, rng):
        x = rng.normal(size=(8, 2, 16, 16)).astype(np.float32)
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        y = T.batch_norm(Tensor(x), T.parameter(np.ones(2, np.float32)),
                         T.parameter(np.zeros(2, np.float32)),
                         np.zeros(2, np.float32), np.ones(2, np.float32), train=True)
        assert np.allclose(y.data, x, atol=1e-5)

    def test_empty_batch(self):
        with pytest.raises(T.ShapeError):
            T.batch_norm(Tensor(np.zeros((0, 2, 3, 3), np.float32)),
                         T.parameter(np.ones(2)), T.parameter(np.zeros(2)),
                         np.zeros(2), np.ones(2), train=True)

    def test_gradients(self, rng):
        x = uniform(rng, (4, 3, 5, 5))
        scale = uniform(rng, (3,), 0.5, 1.5)
        shift = uniform(rng, (3,))
        probe = Tensor(rng.uniform(-1, 1, (4, 3, 5, 5)))
        gradcheck(lambda: T.tsum(T.mul(
            T.batch_norm(x, scale, shift, np.zeros(3), np.ones(3), True), probe)),
            [x, scale, shift], rng)

    def test_eval_uses_running_stats(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        rm = np.array([0.5, -0.5, 0.0])
        rv = np.array([2.0, 1.0, 0.5])
        y = T.batch_norm(x, T.parameter(np.ones(3)), T.parameter(np.zeros(3)),
                         rm, rv, train=False)
        expected = (x.data - rm.reshape(1, 3, 1, 1)) / np.sqrt(rv.reshape(1, 3, 1, 1) + 1e-5)
        assert np.allclose(y.data, expected, atol=1e-6)
        assert rm[0] == 0.5  # eval must not touch running stats


class TestEltwise:
    def test_relu_examples(self, rng):
        x = rng.uniform(0.1, 1.0, (3, 3))
        assert np.array_equal(T.relu(Tensor(-x)).data, np.zeros_like(x))

    def test_relu_gradient_mask(self, rng):
        x = T.parameter(rng.uniform(-1, 1, (5, 5)))
        with T.Tape() as tape:
            loss = T.tsum(T.relu(x))
        T.backward(loss, tape)
        assert np.array_equal(x.grad, (x.data > 0).astype(x.data.dtype))

    def test_residual_add(self, rng):
        t = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        z = Tensor(np.zeros((2, 3, 4, 4)))
        assert np.array_equal(T.residual_add(t, z).data, t.data)
        with pytest.raises(T.ShapeError):
            T.residual_add(t, Tensor(np.zeros((2, 3, 4, 5))))


class TestPooling:
    def test_global_avg_pool_constant(self):
        x = Tensor(np.full((2, 3, 6, 6), 4.0, np.float32))
        assert np.allclose(T.global_avg_pool(x).data, 4.0)

    def test_max_pool_spike(self):
        x = np.zeros((1, 1, 8, 8), np.float32)
        x[0, 0, 3, 3] = 5.0
        y = T.max_pool(Tensor(x), kernel=3, stride=2).data
        assert y.max() == 5.0
        assert (y == 5.0).sum() >= 1

    def test_max_pool_too_small(self):
        with pytest.raises(T.ShapeError):
            T.max_pool(Tensor(np.zeros((1, 1, 2, 2), np.float32)), kernel=3)

    def test_max_pool_gradient(self, rng):
        x = uniform(rng, (2, 2, 7, 7))  # random values make ties measure-zero
        probe = Tensor(rng.uniform(-1, 1, T.max_pool(x).shape))
        gradcheck(lambda: T.tsum(T.mul(T.max_pool(x), probe)), [x], rng)

    def test_max_pool_tie_breaks_to_first(self):
        x = T.parameter(np.zeros((1, 1, 3, 3)))
        with T.Tape() as tape:
            loss = T.tsum(T.max_pool(x, kernel=3, stride=2, padding="valid"))
        T.backward(loss, tape)
        expected = np.zeros((3, 3))
        expected[0, 0] = 1.0
        assert np.array_equal(x.grad[0, 0], expected)

    def test_gap_gradient(self, rng):
        x = uniform(rng, (2, 3, 4, 4))
        probe = Tensor(rng.uniform(-1, 1, (2, 3)))
        gradcheck(lambda: T.tsum(T.mul(T.global_avg_pool(x), probe)), [x], rng)


class TestLinear:
    def test_identity(self, rng):
        x = Tensor(rng.uniform(-1, 1, (4, 3)))
        w = Tensor(np.eye(3))
        assert np.allclose(T.linear(x, w).data, x.data)

    def test_zero_weight_broadcasts_bias(self, rng):
        x = Tensor(rng.uniform(-1, 1, (4, 3)))
        b = Tensor(np.array([1.0, 2.0]))
        y = T.linear(x, Tensor(np.zeros((3, 2))), b)
        assert np.allclose(y.data, np.tile(b.data, (4, 1)))

    def test_gradients(self, rng):
        x = uniform(rng, (4, 6))
        w = uniform(rng, (6, 3))
        b = uniform(rng, (3,))
        probe = Tensor(rng.uniform(-1, 1, (4, 3)))
        gradcheck(lambda: T.tsum(T.mul(T.linear(x, w, b), probe)), [x, w, b], rng)


class TestLosses:
    def test_mse_zero_and_constant(self, rng):
        x = Tensor(rng.uniform(-1, 1, (3, 4)))
        assert T.mse_loss(x, x).item() == 0.0
        c = Tensor(np.full((3, 4), 0.7))
        assert np.isclose(T.mse_loss(Tensor(np.zeros((3, 4))), c).item(), 0.49)

    def test_mse_gradient_analytic(self, rng):
        x = T.parameter(rng.uniform(-1, 1, (3, 4)))
        y = Tensor(rng.uniform(-1, 1, (3, 4)))
        with T.Tape() as tape:
            loss = T.mse_loss(x, y)
        T.backward(loss, tape)
        assert np.allclose(x.grad, 2 * (x.data - y.data) / 12, atol=1e-7)
        gradcheck(lambda: T.mse_loss(x, y), [x], np.random.default_rng(0))

    def test_cross_entropy_uniform(self):
        logits = Tensor(np.zeros((2, 1000), np.float32))
        loss = T.softmax_cross_entropy(logits, np.array([3, 988]))
        assert abs(loss.item() - np.log(1000)) < 1e-4

    def test_cross_entropy_saturated(self):
        logits = np.zeros((1, 10), np.float32)
        logits[0, 4] = 1e4
        assert T.softmax_cross_entropy(Tensor(logits), np.array([4])).item() < 1e-6

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValueError, match="range"):
            T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_cross_entropy_gradient(self, rng):
        logits = uniform(rng, (5, 4))
        labels = rng.integers(0, 4, 5)
        gradcheck(lambda: T.softmax_cross_entropy(logits, labels), [logits], rng)
        logits.zero_grad()
        with T.Tape() as tape:
            loss = T.softmax_cross_entropy(logits, labels)
        T.backward(loss, tape)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        p[np.arange(5), labels] -= 1
        assert np.allclose(logits.grad, p / 5, atol=1e-7)

    def test_cross_entropy_ignore_label(self, rng):
        logits = Tensor(rng.uniform(-1, 1, (4, 3)))
        labels = np.array([0, 255, 2, 255])
        kept = T.softmax_cross_entropy(logits, labels, ignore_label=255).item()
        manual = T.softmax_cross_entropy(
            Tensor(logits.data[[0, 2]]), np.array([0, 2])).item()
        assert np.isclose(kept, manual, atol=1e-6)


class TestBackwardEngine:
    def test_sum_gives_ones(self, rng):
        p = T.parameter(rng.uniform(-1, 1, (3, 3)))
        with T.Tape() as tape:
            loss = T.tsum(p)
        T.backward(loss, tape)
        assert np.array_equal(p.grad, np.ones((3, 3)))

    def test_two_layer_composition(self, rng):
        x = uniform(rng, (2, 5))
        w1 = uniform(rng, (5, 4))
        w2 = uniform(rng, (4, 3))
        gradcheck(lambda: T.tsum(T.mul(T.linear(T.relu(T.linear(x, w1)), w2),
                                       T.linear(T.relu(T.linear(x, w1)), w2))),
                  [x, w1, w2], rng)

    def test_unused_parameter_zero_grad(self, rng):
        used = T.parameter(rng.uniform(-1, 1, (2, 2)))
        unused = T.parameter(rng.uniform(-1, 1, (2, 2)))
        with T.Tape() as tape:
            loss = T.tsum(used)
        T.backward(loss, tape)
        assert np.array_equal(unused.grad, np.zeros((2, 2)))

    def test_tape_reuse_rejected(self, rng):
        p = T.parameter(rng.uniform(-1, 1, (2,)))
        with T.Tape() as tape:
            loss = T.tsum(p)
        T.backward(loss, tape)
        with pytest.raises(T.TapeConsumedError):
            T.backward(loss, tape)

    def test_fanout_accumulates_both_contributions(self, rng):
        x = uniform(rng, (3, 3))
        c = Tensor(np.full((3, 3), 2.0))
        gradcheck(lambda: T.add(T.tsum(T.mul(x, x)), T.tsum(T.mul(x, c))), [x], rng)
        x.zero_grad()
        with T.Tape() as tape:
            loss = T.add(T.tsum(T.mul(x, x)), T.tsum(T.mul(x, c)))
        T.backward(loss, tape)
        assert np.allclose(x.grad, 2 * x.data + 2.0, atol=1e-6)

    def test_no_tape_records_nothing(self, rng):
        p = T.parameter(rng.uniform(-1, 1, (2,)))
        out = T.tsum(p)  # outside any tape
        assert not out.requires_grad

    def test_scalar_loss_required(self, rng):
        p = T.parameter(rng.uniform(-1, 1, (2,)))
        with T.Tape() as tape:
            out = T.mul(p, 2.0)
        with pytest.raises(T.ShapeError):
            T.backward(out, tape)


class TestUpsampling:
    def test_nearest_values(self):
        x = Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
        y = T.nearest_upsample(x, 2).data[0, 0]
        assert np.array_equal(y[:2, :2], np.zeros((2, 2)))
        assert np.array_equal(y[2:, 2:], np.full((2, 2), 3.0))

    def test_bilinear_identity_and_grad(self, rng):
        x = uniform(rng, (1, 2, 4, 4))
        same = T.bilinear_upsample(x, (4, 4))
        assert np.allclose(same.data, x.data, atol=1e-6)
        probe = Tensor(rng.uniform(-1, 1, (1, 2, 8, 8)))
        gradcheck(lambda: T.tsum(T.mul(T.bilinear_upsample(x, (8, 8)), probe)), [x], rng)
        probe2 = Tensor(rng.uniform(-1, 1, (1, 2, 8, 8)))
        gradcheck(lambda: T.tsum(T.mul(T.nearest_upsample(x, 2), probe2)), [x], rng)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_forward_outputs_finite_for_bounded_inputs(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-10, 10, (2, 3, 8, 8)).astype(np.float32))
    w = Tensor(rng.uniform(-1, 1, (4, 3, 3, 3)).astype(np.float32))
    b = Tensor(rng.uniform(-1, 1, 4).astype(np.float32))
    y = T.conv2d(x, w, b, stride=2)
    y = T.batch_norm(y, T.parameter(np.ones(4, np.float32)),
                     T.parameter(np.zeros(4, np.float32)),
                     np.zeros(4, np.float32), np.ones(4, np.float32), train=True)
    y = T.max_pool(T.relu(y), kernel=3, stride=2)
    assert np.all(np.isfinite(y.data))


def test_deterministic_parameter_trajectory():
    from dcic.layers import Conv2d
    from dcic.optim import SgdMomentum

    def run():
        rng = np.random.default_rng(7)
        layer = Conv2d(rng, 3, 4, 3)
        opt = SgdMomentum({"w": layer.weight, "b": layer.bias}, lr=0.1)
        x = Tensor(np.random.default_rng(8).uniform(-1, 1, (2, 3, 6, 6)).astype(np.float32))
        for _ in range(3):
            with T.Tape() as tape:
                loss = T.mse_loss(layer(x), Tensor(np.zeros((2, 4, 6, 6), np.float32)))
            T.backward(loss, tape)
            opt.step()
            opt.zero_grad()
        return layer.weight.data.tobytes()

    assert run() == run()
