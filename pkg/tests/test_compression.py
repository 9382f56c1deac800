import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcic import compression as C
from dcic import tensor as T
from dcic.tensor import Tensor, parameter

from gradcheck import gradcheck


def small_model(channels=8, sigma=1.0):
    return C.CompressionModel(np.random.default_rng(0), channels, sigma=sigma)


class TestEncodeDecodeShapes:
    def test_encode_shape_224(self):
        model = small_model(8)
        z = model.encode(Tensor(np.zeros((1, 3, 224, 224), np.float32)))
        assert z.shape == (1, 8, 28, 28)

    def test_encode_shape_64(self):
        model = small_model(16)
        z = model.encode(Tensor(np.zeros((1, 3, 64, 64), np.float32)))
        assert z.shape == (1, 16, 8, 8)

    def test_encode_rejects_indivisible(self):
        model = small_model(8)
        with pytest.raises(T.ShapeError, match="divisible by 8"):
            model.encode(Tensor(np.zeros((1, 3, 225, 224), np.float32)))

    def test_decode_mirrors_dims(self):
        model = small_model(8)
        y = model.decode(Tensor(np.zeros((1, 8, 28, 28), np.float32)))
        assert y.shape == (1, 3, 224, 224)

    def test_decode_channel_mismatch(self):
        model = small_model(8)
        with pytest.raises(T.ShapeError):
            model.decode(Tensor(np.zeros((1, 4, 8, 8), np.float32)))

    def test_zero_representation_decodes_finite_and_deterministic(self):
        model = small_model(4)
        rep = Tensor(np.zeros((1, 4, 8, 8), np.float32))
        a = model.decode(rep).data
        b = model.decode(rep).data
        assert np.all(np.isfinite(a))
        assert np.array_equal(a, b)


class TestQuantizeHard:
    def test_nearest(self):
        syms, vals = C.quantize_hard(np.array([0.3]), np.array([-1.0, 0.0, 1.0]))
        assert syms[0] == 1 and vals[0] == 0.0

    def test_exact_center(self):
        syms, vals = C.quantize_hard(np.array([1.0]), np.array([-1.0, 0.0, 1.0]))
        assert syms[0] == 2 and vals[0] == 1.0

    def test_tie_breaks_low(self):
        syms, _ = C.quantize_hard(np.array([0.5]), np.array([0.0, 1.0]))
        assert syms[0] == 0

    def test_empty_centers(self):
        with pytest.raises(ValueError):
            C.quantize_hard(np.array([0.5]), np.array([]))


class TestQuantizeSoft:
    def test_large_sigma_approaches_hard(self):
        z = Tensor(np.array([0.2]))
        centers = Tensor(np.array([0.0, 1.0]))
        probs, value = C.quantize_soft(z, centers, sigma=200.0)
        assert probs.data[0, 0] > 0.999
        assert abs(value.item()) < 1e-4

    def test_equidistant_probs(self):
        z = Tensor(np.array([0.5]))
        centers = Tensor(np.array([0.0, 1.0]))
        probs, value = C.quantize_soft(z, centers, sigma=3.0)
        assert np.allclose(probs.data, 0.5, atol=1e-6)
        assert abs(value.item() - 0.5) < 1e-6

    def test_symmetric_at_zero(self):
        probs, value = C.quantize_soft(Tensor(np.array([0.0])),
                                       Tensor(np.array([-1.0, 1.0])), sigma=1.0)
        assert np.allclose(probs.data, 0.5, atol=1e-6)
        assert abs(value.item()) < 1e-6

    def test_sigma_validation(self):
        with pytest.raises(ValueError):
            C.quantize_soft(Tensor(np.array([0.0])), Tensor(np.array([0.0])), sigma=0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.2, 20.0))
    def test_probs_sum_to_one(self, seed, sigma):
        rng = np.random.default_rng(seed)
        z = Tensor(rng.uniform(-3, 3, (4, 5)).astype(np.float32))
        centers = Tensor(np.sort(rng.uniform(-2, 2, 6)).astype(np.float32))
        probs, _ = C.quantize_soft(z, centers, sigma)
        assert np.allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_gradients_through_soft_path(self, rng):
        z = parameter(rng.uniform(-1.5, 1.5, (2, 3)))
        centers = parameter(np.linspace(-1.0, 1.0, 4))
        probe = Tensor(rng.uniform(-1, 1, (2, 3)))

        def f():
            _, value = C.quantize_soft(z, centers, 1.3)
            return T.tsum(T.mul(value, probe))

        gradcheck(f, [z, centers], rng)


class TestQuantizeSte:
    def test_forward_equals_hard(self):
        z = Tensor(np.array([0.2, -0.9, 1.7]))
        centers = Tensor(np.array([0.0, 1.0]))
        out = C.quantize_ste(z, centers, sigma=1.0)
        assert np.array_equal(out.data, np.array([0.0, 0.0, 1.0]))

    def test_forward_values_in_center_set(self, rng):
        z = Tensor(rng.normal(0, 2, (64,)).astype(np.float32))
        centers = Tensor(np.linspace(-2, 2, 6).astype(np.float32))
        out = C.quantize_ste(z, centers, 1.0)
        assert np.isin(out.data, centers.data).all()

    def test_backward_matches_soft_value_jacobian(self, rng):
        # d(ste)/dz must equal the derivative of the soft expectation, not of
        # the hard staircase
        for _ in range(10):
            zval = float(rng.uniform(-1.4, 1.4))
            centers_arr = np.linspace(-1.5, 1.5, 5)
            z = parameter(np.array([zval]))
            centers = parameter(centers_arr.copy())
            z.zero_grad()
            with T.Tape() as tape:
                out = C.quantize_ste(z, centers, 1.1)
                loss = T.tsum(out)
            T.backward(loss, tape)
            step = 1e-4
            vals = []
            for dz in (step, -step):
                _, v = C.quantize_soft(Tensor(np.array([zval + dz])),
                                       Tensor(centers_arr), 1.1)
                vals.append(v.item())
            fd = (vals[0] - vals[1]) / (2 * step)
            assert abs(fd - z.grad[0]) / max(abs(fd), 1e-6) < 1e-3

    def test_center_gradients_match_soft_path(self, rng):
        z_arr = rng.uniform(-1.4, 1.4, (8,))
        probe = rng.uniform(-1, 1, (8,))

        def grads_via(fn):
            centers = parameter(np.linspace(-1.5, 1.5, 5))
            zt = Tensor(z_arr.copy())
            with T.Tape() as tape:
                out = fn(zt, centers)
                loss = T.tsum(T.mul(out, Tensor(probe)))
            T.backward(loss, tape)
            return centers.grad.copy()

        g_ste = grads_via(lambda zt, c: C.quantize_ste(zt, c, 0.9))
        g_soft = grads_via(lambda zt, c: C.quantize_soft(zt, c, 0.9)[1])
        assert np.allclose(g_ste, g_soft, atol=1e-6)

    def test_sigma_limit_consistency(self, rng):
        # soft -> hard as sigma grows, for draws inside the hull and away from
        # the decision boundaries (exactly at a midpoint the soft value stays
        # the midpoint for every sigma)
        z = rng.uniform(-2.0, 2.0, (400,))
        z = z[np.abs(z - np.round(z - 0.5) - 0.5) > 0.05]
        centers = np.arange(-2.0, 3.0)  # unit spacing
        _, soft = C.quantize_soft(Tensor(z), Tensor(centers), sigma=100.0)
        _, hard = C.quantize_hard(z, centers)
        assert np.abs(soft.data - hard).max() < 1e-4


class TestEntropy:
    def test_uniform_four(self):
        probs = Tensor(np.full((10, 4), 0.25, np.float32))
        assert abs(C.entropy_estimate(probs).item() - 2.0) < 1e-6

    def test_single_center(self):
        p = np.zeros((7, 3), np.float32)
        p[:, 1] = 1.0
        assert C.entropy_estimate(Tensor(p)).item() == 0.0

    def test_analytic_case(self):
        probs = Tensor(np.tile(np.array([0.5, 0.25, 0.25], np.float32), (4, 1)))
        assert abs(C.entropy_estimate(probs).item() - 1.5) < 1e-6

    def test_bounds(self, rng):
        for _ in range(10):
            raw = rng.uniform(0, 1, (20, 5))
            probs = raw / raw.sum(axis=1, keepdims=True)
            h = C.entropy_estimate(Tensor(probs)).item()
            assert 0.0 <= h <= np.log2(5) + 1e-9

    def test_gradient(self, rng):
        raw = rng.uniform(0.05, 1, (6, 4))
        probs = parameter(raw / raw.sum(axis=1, keepdims=True))
        gradcheck(lambda: C.entropy_estimate(probs), [probs], rng)


class TestRateDistortionLoss:
    def test_inactive_hinge_is_pure_mse(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 3)))
        y = Tensor(rng.uniform(-1, 1, (2, 3)))
        h = Tensor(np.array(0.5, np.float32))
        loss = C.rate_distortion_loss(x, y, h, beta=600.0, target_entropy=0.8)
        assert np.isclose(loss.item(), T.mse_loss(x, y).item(), atol=1e-7)

    def test_active_hinge_paper_regime(self):
        x = Tensor(np.zeros((2, 2), np.float32))
        h = Tensor(np.array(1.265 + 1.0, np.float32))
        loss = C.rate_distortion_loss(x, x, h, beta=150.0, target_entropy=1.265)
        assert np.isclose(loss.item(), 150.0, rtol=1e-6)

    def test_zero_at_target(self):
        x = Tensor(np.zeros((2, 2), np.float32))
        h = Tensor(np.array(0.8, np.float32))
        assert C.rate_distortion_loss(x, x, h, 600.0, 0.8).item() == 0.0

    def test_hinge_gradient_zero_below_target(self, rng):
        # the rate term alone must send zero gradient when H < H_t
        z = parameter(rng.uniform(-1, 1, (4, 4)))
        centers = parameter(np.linspace(-2, 2, 6))
        with T.Tape() as tape:
            probs = C.soft_assign(z, centers, 1.0)
            ent = C.entropy_estimate(probs)
            target = ent.item() + 0.5  # strictly above the batch entropy
            rate_term = T.mul(T.relu(T.sub(ent, target)), 600.0)
        T.backward(rate_term, tape)
        assert np.array_equal(z.grad, np.zeros_like(z.grad))
        assert np.array_equal(centers.grad, np.zeros_like(centers.grad))


class TestNominalBpp:
    def test_low_rate_point(self):
        assert np.isclose(C.nominal_bpp(0.8, 8), 0.100)

    def test_high_rate_point(self):
        assert np.isclose(C.nominal_bpp(1.265, 32), 0.6325)

    def test_zero_target(self):
        assert C.nominal_bpp(0.0, 16) == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            C.nominal_bpp(-0.1, 8)
        with pytest.raises(ValueError):
            C.nominal_bpp(0.5, 0)

    def test_operating_point_dataclass(self):
        op = C.OperatingPoint(channels=8, target_entropy=0.8, beta=600.0)
        assert np.isclose(op.nominal_bpp, 0.1)


class TestCenters:
    def test_canonicalize_sorts_and_dedups(self):
        c = C.canonical_centers([1.0, -1.0, 1.0 + 5e-7, 0.0])
        assert np.allclose(c, [-1.0, 0.0, 1.0])
        assert (np.diff(c) > 0).all()

    def test_model_shape_invariant_on_batch(self, rng):
        model = small_model(4)
        for hw in (16, 24, 40):
            z = model.encode(Tensor(np.zeros((2, 3, hw, hw), np.float32)))
            assert z.shape == (2, 4, hw // 8, hw // 8)


def test_composed_path_gradients(rng):
    # encoder -> quantizer -> decoder -> MSE, end to end. Finite differences
    # need the smooth soft-quantizer surrogate: the hard forward is piecewise
    # constant, and the surrogate's Jacobian is exactly what quantize_ste
    # backpropagates (pinned by the ste-vs-soft tests above).
    model = C.CompressionModel(np.random.default_rng(3), channels=2, num_centers=4,
                               sigma=1.0)
    for p in model.named_parameters().values():  # float64 for the check
        p.data = p.data.astype(np.float64)
        p.zero_grad()
    x = parameter(rng.uniform(-0.5, 0.5, (1, 3, 16, 16)))

    def f():
        z = model.encode(x)
        _, rep = C.quantize_soft(z, model.centers, model.sigma)
        xhat = model.decode(rep)
        return T.mse_loss(x, xhat)

    params = model.named_parameters()
    targets = [x, params["centers"], params["encoder.conv1.weight"],
               params["decoder.up3.bias"]]
    gradcheck(f, targets, rng, n_coords=4)
