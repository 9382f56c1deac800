import numpy as np

from dcic.optim import Adam, SgdMomentum
from dcic.tensor import parameter


def _param(value):
    return parameter(np.array(value, dtype=np.float32))


class TestSgdMomentum:
    def test_zero_grad_leaves_params(self):
        p = _param([1.0, -2.0])
        opt = SgdMomentum({"p": p}, lr=0.1, weight_decay=0.0)
        opt.step()
        assert np.array_equal(p.data, np.array([1.0, -2.0], np.float32))

    def test_single_step_formula(self):
        p = _param([1.0])
        opt = SgdMomentum({"p": p}, lr=0.1, momentum=0.9, weight_decay=0.01)
        p.grad[...] = 0.5
        opt.step()
        expected = 1.0 - 0.1 * (0.5 + 0.01 * 1.0)
        assert np.allclose(p.data, expected)

    def test_two_steps_constant_grad(self):
        # v1 = g, v2 = 0.9 g + g; total change lr*g*(1 + 1.9)
        p = _param([0.0])
        opt = SgdMomentum({"p": p}, lr=0.1, momentum=0.9)
        for _ in range(2):
            p.grad[...] = 1.0
            opt.step()
        assert np.allclose(p.data, -0.1 * (1.0 + 1.9), atol=1e-7)

    def test_lr_multiplier(self):
        a, b = _param([0.0]), _param([0.0])
        opt = SgdMomentum({"a": a, "b": b}, lr=0.1, momentum=0.0,
                          lr_multipliers={"b": 10.0})
        a.grad[...] = 1.0
        b.grad[...] = 1.0
        opt.step()
        assert np.allclose(b.data, 10 * a.data)

    def test_step_counter(self):
        p = _param([0.0])
        opt = SgdMomentum({"p": p}, lr=0.1)
        for i in range(3):
            opt.step()
            assert opt.step_count == i + 1


class TestAdam:
    def test_zero_grad_fresh_state(self):
        p = _param([3.0])
        opt = Adam({"p": p}, lr=0.1)
        opt.step()
        assert np.array_equal(p.data, np.array([3.0], np.float32))

    def test_first_step_magnitude_near_lr(self):
        # bias-corrected m/sqrt(v) -> g/|g| at t=1, so |update| ~ lr
        p = _param([0.0])
        opt = Adam({"p": p}, lr=0.01, eps=1e-8)
        p.grad[...] = 0.37
        opt.step()
        assert abs(abs(float(p.data[0])) - 0.01) < 1e-6

    def test_scale_invariance_of_first_step(self):
        updates = []
        for scale in (1.0, 10.0):
            p = _param([0.0])
            opt = Adam({"p": p}, lr=0.01)
            p.grad[...] = 0.2 * scale
            opt.step()
            updates.append(float(p.data[0]))
        assert abs(updates[0] - updates[1]) < 1e-7

    def test_matches_reference_sequence(self):
        # hand-rolled Adam over 3 steps with varying gradients
        p = _param([1.0])
        opt = Adam({"p": p}, lr=0.1, betas=(0.9, 0.999), eps=1e-8)
        theta, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate([0.3, -0.2, 0.5], start=1):
            p.grad[...] = g
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            assert np.allclose(p.data, np.float32(theta), atol=1e-6)
