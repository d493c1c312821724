"""Optimizer unit tests."""

import numpy as np
import pytest

from sparsesplat.errors import InvalidInputError
from sparsesplat.optim import Adam, cosine_lr, exponential_lr


class TestAdam:
    def test_converges_on_quadratic(self):
        x = np.array([3.0, -2.0, 7.0])
        opt = Adam()
        for _ in range(800):
            opt.step("x", x, 2.0 * x, lr=0.05)
        np.testing.assert_allclose(x, 0.0, atol=1e-4)

    def test_first_step_magnitude_is_lr(self):
        """Bias correction makes the initial step ~lr regardless of gradient scale."""
        for scale in (1e-6, 1.0, 1e6):
            x = np.array([1.0])
            Adam().step("x", x, np.array([scale]), lr=0.01)
            # eps in the denominator shaves up to ~1% off the smallest scale
            assert x[0] == pytest.approx(1.0 - 0.01, rel=0.02)

    def test_per_row_learning_rates(self):
        x = np.ones((3, 2))
        lr = np.array([[0.1], [0.0], [0.2]])
        Adam().step("x", x, np.ones_like(x), lr=lr)
        np.testing.assert_array_equal(x[1], 1.0)  # zero-lr row pinned
        assert x[0, 0] < 1.0
        assert x[2, 0] < x[0, 0]

    def test_state_is_per_key(self):
        opt = Adam()
        a = np.array([1.0])
        b = np.array([1.0])
        opt.step("a", a, np.array([1.0]), lr=0.1)
        opt.step("b", b, np.array([1.0]), lr=0.1)
        assert opt.t == {"a": 1, "b": 1}

    def test_deterministic(self):
        def run():
            x = np.array([0.5, -0.5])
            opt = Adam()
            for i in range(50):
                opt.step("x", x, np.sin(x) + i * 0.01, lr=0.02)
            return x

        np.testing.assert_array_equal(run(), run())

    def test_invalid_hyperparameters(self):
        with pytest.raises(InvalidInputError):
            Adam(beta1=1.0)
        with pytest.raises(InvalidInputError):
            Adam(eps=0.0)


class TestSchedules:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 1e-2, 1e-4) == pytest.approx(1e-2)
        assert cosine_lr(99, 100, 1e-2, 1e-4) == pytest.approx(1e-4)
        assert cosine_lr(200, 100, 1e-2, 1e-4) == pytest.approx(1e-4)

    def test_cosine_monotone(self):
        vals = [cosine_lr(s, 50, 1.0, 0.0) for s in range(50)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_exponential_endpoints(self):
        assert exponential_lr(0, 200, 1e-3) == pytest.approx(1e-3)
        assert exponential_lr(199, 200, 1e-3) == pytest.approx(1e-4)

    def test_single_step_schedules(self):
        assert cosine_lr(0, 1, 0.5, 0.1) == 0.5
        assert exponential_lr(0, 1, 0.5) == 0.5
