import unittest

import numpy as np

from sgan.core.config import OptimizerConfig
from sgan.core.optim import SGD, step_lr
from sgan.core.tensor import Tensor


class StepLrTests(unittest.TestCase):
    def test_schedule(self):
        cfg = OptimizerConfig(base_lr=0.01, lr_decay=0.3, lr_steps=[10, 20])
        self.assertEqual(step_lr(cfg, 0), 0.01)
        self.assertAlmostEqual(step_lr(cfg, 10), 0.003)
        self.assertAlmostEqual(step_lr(cfg, 25), 0.0009)


class SgdTests(unittest.TestCase):
    def make(self, **kwargs):
        w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        b = Tensor(np.array([0.5]), requires_grad=True)
        cfg = OptimizerConfig(**{"base_lr": 0.1, "momentum": 0.9, "weight_decay": 0.0, "lr_steps": [], **kwargs})
        return w, b, SGD({"conv.weight": w, "conv.bias": b}, cfg)

    def test_zero_lr_leaves_parameters(self):
        w, b, opt = self.make(base_lr=0.0, weight_decay=5e-4)
        w.grad = np.array([1.0, 1.0])
        b.grad = np.array([1.0])
        opt.step()
        np.testing.assert_array_equal(w.data, [1.0, -2.0])
        np.testing.assert_array_equal(b.data, [0.5])

    def test_momentum(self):
        w, _, opt = self.make()
        for _ in range(2):
            w.grad = np.array([1.0, 0.0])
            opt.step()
        np.testing.assert_allclose(w.data, [1.0 - 0.1 - 0.1 * 1.9, -2.0])

    def test_weight_decay_skips_bias(self):
        w, b, opt = self.make(weight_decay=0.5)
        w.grad = np.zeros(2)
        b.grad = np.zeros(1)
        opt.step()
        np.testing.assert_allclose(w.data, [1.0 - 0.05, -2.0 + 0.1])
        np.testing.assert_array_equal(b.data, [0.5])

    def test_params_without_grad_untouched(self):
        w, b, opt = self.make()
        w.grad = np.ones(2)
        opt.step()
        np.testing.assert_array_equal(b.data, [0.5])

    def test_zero_grad(self):
        w, b, opt = self.make()
        w.grad = np.ones(2)
        opt.zero_grad()
        self.assertIsNone(w.grad)


if __name__ == "__main__":
    unittest.main()
