import unittest

import numpy as np

from sgan.core.attention import AttentionParams, sgan_forward
from sgan.core.backbone import ClassifierHead
from sgan.core.gradcheck import finite_diff_check
from sgan.core.losses import balanced_seed_loss, boundary_loss, classification_loss, seed_loss, sgan_total
from sgan.core.seeds import SeedMask
from sgan.core.tensor import (
    Tensor,
    TensorError,
    clamp,
    constant,
    conv2d,
    gap,
    log,
    matmul,
    maxpool2d,
    mul,
    relu,
    reshape,
    row_normalize,
    scale,
    sigmoid,
    softmax,
    tmean,
    transpose,
    tsum,
)

TOL = 1e-4


def f64(rng, *shape):
    return Tensor(rng.standard_normal(shape), dtype="f64")


class FiniteDifferenceTests(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)

    def check(self, f, x, tol=TOL):
        self.assertLess(finite_diff_check(f, x, eps=1e-6), tol)

    def test_linear_function_is_exact(self):
        w = constant(self.rng.standard_normal(6))
        self.check(lambda x: tsum(mul(x, w)), f64(self.rng, 6), tol=1e-8)

    def test_sum_of_squares_at_ones(self):
        self.check(lambda x: tsum(mul(x, x)), Tensor(np.ones(4), dtype="f64"))

    def test_conv2d_input_and_kernel(self):
        w = f64(self.rng, 3, 2, 3, 3)
        b = f64(self.rng, 3)
        x = f64(self.rng, 2, 5, 5)
        self.check(lambda t: tsum(mul(conv2d(t, w, b, stride=1, pad=1), conv2d(t, w, b, stride=1, pad=1))), x)
        self.check(lambda t: tsum(conv2d(x, t, b, stride=2, pad=1)), w)

    def test_conv_relu_gap_sigmoid_chain(self):
        w = f64(self.rng, 3, 2, 3, 3)
        self.check(lambda t: tsum(sigmoid(gap(relu(conv2d(t, w, pad=1))))), f64(self.rng, 2, 6, 6))

    def test_maxpool(self):
        self.check(lambda t: tsum(mul(maxpool2d(t, 2, 2), maxpool2d(t, 2, 2))), f64(self.rng, 1, 2, 4, 4))

    def test_matmul_transpose_reshape(self):
        b = f64(self.rng, 4, 3)
        self.check(lambda t: tsum(mul(matmul(reshape(transpose(t, (1, 0)), (2, 4)), b), matmul(reshape(transpose(t, (1, 0)), (2, 4)), b))), f64(self.rng, 4, 2))

    def test_softmax_log_clamp(self):
        target = constant(self.rng.random((3, 4)))
        self.check(lambda t: tsum(mul(log(clamp(softmax(t, axis=0), 1e-12, None)), target)), f64(self.rng, 3, 4))

    def test_mean_and_scale(self):
        self.check(lambda t: tsum(scale(tmean(mul(t, t), axis=1), 3.0)), f64(self.rng, 3, 5))

    def test_row_normalize_with_mask(self):
        mask = np.array([1, 0, 1, 1, 0])
        weights = constant(self.rng.standard_normal((5, 5)))
        self.check(lambda p: tsum(mul(row_normalize(p, mask=mask), weights)), Tensor(self.rng.uniform(0.1, 2.0, (5, 5)), dtype="f64"))

    def test_losses(self):
        seeds = SeedMask(np.array([[1, 255], [0, 2]]))
        y = np.array([1.0, -1.0, 1.0])
        self.check(lambda t: classification_loss(sigmoid(t), y), f64(self.rng, 3))
        self.check(lambda t: seed_loss(softmax(t, axis=0), seeds).value, f64(self.rng, 2, 2, 2))
        self.check(lambda t: balanced_seed_loss(softmax(t, axis=0), seeds), f64(self.rng, 3, 2, 2))
        r = np.full((3, 2, 2), 1.0 / 3.0)
        self.check(lambda t: boundary_loss(softmax(t, axis=0), r), f64(self.rng, 3, 2, 2))

    def test_full_sgan_loss_on_feature_grid(self):
        c, m, h, w = 4, 3, 4, 4
        params = AttentionParams(c, self.rng, dtype="f64", noise=0.1)
        params.params["gamma"].data = np.array(0.5)
        head = ClassifierHead(c, m, self.rng, dtype="f64")
        seed_w = f64(self.rng, m, c, 1, 1)
        saliency = np.zeros((h, w))
        saliency[1:3, 1:4] = 1.0
        seeds = SeedMask(np.full((h, w), 255, dtype=np.uint8))
        seeds.labels[1, 1] = 1
        seeds.labels[2, 3] = 3
        y = np.array([1.0, -1.0, 1.0])

        def loss(x):
            e = sgan_forward(x, saliency, 0.5, params)
            l_cls = classification_loss(head(e), y)
            l_seed = seed_loss(softmax(conv2d(e, seed_w), axis=0), seeds).value
            return sgan_total(l_cls, l_seed, 0.15)

        self.check(loss, Tensor(self.rng.uniform(0.1, 1.0, (c, h, w)), dtype="f64"))

    def test_requires_f64(self):
        with self.assertRaises(TensorError):
            finite_diff_check(lambda t: tsum(t), Tensor(np.ones(2), dtype="f32"))

    def test_eps_range(self):
        with self.assertRaises(TensorError):
            finite_diff_check(lambda t: tsum(t), Tensor(np.ones(2), dtype="f64"), eps=1e-2)


if __name__ == "__main__":
    unittest.main()
