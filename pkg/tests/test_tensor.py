import unittest

import numpy as np

from sgan.core.tensor import (
    GradError,
    ShapeError,
    Tensor,
    TensorError,
    add,
    backward,
    clamp,
    conv2d,
    gap,
    log,
    maxpool2d,
    mul,
    no_grad,
    relu,
    row_normalize,
    sigmoid,
    softmax,
    tsum,
)


def naive_conv(x, w, b=None):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh, ow = h - k + 1, wd - k + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            out[o, i, j] += x[c, i + di, j + dj] * w[o, c, di, dj]
        if b is not None:
            out[o] += b[o]
    return out


class ConvTests(unittest.TestCase):
    def test_all_ones_padded(self):
        x = Tensor(np.ones((1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, pad=1).data
        self.assertEqual(out[0, 1, 1], 9.0)
        for r, c in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            self.assertEqual(out[0, r, c], 4.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((3, 5, 5)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        np.testing.assert_allclose(conv2d(x, w).data, x.data, atol=1e-12)

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, naive_conv(x, w, b), atol=1e-10)

    def test_batched_shape_and_stride(self):
        x = Tensor(np.zeros((2, 3, 8, 8)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        self.assertEqual(conv2d(x, w, stride=2, pad=1).shape, (2, 4, 4, 4))

    def test_output_extent_grid(self):
        x = Tensor(np.zeros((2, 7, 8)))
        for k in (1, 2, 3, 5):
            for s in (1, 2, 3):
                for p in (0, 1, 2):
                    expected = ((7 + 2 * p - k) // s + 1, (8 + 2 * p - k) // s + 1)
                    with self.subTest(k=k, s=s, p=p):
                        w = Tensor(np.zeros((3, 2, k, k)))
                        self.assertEqual(conv2d(x, w, stride=s, pad=p).shape, (3, *expected))
                        if p <= k // 2:
                            self.assertEqual(maxpool2d(x, kernel=k, stride=s, pad=p).shape, (2, *expected))

    def test_channel_mismatch_names_primitive(self):
        with self.assertRaises(ShapeError) as ctx:
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
        self.assertIn("conv2d", str(ctx.exception))


class PrimitiveTests(unittest.TestCase):
    def test_maxpool_picks_max(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 4, 4))
        out = maxpool2d(x, kernel=2, stride=2).data
        np.testing.assert_array_equal(out[0], [[5, 7], [13, 15]])

    def test_gap(self):
        x = Tensor(np.arange(8, dtype=np.float64).reshape(2, 2, 2))
        np.testing.assert_allclose(gap(x).data, [1.5, 5.5])

    def test_elementwise_shape_mismatch(self):
        with self.assertRaises(ShapeError) as ctx:
            add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        self.assertIn("(3,)", str(ctx.exception))
        self.assertIn("(4,)", str(ctx.exception))

    def test_log_of_non_positive_raises(self):
        with self.assertRaises(TensorError):
            log(Tensor(np.array([1.0, 0.0])))

    def test_non_finite_data_rejected(self):
        with self.assertRaises(TensorError):
            Tensor(np.array([1.0, np.nan]))

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(2).standard_normal((3, 4)))
        np.testing.assert_allclose(softmax(x, axis=0).data.sum(axis=0), np.ones(4))

    def test_row_normalize_rows(self):
        p = Tensor(np.array([[1.0, 3.0], [-1.0, 2.0]]))
        d = row_normalize(p, eps=0.0).data
        np.testing.assert_allclose(d, [[0.25, 0.75], [0.0, 1.0]])

    def test_clamp_keeps_bounds(self):
        out = clamp(Tensor(np.array([-1.0, 0.5, 2.0])), 0.0, 1.0).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_dtype_follows_inputs(self):
        x = Tensor(np.ones(3), dtype="f32")
        self.assertEqual(sigmoid(x).dtype, np.float32)


class BackwardTests(unittest.TestCase):
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
        backward(tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_two_x(self):
        data = np.random.default_rng(1).standard_normal(5)
        x = Tensor(data, requires_grad=True)
        backward(tsum(mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * data)

    def test_shared_input_accumulates(self):
        data = np.array([1.0, -2.0, 3.0])
        x = Tensor(data, requires_grad=True)
        backward(tsum(mul(x, x) + x))
        np.testing.assert_allclose(x.grad, 2 * data + 1)

    def test_relu_gradient_zero_at_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        backward(tsum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_non_scalar_loss_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(GradError):
            backward(mul(x, x))

    def test_second_backward_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = tsum(mul(x, x))
        backward(loss)
        with self.assertRaises(GradError):
            backward(loss)

    def test_disconnected_loss_raises(self):
        with self.assertRaises(GradError):
            backward(tsum(Tensor(np.ones(3))))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = tsum(mul(x, x))
        self.assertFalse(y.requires_grad)
        self.assertTrue(y.is_leaf)


if __name__ == "__main__":
    unittest.main()
