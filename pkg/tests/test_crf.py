import math
import unittest
from unittest.mock import patch

import numpy as np

from sgan.core.config import CrfParams
from sgan.core.crf import CrfError, downsample_image, mean_field, pairwise_kernel


def random_phi(rng, labels, h, w):
    return rng.dirichlet(np.ones(labels), size=(h, w)).transpose(2, 0, 1)


class MeanFieldTests(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.image = self.rng.uniform(0, 255, (3, 4, 4))
        self.phi = random_phi(self.rng, 3, 4, 4)

    def test_no_pairwise_returns_phi(self):
        params = CrfParams(w_spatial=0.0, w_bilateral=0.0)
        np.testing.assert_allclose(mean_field(self.image, self.phi, params), self.phi, atol=1e-6)

    def test_zero_iterations_returns_phi(self):
        params = CrfParams(iterations=0)
        np.testing.assert_allclose(mean_field(self.image, self.phi, params), self.phi, atol=1e-6)

    def test_output_is_a_distribution(self):
        r = mean_field(self.image, self.phi, CrfParams())
        self.assertTrue(np.all(r >= 0))
        np.testing.assert_allclose(r.sum(axis=0), 1.0, atol=1e-12)

    def test_deterministic(self):
        a = mean_field(self.image, self.phi, CrfParams())
        b = mean_field(self.image, self.phi, CrfParams())
        np.testing.assert_array_equal(a, b)

    def test_two_pixel_single_iteration(self):
        params = CrfParams(w_spatial=3.0, w_bilateral=5.0, theta_gamma=3.0, theta_alpha=30.0, theta_beta=10.0, iterations=1)
        image = np.array([[[10.0, 20.0]], [[0.0, 0.0]], [[0.0, 5.0]]])
        phi = np.array([[[0.8, 0.3]], [[0.2, 0.7]]])
        d2, c2 = 1.0, 100.0 + 25.0
        k = 3.0 * math.exp(-d2 / 18.0) + 5.0 * math.exp(-d2 / 1800.0 - c2 / 200.0)
        expected = np.zeros((2, 2))
        for u, v in ((0, 1), (1, 0)):
            logits = np.log(phi[:, 0, u]) + k * phi[:, 0, v]
            expected[:, u] = np.exp(logits) / np.exp(logits).sum()
        r = mean_field(image, phi, params)
        np.testing.assert_allclose(r[:, 0, :], expected, atol=1e-9)

    def test_cap_raises_with_advice(self):
        params = CrfParams(max_positions=8)
        with self.assertRaises(CrfError) as ctx:
            mean_field(self.image, self.phi, params)
        self.assertIn("downsample", str(ctx.exception))

    def test_shape_mismatch(self):
        with self.assertRaises(CrfError):
            mean_field(self.image, random_phi(self.rng, 3, 2, 2), CrfParams())

    def test_smooths_towards_neighbours(self):
        image = np.full((3, 1, 3), 100.0)
        phi = np.array([[[0.9, 0.4, 0.9]], [[0.1, 0.6, 0.1]]])
        r = mean_field(image, phi, CrfParams(iterations=3))
        self.assertGreater(r[0, 0, 1], phi[0, 0, 1])

    def test_periodic_translation_equivariance(self):
        image = np.full((3, 4, 5), 80.0)
        phi = random_phi(self.rng, 3, 4, 5)
        params = CrfParams(iterations=3)
        r = mean_field(image, phi, params, periodic=True)
        for shift in ((1, 0), (0, 2), (3, 4)):
            with self.subTest(shift=shift):
                moved = mean_field(image, np.roll(phi, shift, axis=(1, 2)), params, periodic=True)
                np.testing.assert_allclose(moved, np.roll(r, shift, axis=(1, 2)), atol=1e-10)

    def test_cleans_noisy_two_region_image(self):
        rng = np.random.default_rng(4)
        truth = np.zeros((8, 8), dtype=int)
        truth[:, 4:] = 1
        image = np.where(truth == 1, 200.0, 0.0)[None].repeat(3, axis=0)
        flipped = rng.random((8, 8)) < 0.2
        noisy = np.where(flipped, 1 - truth, truth)
        phi = np.stack([np.where(noisy == k, 0.65, 0.35) for k in (0, 1)])
        r = mean_field(image, phi, CrfParams())
        before = int(np.sum(phi.argmax(axis=0) == truth))
        after = int(np.sum(r.argmax(axis=0) == truth))
        self.assertLess(before, truth.size)
        self.assertGreaterEqual(after, before)

    def test_warns_near_cap(self):
        with self.assertLogs("sgan.core.crf", level="WARNING") as logs:
            mean_field(self.image, self.phi, CrfParams(max_positions=18))
        self.assertIn("close to the cap", logs.output[0])
        with patch("sgan.core.crf.logger") as log:
            mean_field(self.image, self.phi, CrfParams(max_positions=4096))
        log.warning.assert_not_called()


class KernelTests(unittest.TestCase):
    def test_zero_diagonal_and_symmetric(self):
        image = np.random.default_rng(1).uniform(0, 255, (3, 3, 3))
        k = pairwise_kernel(image, CrfParams())
        np.testing.assert_array_equal(np.diag(k), 0.0)
        np.testing.assert_allclose(k, k.T)

    def test_pixel_pitch_scales_distance(self):
        image = np.zeros((3, 1, 2))
        params = CrfParams(w_bilateral=0.0)
        near = pairwise_kernel(image, params, pixel_pitch=1.0)[0, 1]
        far = pairwise_kernel(image, params, pixel_pitch=4.0)[0, 1]
        self.assertAlmostEqual(near, 3.0 * math.exp(-1 / 18.0))
        self.assertAlmostEqual(far, 3.0 * math.exp(-16 / 18.0))

    def test_downsample_image(self):
        image = np.arange(16, dtype=np.float64).reshape(1, 4, 4).repeat(3, axis=0)
        small = downsample_image(image, 2)
        self.assertEqual(small.shape, (3, 2, 2))
        self.assertEqual(small[0, 0, 0], (0 + 1 + 4 + 5) / 4)


if __name__ == "__main__":
    unittest.main()
