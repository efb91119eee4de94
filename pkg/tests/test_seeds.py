import tempfile
import unittest
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from sgan.core.backbone import CamStack
from sgan.core.seeds import (
    BACKGROUND,
    UNLABELED,
    SeedError,
    SeedMask,
    ensemble_cams,
    final_seeds,
    initial_seeds,
    read_seed_mask,
    semi_substitute,
    write_seed_mask,
)


def cams(*maps):
    return CamStack(np.array(maps, dtype=np.float64))


class InitialSeedTests(unittest.TestCase):
    def test_threshold(self):
        stack = cams([[0.31, 0.29]])
        seeds = initial_seeds(stack, np.array([1]), 0.3)
        np.testing.assert_array_equal(seeds.labels, [[1, UNLABELED]])

    def test_absent_class_never_seeds(self):
        stack = cams([[0.0]], [[0.9]])
        seeds = initial_seeds(stack, np.array([1, -1]))
        self.assertEqual(seeds.labels[0, 0], UNLABELED)

    def test_argmax_between_present_classes(self):
        stack = cams([[0.5]], [[0.4]])
        seeds = initial_seeds(stack, np.array([1, 1]))
        self.assertEqual(seeds.labels[0, 0], 1)

    def test_foreground_only(self):
        stack = cams(np.zeros((3, 3)))
        seeds = initial_seeds(stack, np.array([1]))
        self.assertFalse(seeds.background.any())


class EnsembleTests(unittest.TestCase):
    def test_zero_classifier_map(self):
        seg = cams([[0.2, 1.0]])
        np.testing.assert_array_equal(ensemble_cams(cams([[0.0, 0.0]]), seg).maps, seg.maps)

    def test_identical_maps(self):
        a = cams([[0.25, 1.0], [0.5, 0.0]])
        np.testing.assert_array_equal(ensemble_cams(a, a).maps, a.maps)

    def test_disjoint_peaks_both_kept(self):
        a = cams([[1.0, 0.0], [0.0, 0.0]])
        b = cams([[0.0, 0.0], [0.0, 1.0]])
        out = ensemble_cams(a, b).maps[0]
        self.assertEqual(out[0, 0], 1.0)
        self.assertEqual(out[1, 1], 1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(SeedError):
            ensemble_cams(cams([[0.0]]), cams([[0.0, 1.0]]))


class FinalSeedTests(unittest.TestCase):
    labels = np.array([1])

    def test_background_from_low_saliency(self):
        seeds = final_seeds(cams([[0.1]]), np.array([[0.05]]), self.labels, 0.2, 0.06)
        self.assertEqual(seeds.labels[0, 0], BACKGROUND)

    def test_foreground_above_alpha(self):
        seeds = final_seeds(cams([[0.25]]), np.array([[0.5]]), self.labels, 0.2, 0.06)
        self.assertEqual(seeds.labels[0, 0], 1)

    def test_conflict_is_unlabeled(self):
        seeds = final_seeds(cams([[0.25]]), np.array([[0.05]]), self.labels, 0.2, 0.06)
        self.assertEqual(seeds.labels[0, 0], UNLABELED)

    def test_grid_cams_upsampled(self):
        seeds = final_seeds(cams([[1.0, 0.0]]), np.full((4, 8), 0.5), self.labels)
        self.assertEqual(seeds.shape, (4, 8))
        self.assertTrue(np.all(seeds.labels[:, :4] == 1))
        self.assertTrue(np.all(seeds.labels[:, 4:] == UNLABELED))

    def test_monotone_in_alpha(self):
        rng = np.random.default_rng(0)
        stack = CamStack(rng.random((2, 8, 8)))
        counts = [final_seeds(stack, np.full((8, 8), 0.5), np.array([1, 1]), a).count() for a in (0.1, 0.2, 0.3)]
        self.assertGreaterEqual(counts[0], counts[1])
        self.assertGreaterEqual(counts[1], counts[2])

    def test_lower_beta_never_adds_background(self):
        rng = np.random.default_rng(1)
        stack = CamStack(rng.random((2, 8, 8)))
        saliency = rng.random((8, 8)) * 0.2
        previous = None
        for beta in (0.15, 0.1, 0.06, 0.02, 0.0):
            background = final_seeds(stack, saliency, np.array([1, 1]), 0.5, beta).background
            if previous is not None:
                self.assertFalse(np.any(background & ~previous), beta)
            previous = background


class SemiSubstituteTests(unittest.TestCase):
    def test_all_background(self):
        b, seeds = semi_substitute(SimpleNamespace(gt=np.zeros((3, 3), dtype=np.uint8)))
        self.assertFalse(b.any())
        self.assertTrue(seeds.background.all())

    def test_square_of_class_two(self):
        gt = np.zeros((6, 6), dtype=np.uint8)
        gt[1:4, 2:5] = 2
        b, seeds = semi_substitute(SimpleNamespace(gt=gt))
        np.testing.assert_array_equal(b, gt > 0)
        np.testing.assert_array_equal(seeds.pixels(2), gt == 2)

    def test_mixed_ground_truth(self):
        gt = np.array([[0, 1], [2, 1]], dtype=np.uint8)
        _, seeds = semi_substitute(SimpleNamespace(gt=gt))
        np.testing.assert_array_equal(seeds.labels, gt)

    def test_weak_sample_rejected(self):
        with self.assertRaises(SeedError):
            semi_substitute(SimpleNamespace(gt=None, sample_id="train_0001"))


class SeedMaskTests(unittest.TestCase):
    def test_pgm_round_trip(self):
        mask = SeedMask(np.array([[0, 1, 255], [3, 255, 0]], dtype=np.uint8))
        with tempfile.TemporaryDirectory() as tmp:
            path = write_seed_mask(Path(tmp) / "seeds" / "a.pgm", mask)
            self.assertEqual(read_seed_mask(path), mask)

    def test_grid_sampling_uses_cell_centres(self):
        labels = np.full((8, 8), UNLABELED, dtype=np.uint8)
        labels[2, 2] = 1
        labels[6, 2] = 0
        grid = SeedMask(labels).sample_grid(4)
        np.testing.assert_array_equal(grid.labels, [[1, UNLABELED], [0, UNLABELED]])

    def test_present_classes(self):
        mask = SeedMask(np.array([[0, 3, 255, 1]], dtype=np.uint8))
        self.assertEqual(mask.present_classes(), [1, 3])


if __name__ == "__main__":
    unittest.main()
