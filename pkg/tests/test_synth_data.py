import tempfile
import unittest
from pathlib import Path

import numpy as np

from sgan.core.config import DatasetConfig, SaliencyCorruption
from sgan.services.netpbm import NetpbmError
from sgan.services.synth_data import (
    MANIFEST,
    DatasetError,
    band_mask,
    corrupt_saliency,
    generate_dataset,
    load_dataset,
    load_manifest,
    write_dataset,
)


def small_config(**kwargs):
    base = {"image_size": 32, "shape_size": (6, 12), "train": 6, "val": 2, "rng_seed": 11}
    return DatasetConfig(**{**base, **kwargs})


class GenerateTests(unittest.TestCase):
    def test_deterministic(self):
        a = generate_dataset(small_config())
        b = generate_dataset(small_config())
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)
            np.testing.assert_array_equal(x.gt, y.gt)
            np.testing.assert_array_equal(x.labels, y.labels)

    def test_different_seed_differs(self):
        a = generate_dataset(small_config())
        b = generate_dataset(small_config(rng_seed=12))
        self.assertFalse(all(np.array_equal(x.image, y.image) for x, y in zip(a, b)))

    def test_labels_match_ground_truth(self):
        for s in generate_dataset(small_config()):
            self.assertEqual(s.image.shape, (3, 32, 32))
            self.assertEqual(s.image.dtype, np.uint8)
            present = sorted(int(c) for c in np.unique(s.gt) if c > 0)
            self.assertEqual(s.present_classes(), present)
            self.assertTrue(set(np.unique(s.labels)) <= {-1, 1})

    def test_single_shape_single_label(self):
        for s in generate_dataset(small_config(min_shapes=1, max_shapes=1)):
            self.assertEqual(int((s.labels > 0).sum()), 1)

    def test_splits_and_ids(self):
        samples = generate_dataset(small_config())
        self.assertEqual([s.split for s in samples].count("train"), 6)
        self.assertEqual(samples[0].sample_id, "train_0000")
        self.assertEqual(samples[-1].sample_id, "val_0001")

    def test_biased_class_inside_band(self):
        cfg = small_config(co_occurrence_bias=True, biased_class=2, train=12)
        band = band_mask(32)
        for s in generate_dataset(cfg):
            self.assertEqual(s.has_band, 2 in s.present_classes())
            self.assertFalse(np.any((s.gt == 2) & ~band))

    def test_clean_saliency_is_foreground(self):
        for s in generate_dataset(small_config()):
            np.testing.assert_array_equal(s.saliency, (s.gt > 0).astype(np.float64))


class CorruptionTests(unittest.TestCase):
    def test_identity(self):
        clean = np.zeros((8, 8))
        clean[2:5, 3:6] = 1.0
        out = corrupt_saliency(clean, SaliencyCorruption(), np.random.default_rng(0))
        np.testing.assert_array_equal(out, clean)

    def test_dilate_square(self):
        clean = np.zeros((9, 9))
        clean[4, 4] = 1.0
        out = corrupt_saliency(clean, SaliencyCorruption(dilate_px=1), np.random.default_rng(0))
        self.assertEqual(out.sum(), 5)
        self.assertEqual(out[3, 4], 1.0)
        self.assertEqual(out[3, 3], 0.0)

    def test_erode_removes_thin_parts(self):
        clean = np.zeros((9, 9))
        clean[2:7, 2:7] = 1.0
        out = corrupt_saliency(clean, SaliencyCorruption(erode_px=1), np.random.default_rng(0))
        self.assertEqual(out.sum(), 9)

    def test_holes_only_remove(self):
        clean = np.ones((8, 8))
        out = corrupt_saliency(clean, SaliencyCorruption(hole_prob=1.0, hole_tile=4), np.random.default_rng(0))
        self.assertEqual(out.sum(), 0)

    def test_hole_fraction(self):
        corruption = SaliencyCorruption(hole_prob=0.1, hole_tile=4)
        removed = total = 0
        for seed in range(20):
            out = corrupt_saliency(np.ones((64, 64)), corruption, np.random.default_rng(seed))
            tiles = out.reshape(16, 4, 16, 4).max(axis=(1, 3))
            removed += int(np.sum(tiles == 0))
            total += tiles.size
        self.assertAlmostEqual(removed / total, 0.1, delta=0.03)

    def test_dilate_then_erode_keeps_square(self):
        clean = np.zeros((32, 32))
        clean[8:24, 8:24] = 1.0
        out = corrupt_saliency(clean, SaliencyCorruption(dilate_px=2, erode_px=2), np.random.default_rng(0))
        np.testing.assert_array_equal(out, clean)


class DatasetFilesTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_write_and_load(self):
        cfg = small_config()
        samples = generate_dataset(cfg)
        write_dataset(samples, self.root, cfg)
        manifest = load_manifest(self.root)
        self.assertEqual(manifest["num_classes"], 5)
        self.assertEqual(manifest["image_size"], 32)
        loaded = load_dataset(self.root, split="val")
        self.assertEqual(len(loaded), 2)
        np.testing.assert_array_equal(loaded[0].image, samples[6].image)
        np.testing.assert_array_equal(loaded[0].gt, samples[6].gt)
        np.testing.assert_array_equal(loaded[0].saliency, samples[6].saliency)

    def test_manifest_lists_every_file(self):
        cfg = small_config(train=3, val=1)
        write_dataset(generate_dataset(cfg), self.root, cfg)
        listed = {MANIFEST}
        for entry in load_manifest(self.root)["samples"]:
            listed.update(entry[key] for key in ("image", "saliency", "gt") if entry[key] is not None)
        written = {p.relative_to(self.root).as_posix() for p in self.root.rglob("*") if p.is_file()}
        self.assertEqual(written, listed)
        self.assertEqual(len(listed), 1 + 3 * 4)

    def test_missing_manifest(self):
        with self.assertRaises(DatasetError):
            load_manifest(self.root)

    def test_truncated_image(self):
        cfg = small_config(train=1, val=0)
        write_dataset(generate_dataset(cfg), self.root, cfg)
        path = self.root / "images" / "train_0000.ppm"
        path.write_bytes(path.read_bytes()[:40])
        with self.assertRaises(NetpbmError) as ctx:
            load_dataset(self.root)
        self.assertIn("train_0000.ppm", str(ctx.exception))


if __name__ == "__main__":
    unittest.main()
