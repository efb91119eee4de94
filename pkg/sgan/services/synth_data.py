"""Deterministic synthetic segmentation dataset.

Every sample is a 3×H×W uint8 image of 1..k class shapes on a procedural background,
with image-level labels, a ground-truth mask and a saliency map. Per-sample random
streams come from ``numpy.random.SeedSequence(rng_seed).spawn(n)`` feeding PCG64
generators, so a dataset is a pure function of its config on every platform numpy
supports.

Dataset directory layout (written by :func:`write_dataset`)::

    manifest.json          {"format": "sgan-synth", "version": 1, "num_classes": M,
                            "image_size": H, "config": {...},
                            "samples": [{"id", "split", "image", "gt", "saliency",
                                         "labels": [+1/-1 x M], "has_band"}]}
    images/<id>.ppm        P6 RGB
    gt/<id>.pgm            P5, 0 = background, k = class k
    saliency/<id>.pgm      P5, saliency * 255 rounded
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage
from tenacity import retry, retry_if_exception_type, stop_after_attempt

from sgan.core.config import DatasetConfig, SaliencyCorruption
from sgan.services import netpbm

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FORMAT = "sgan-synth"

SHAPES = ("circle", "square", "triangle", "cross", "ring")
CLASS_COLORS = np.array(
    [[205, 45, 45], [45, 175, 65], [55, 75, 215], [225, 200, 45], [185, 55, 190]], dtype=np.float64
)
NEUTRAL = np.array([128.0, 128.0, 128.0])


class DatasetError(RuntimeError):
    pass


class PlacementError(Exception):
    pass


@dataclass
class Sample:
    sample_id: str
    split: str
    image: np.ndarray
    labels: np.ndarray
    saliency: np.ndarray
    gt: np.ndarray | None = None
    has_band: bool = False

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def present_classes(self) -> list[int]:
        return [int(i) + 1 for i in np.flatnonzero(self.labels > 0)]


def band_mask(size: int) -> np.ndarray:
    """The paired-texture region: the lower half of the image."""
    mask = np.zeros((size, size), dtype=bool)
    mask[size // 2 :, :] = True
    return mask


def disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return xx * xx + yy * yy <= radius * radius


def shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if kind == "triangle":
        t = (dy + r) / (2 * r)
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= t * r)
    if kind == "cross":
        arm = max(r / 3.0, 1.5)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    raise DatasetError(f"unknown shape kind {kind!r}")


def texture(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """3×size×size float background texture; kind 2 is the paired (band) texture."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:
        period = rng.uniform(6.0, 10.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + yy) / period + phase)
        lo, hi = np.array([95.0, 100.0, 110.0]), np.array([140.0, 145.0, 150.0])
    elif kind == 1:
        cell = int(rng.integers(4, 9))
        wave = (((yy // cell) + (xx // cell)) % 2).astype(np.float64)
        lo, hi = np.array([120.0, 110.0, 95.0]), np.array([150.0, 140.0, 120.0])
    elif kind == 2:
        period = rng.uniform(5.0, 8.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * yy / period + 0.8 * np.sin(xx / 5.0) + phase)
        lo, hi = np.array([40.0, 90.0, 130.0]), np.array([70.0, 130.0, 170.0])
    else:
        raise DatasetError(f"unknown texture kind {kind}")
    return lo[:, None, None] + (hi - lo)[:, None, None] * wave[None]


def corrupt_saliency(clean: np.ndarray, corruption: SaliencyCorruption, rng: np.random.Generator) -> np.ndarray:
    """Dilate, then erode, then punch tile-sized holes into a binary saliency map."""
    mask = np.asarray(clean) >= 0.5
    if corruption.dilate_px:
        mask = ndimage.binary_dilation(mask, structure=disk(corruption.dilate_px))
    if corruption.erode_px:
        mask = ndimage.binary_erosion(mask, structure=disk(corruption.erode_px))
    if corruption.hole_prob > 0:
        t = corruption.hole_tile
        h, w = mask.shape
        for r0 in range(0, h, t):
            for c0 in range(0, w, t):
                tile = mask[r0 : r0 + t, c0 : c0 + t]
                if tile.any() and rng.random() < corruption.hole_prob:
                    tile[...] = False
    return mask.astype(np.float64)


class _ImageBuilder:
    def __init__(self, cfg: DatasetConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.rng = rng
        self.size = cfg.image_size

    def place(self, cls: int, gt: np.ndarray, inside_band: bool) -> tuple[np.ndarray, np.ndarray]:
        @retry(
            retry=retry_if_exception_type(PlacementError),
            stop=stop_after_attempt(self.cfg.max_placement_retries),
            reraise=True,
        )
        def attempt() -> tuple[np.ndarray, np.ndarray]:
            return self._try_place(cls, gt, inside_band)

        try:
            return attempt()
        except PlacementError as exc:
            raise DatasetError(
                f"could not place class {cls} after {self.cfg.max_placement_retries} attempts: {exc}"
            ) from exc

    def _try_place(self, cls: int, gt: np.ndarray, inside_band: bool) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.cfg.shape_size
        s = int(self.rng.integers(lo, hi + 1))
        r = s / 2.0
        top = self.size // 2 if inside_band else 0
        cy = self.rng.uniform(top + r, self.size - r - 1)
        cx = self.rng.uniform(r, self.size - r - 1)
        mask = shape_mask(SHAPES[cls - 1], self.size, cy, cx, r)
        if mask.sum() < 8:
            raise PlacementError("shape too small")
        for other in np.unique(gt[gt > 0]):
            region = gt == other
            visible = (region & ~mask).sum() / max(int(region.sum()), 1)
            if visible < self.cfg.min_visible:
                raise PlacementError(f"class {other} would be {visible:.0%} visible")
        ang = self.rng.uniform(0, 2 * np.pi)
        off = self.rng.uniform(0, 0.4 * r)
        core = shape_mask("circle", self.size, cy + off * np.sin(ang), cx + off * np.cos(ang), max(r / 3.0, 2.0)) & mask
        return mask, core

    def build(self, sample_id: str, split: str) -> Sample:
        cfg, rng, size = self.cfg, self.rng, self.size
        count = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        classes = [int(c) + 1 for c in rng.choice(cfg.num_classes, size=count, replace=False)]
        if cfg.co_occurrence_bias:
            has_band = cfg.biased_class in classes
        else:
            has_band = bool(rng.random() < cfg.band_probability)

        canvas = texture(int(rng.integers(0, 2)), size, rng)
        if has_band:
            band = band_mask(size)
            canvas[:, band] = texture(2, size, rng)[:, band]

        gt = np.zeros((size, size), dtype=np.uint8)
        for cls in classes:
            inside_band = cfg.co_occurrence_bias and cls == cfg.biased_class
            mask, core = self.place(cls, gt, inside_band)
            color = CLASS_COLORS[cls - 1]
            body = 0.45 * color + 0.55 * NEUTRAL
            canvas[:, mask] = body[:, None]
            canvas[:, core] = color[:, None]
            gt[mask] = cls

        canvas += rng.normal(0.0, cfg.pixel_noise, size=canvas.shape)
        image = np.clip(np.round(canvas), 0, 255).astype(np.uint8)

        present = sorted(int(c) for c in np.unique(gt) if c > 0)
        labels = -np.ones(cfg.num_classes, dtype=np.int8)
        labels[[c - 1 for c in present]] = 1
        clean = (gt > 0).astype(np.float64)
        saliency = corrupt_saliency(clean, cfg.saliency_corruption, rng)
        return Sample(sample_id, split, image, labels, saliency, gt=gt, has_band=has_band)


def generate_dataset(cfg: DatasetConfig) -> list[Sample]:
    total = cfg.train + cfg.val
    streams = np.random.SeedSequence(cfg.rng_seed).spawn(total)
    samples: list[Sample] = []
    for i, seq in enumerate(streams):
        split = "train" if i < cfg.train else "val"
        index = i if split == "train" else i - cfg.train
        builder = _ImageBuilder(cfg, np.random.Generator(np.random.PCG64(seq)))
        samples.append(builder.build(f"{split}_{index:04d}", split))
    logger.info("Generated %d samples (%d train / %d val, seed=%d)", total, cfg.train, cfg.val, cfg.rng_seed)
    return samples


def write_dataset(samples: list[Sample], root: Path | str, cfg: DatasetConfig | None = None) -> Path:
    root = Path(root)
    entries: list[dict[str, Any]] = []
    for s in samples:
        entry = {
            "id": s.sample_id,
            "split": s.split,
            "image": f"images/{s.sample_id}.ppm",
            "saliency": f"saliency/{s.sample_id}.pgm",
            "gt": f"gt/{s.sample_id}.pgm" if s.gt is not None else None,
            "labels": [int(v) for v in s.labels],
            "has_band": bool(s.has_band),
        }
        netpbm.write(root / entry["image"], s.image)
        netpbm.write(root / entry["saliency"], np.round(np.clip(s.saliency, 0, 1) * 255).astype(np.uint8))
        if s.gt is not None:
            netpbm.write(root / entry["gt"], s.gt)
        entries.append(entry)
    first = samples[0] if samples else None
    manifest = {
        "format": FORMAT,
        "version": 1,
        "num_classes": int(first.labels.size) if first else 0,
        "image_size": int(first.image.shape[1]) if first else 0,
        "config": cfg.model_dump(mode="json") if cfg is not None else {},
        "samples": entries,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info("Dataset written to %s (%d samples)", root, len(samples))
    return root / MANIFEST


def load_manifest(root: Path | str) -> dict[str, Any]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DatasetError(f"dataset manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"{path}: unknown dataset format {manifest.get('format')!r}")
    return manifest


def load_dataset(root: Path | str, split: str | None = None) -> list[Sample]:
    root = Path(root)
    manifest = load_manifest(root)
    samples: list[Sample] = []
    for entry in manifest["samples"]:
        if split is not None and entry["split"] != split:
            continue
        image = netpbm.read(root / entry["image"])
        if image.ndim != 3:
            raise DatasetError(f"{root / entry['image']}: expected an RGB (P6) image")
        saliency = netpbm.read(root / entry["saliency"]).astype(np.float64) / 255.0
        gt = netpbm.read(root / entry["gt"]) if entry.get("gt") else None
        samples.append(
            Sample(
                sample_id=entry["id"],
                split=entry["split"],
                image=image,
                labels=np.asarray(entry["labels"], dtype=np.int8),
                saliency=saliency,
                gt=gt,
                has_band=bool(entry.get("has_band", False)),
            )
        )
    return samples
