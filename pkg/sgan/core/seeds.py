"""Seed masks and the rules that produce them.

On disk a seed mask is a P5 PGM at image resolution with the palette
0 = background, k = class k (1..M), 255 = unlabeled.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from sgan.core.backbone import CamStack, normalize_maps
from sgan.services import netpbm

if TYPE_CHECKING:
    from sgan.services.synth_data import Sample

logger = logging.getLogger(__name__)

BACKGROUND = 0
UNLABELED = 255


class SeedError(ValueError):
    pass


@dataclass
class SeedMask:
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise SeedError(f"seed mask must be H×W, got {self.labels.shape}")

    @classmethod
    def unlabeled(cls, shape: tuple[int, int]) -> SeedMask:
        return cls(np.full(shape, UNLABELED, dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def pixels(self, z: int) -> np.ndarray:
        """Λ_z as a boolean map."""
        return self.labels == z

    def present_classes(self) -> list[int]:
        """Z: foreground classes holding at least one seed."""
        return [int(v) for v in np.unique(self.labels) if v != BACKGROUND and v != UNLABELED]

    @property
    def background(self) -> np.ndarray:
        return self.labels == BACKGROUND

    @property
    def foreground(self) -> np.ndarray:
        return (self.labels != BACKGROUND) & (self.labels != UNLABELED)

    def count(self) -> int:
        return int(self.foreground.sum())

    def sample_grid(self, stride: int) -> SeedMask:
        """Labels at the centre pixel of every stride×stride cell."""
        if stride == 1:
            return SeedMask(self.labels.copy())
        h, w = self.labels.shape
        if h % stride or w % stride:
            raise SeedError(f"seed mask {self.labels.shape} not divisible by stride {stride}")
        c = stride // 2
        return SeedMask(self.labels[c::stride, c::stride].copy())

    def flip(self) -> SeedMask:
        return SeedMask(self.labels[:, ::-1].copy())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SeedMask) and np.array_equal(self.labels, other.labels)


def _foreground_rule(maps: np.ndarray, labels: np.ndarray, threshold: float) -> np.ndarray:
    """Per pixel: argmax over present classes, kept where the winning value exceeds the threshold."""
    m = maps.shape[0]
    present = np.asarray(labels).reshape(-1)[:m] > 0
    out = np.full(maps.shape[1:], UNLABELED, dtype=np.uint8)
    if not present.any():
        return out
    gated = np.where(present[:, None, None], maps, -np.inf)
    best = gated.argmax(axis=0)
    value = np.take_along_axis(gated, best[None], axis=0)[0]
    hit = value > threshold
    out[hit] = (best[hit] + 1).astype(np.uint8)
    return out


def initial_seeds(cams: CamStack, labels: np.ndarray, t: float = 0.3) -> SeedMask:
    """Foreground-only seeds from baseline CAMs thresholded at ``t``."""
    return SeedMask(_foreground_rule(cams.maps, labels, t))


def ensemble_cams(cam_cls: CamStack, cam_seg: CamStack) -> CamStack:
    if cam_cls.maps.shape != cam_seg.maps.shape:
        raise SeedError(f"ensemble_cams: shape mismatch {cam_cls.maps.shape} vs {cam_seg.maps.shape}")
    return CamStack(normalize_maps(cam_cls.maps + cam_seg.maps), "ensemble")


def match_resolution(cams: CamStack, shape: tuple[int, int]) -> CamStack:
    h, w = cams.spatial
    if (h, w) == tuple(shape):
        return cams
    factor = shape[0] // h
    if factor * h != shape[0] or factor * w != shape[1]:
        raise SeedError(f"CAM grid {cams.spatial} is not an integer subsampling of {shape}")
    return cams.upsample(factor)


def final_seeds(cam_ens: CamStack, saliency: np.ndarray, labels: np.ndarray, alpha: float = 0.2, beta: float = 0.06) -> SeedMask:
    """Foreground where CAM > α (argmax over present classes), background where saliency < β.

    A pixel claimed by both rules is left unlabeled.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    cams = match_resolution(cam_ens, saliency.shape)
    out = _foreground_rule(cams.maps, labels, alpha)
    fg = out != UNLABELED
    bg = saliency < beta
    out[bg & ~fg] = BACKGROUND
    out[bg & fg] = UNLABELED
    return SeedMask(out)


def semi_substitute(sample: Sample) -> tuple[np.ndarray, SeedMask]:
    """Strong-label substitution: saliency := GT foreground, seeds := full GT labelling."""
    gt = getattr(sample, "gt", None)
    if gt is None:
        raise SeedError(f"semi_substitute: sample {getattr(sample, 'sample_id', '?')} has no ground truth")
    gt = np.asarray(gt, dtype=np.uint8)
    return (gt > 0).astype(np.float64), SeedMask(gt.copy())


def write_seed_mask(path: Path | str, mask: SeedMask) -> Path:
    return netpbm.write(path, mask.labels)


def read_seed_mask(path: Path | str) -> SeedMask:
    arr = netpbm.read(path)
    if arr.ndim != 2:
        raise SeedError(f"{path}: seed masks are single-channel PGM files")
    return SeedMask(arr)
