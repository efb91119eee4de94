from __future__ import annotations

import logging
from typing import NamedTuple, Sequence

import numpy as np

from sgan.core.seeds import BACKGROUND, SeedMask
from sgan.core.tensor import Tensor, ShapeError, clamp, constant, log, mul, scale, tmean, tsum

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class SeedLoss(NamedTuple):
    value: Tensor
    empty: bool


def _batched_phi(phi: Tensor, seeds: SeedMask | Sequence[SeedMask]) -> tuple[list[SeedMask], tuple[int, ...]]:
    masks = [seeds] if isinstance(seeds, SeedMask) else list(seeds)
    shape = phi.shape if phi.ndim == 4 else (1, *phi.shape)
    if len(shape) != 4 or shape[0] != len(masks):
        raise ShapeError(f"seed loss: {len(masks)} seed masks for probability map {phi.shape}")
    for m in masks:
        if m.labels.shape != shape[2:]:
            raise ShapeError(f"seed loss: seed mask {m.labels.shape} vs probability grid {shape[2:]}")
    return masks, shape


def _log_phi(phi: Tensor) -> Tensor:
    return log(clamp(phi, LOG_FLOOR, None))


def classification_loss(tau: Tensor, y: np.ndarray) -> Tensor:
    """Sigmoid cross entropy, -mean log(y·(τ-½)+½), averaged over classes and images."""
    y = np.asarray(y, dtype=tau.dtype)
    if y.shape != tau.shape:
        raise ShapeError(f"classification_loss: labels {y.shape} vs probabilities {tau.shape}")
    arg = mul(tau, constant(y, like=tau)) + constant((1.0 - y) / 2.0, like=tau)
    return -tmean(log(clamp(arg, LOG_FLOOR, 1.0)))


def seed_loss(phi: Tensor, seeds: SeedMask | Sequence[SeedMask]) -> SeedLoss:
    """Seed cross entropy over the M foreground channels; per-image normalisation by the seed count.

    Images without any foreground seed are skipped; if none has seeds the loss is 0
    and ``empty`` is set.
    """
    masks, shape = _batched_phi(phi, seeds)
    b, m = shape[0], shape[1]
    weights = np.zeros(shape, dtype=np.float64)
    valid = 0
    for i, mask in enumerate(masks):
        total = 0
        for z in mask.present_classes():
            if z > m:
                raise ShapeError(f"seed_loss: seed class {z} but only {m} foreground channels")
            sel = mask.labels == z
            weights[i, z - 1][sel] = 1.0
            total += int(sel.sum())
        if total:
            weights[i] /= total
            valid += 1
    empty = valid == 0
    if empty:
        logger.warning("seed_loss: no foreground seeds in batch of %d; contributing 0", b)
    else:
        weights /= valid
    w = constant(weights.reshape(phi.shape), like=phi)
    return SeedLoss(-tsum(mul(_log_phi(phi), w)), empty)


def sgan_total(l_cls: Tensor, l_seed: Tensor, lam: float) -> Tensor:
    """Joint classifier objective, L = L_cls + λ·L_seed."""
    if lam < 0:
        raise ValueError(f"sgan_total: lambda must be >= 0, got {lam}")
    return l_cls + scale(l_seed, lam)


def balanced_seed_loss(phi: Tensor, seeds: SeedMask | Sequence[SeedMask]) -> Tensor:
    """Balanced seed loss: foreground and background seed terms, each normalised by its own count.

    Channel 0 of ``phi`` is background, channel z is class z.
    """
    masks, shape = _batched_phi(phi, seeds)
    b, channels = shape[0], shape[1]
    weights = np.zeros(shape, dtype=np.float64)
    valid = 0
    for i, mask in enumerate(masks):
        fg = 0
        for z in mask.present_classes():
            if z >= channels:
                raise ShapeError(f"balanced_seed_loss: seed class {z} but only {channels} channels")
            sel = mask.labels == z
            weights[i, z][sel] = 1.0
            fg += int(sel.sum())
        if fg:
            weights[i, 1:] /= fg
        bg_sel = mask.labels == BACKGROUND
        bg = int(bg_sel.sum())
        if bg:
            weights[i, 0][bg_sel] = 1.0 / bg
        if fg or bg:
            valid += 1
    if valid:
        weights /= valid
    w = constant(weights.reshape(phi.shape), like=phi)
    return -tsum(mul(_log_phi(phi), w))


def boundary_loss(phi: Tensor, r: np.ndarray) -> Tensor:
    """Mean KL(R || Φ) per position; R is a constant target (no gradient into the CRF)."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != phi.shape:
        raise ShapeError(f"boundary_loss: CRF output {r.shape} vs probability map {phi.shape}")
    images = phi.shape[0] if phi.ndim == 4 else 1
    positions = phi.shape[-2] * phi.shape[-1]
    denom = float(images * positions)
    with np.errstate(divide="ignore", invalid="ignore"):
        r_log_r = np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)), 0.0)
    entropy_term = constant(np.asarray(r_log_r.sum() / denom), like=phi)
    cross = tsum(mul(_log_phi(phi), constant(r / denom, like=phi)))
    return entropy_term - cross
