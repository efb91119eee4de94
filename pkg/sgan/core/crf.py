"""Fully-connected CRF, naive mean field.

Energy per position: unary -log Φ plus Potts pairwise terms over a spatial Gaussian
kernel and a bilateral (position + colour) Gaussian kernel. Kernels are built as a dense
N×N matrix, so the grid is capped (``CrfParams.max_positions``).
"""
from __future__ import annotations

import logging

import numpy as np

from sgan.core.config import CrfParams

logger = logging.getLogger(__name__)

UNARY_FLOOR = 1e-12
# Share of max_positions above which mean_field warns before building the dense kernel.
NEAR_CAP = 0.8


class CrfError(ValueError):
    pass


def _softmax(x: np.ndarray, axis: int = 0) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _sq_distances(coords: np.ndarray, extent: np.ndarray | None) -> np.ndarray:
    diff = np.abs(coords[:, None, :] - coords[None, :, :])
    if extent is not None:
        diff = np.minimum(diff, extent[None, None, :] - diff)
    return (diff * diff).sum(axis=-1)


def pairwise_kernel(image: np.ndarray, params: CrfParams, pixel_pitch: float = 1.0, periodic: bool = False) -> np.ndarray:
    """Weighted kernel matrix w_s·k_spatial + w_b·k_bilateral with a zero diagonal."""
    _, h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w]
    coords = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64) * pixel_pitch
    extent = np.array([h, w], dtype=np.float64) * pixel_pitch if periodic else None
    d2 = _sq_distances(coords, extent)
    colors = image.reshape(image.shape[0], -1).T.astype(np.float64)
    c2 = ((colors[:, None, :] - colors[None, :, :]) ** 2).sum(axis=-1)

    kernel = np.zeros_like(d2)
    if params.w_spatial:
        kernel += params.w_spatial * np.exp(-d2 / (2 * params.theta_gamma**2))
    if params.w_bilateral:
        kernel += params.w_bilateral * np.exp(-d2 / (2 * params.theta_alpha**2) - c2 / (2 * params.theta_beta**2))
    np.fill_diagonal(kernel, 0.0)
    return kernel


def mean_field(
    image: np.ndarray,
    phi: np.ndarray,
    params: CrfParams,
    pixel_pitch: float = 1.0,
    periodic: bool = False,
    kernel: np.ndarray | None = None,
) -> np.ndarray:
    """R(I, Φ): T rounds of Potts mean field starting from Q = softmax(-U) = Φ.

    ``image`` is 3×H×W on the [0, 255] scale, ``phi`` is L×H×W with a distribution per
    position. ``pixel_pitch`` converts grid steps into image pixels for the kernels.
    """
    image = np.asarray(image, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if image.ndim != 3 or phi.ndim != 3 or image.shape[1:] != phi.shape[1:]:
        raise CrfError(f"mean_field: image {image.shape} and Φ {phi.shape} must share H×W")
    labels, h, w = phi.shape
    n = h * w
    if n > params.max_positions:
        raise CrfError(
            f"mean_field: {h}x{w} = {n} positions exceeds the cap of {params.max_positions}; downsample first"
        )
    if n > NEAR_CAP * params.max_positions:
        logger.warning("mean_field: %dx%d = %d positions is close to the cap of %d", h, w, n, params.max_positions)

    unary = -np.log(np.clip(phi, UNARY_FLOOR, None)).reshape(labels, n)
    q = _softmax(-unary, axis=0)
    if params.iterations == 0 or (params.w_spatial == 0 and params.w_bilateral == 0):
        return q.reshape(labels, h, w)

    if kernel is None:
        kernel = pairwise_kernel(image, params, pixel_pitch, periodic)
    for _ in range(params.iterations):
        # Potts: the penalty for label l is the message mass of every other label,
        # which differs from -message_l by a per-position constant.
        message = q @ kernel
        q = _softmax(-unary + message, axis=0)
    return q.reshape(labels, h, w)


def downsample_image(image: np.ndarray, stride: int) -> np.ndarray:
    """Average-pool a 3×H×W image by ``stride``."""
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    if h % stride or w % stride:
        raise CrfError(f"image {image.shape} not divisible by stride {stride}")
    return image.reshape(c, h // stride, stride, w // stride, stride).mean(axis=(2, 4))
