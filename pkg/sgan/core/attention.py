from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from sgan.core.backbone import Module
from sgan.core.tensor import (
    ShapeError,
    Tensor,
    conv2d,
    dtype_of,
    matmul,
    mul,
    reshape,
    row_normalize,
    same_status,
    transpose,
)

logger = logging.getLogger(__name__)

NORMALIZE_EPS = 1e-8


class AttentionError(ValueError):
    pass


def pool_to_grid(saliency: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Average-pool an H×W (or b×H×W) map down to the feature grid."""
    sal = np.asarray(saliency, dtype=np.float64)
    gh, gw = grid
    h, w = sal.shape[-2:]
    if h % gh or w % gw:
        raise ShapeError(f"saliency map {sal.shape} cannot be pooled onto grid {grid}")
    fh, fw = h // gh, w // gw
    return sal.reshape(*sal.shape[:-2], gh, fh, gw, fw).mean(axis=(-3, -1))


@dataclass
class SaliencyMask:
    """Binary saliency B over the N = H·W feature positions (last axis)."""

    values: np.ndarray
    threshold: float

    @classmethod
    def from_map(cls, saliency: np.ndarray, threshold: float, grid: tuple[int, int]) -> SaliencyMask:
        sal = np.asarray(saliency, dtype=np.float64)
        if sal.min() < 0 or sal.max() > 1:
            logger.warning("saliency outside [0,1] (%.3f..%.3f); clipping", sal.min(), sal.max())
            sal = np.clip(sal, 0.0, 1.0)
        pooled = pool_to_grid(sal, grid)
        b = (pooled >= threshold).astype(np.int8)
        return cls(b.reshape(*b.shape[:-2], grid[0] * grid[1]), threshold)

    @classmethod
    def all_salient(cls, n: int, batch: int | None = None) -> SaliencyMask:
        shape = (n,) if batch is None else (batch, n)
        return cls(np.ones(shape, dtype=np.int8), 0.0)


class AttentionParams(Module):
    """Key/query 1×1 embeddings (C→C) and the gate γ (starts at exactly 0)."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, dtype: str = "f32", noise: float = 0.01):
        super().__init__()
        dt = dtype_of(dtype)
        for name in ("key", "query"):
            w = np.eye(channels, dtype=np.float64)
            if rng is not None and noise > 0:
                w = w + rng.standard_normal((channels, channels)) * noise
            self.params[f"{name}.weight"] = Tensor(w.reshape(channels, channels, 1, 1).astype(dt), requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.params["gamma"] = Tensor(np.zeros((), dtype=dt), requires_grad=True)

    @property
    def gamma(self) -> Tensor:
        return self.params["gamma"]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return reshape(x, (1, *x.shape)), True
    raise ShapeError(f"attention expects C×H×W or N×C×H×W features, got {x.shape}")


def spatial_attention(x: Tensor, params: AttentionParams) -> Tensor:
    """P_ij = K_iᵀ Q_j; N×N for one image, b×N×N for a batch."""
    xb, single = _batched(x)
    b, c, h, w = xb.shape
    k = reshape(conv2d(xb, params.params["key.weight"], params.params["key.bias"]), (b, c, h * w))
    q = reshape(conv2d(xb, params.params["query.weight"], params.params["query.bias"]), (b, c, h * w))
    p = matmul(transpose(k, (0, 2, 1)), q)
    return reshape(p, (h * w, h * w)) if single else p


def _binary(b: np.ndarray, where: str) -> np.ndarray:
    b = np.asarray(b)
    if not np.all((b == 0) | (b == 1)):
        raise AttentionError(f"{where}: B must be binary")
    return b


def saliency_attention(b: np.ndarray) -> np.ndarray:
    """S_ij = 1(B_i == B_j) for B of shape N, N×1, b×N or b×N×1. Only materialised for tests and visualisation."""
    b = _binary(b, "saliency_attention")
    if b.ndim >= 2 and b.shape[-1] == 1:
        b = b[..., 0]
    if b.ndim not in (1, 2):
        raise AttentionError(f"saliency_attention: B must be N, N×1, b×N or b×N×1, got {b.shape}")
    return same_status(b)


def context_attention(p: Tensor, b: np.ndarray) -> Tensor:
    """D_ij = ⌊P_ij⌋₊·S_ij / (Σ_j ⌊P_ij⌋₊·S_ij + ε); B may carry a trailing singleton axis."""
    b = _binary(b, "context_attention")
    rows = tuple(p.shape[:-1])
    if b.shape == (*rows, 1):
        b = b[..., 0]
    if b.shape != rows:
        raise AttentionError(f"context_attention: B {b.shape} does not cover the rows of P {tuple(p.shape)}")
    return row_normalize(p, mask=b.astype(p.dtype), eps=NORMALIZE_EPS)


def enhance(x: Tensor, d: Tensor, gamma: Tensor) -> Tensor:
    """E_i = γ Σ_j D_ij X_j + X_i, computed as γ·(X Dᵀ) + X on the flattened grid."""
    xb, single = _batched(x)
    b, c, h, w = xb.shape
    n = h * w
    db = reshape(d, (1, n, n)) if d.ndim == 2 else d
    if db.shape != (b, n, n):
        raise ShapeError(f"enhance: context map {d.shape} does not match features {x.shape}")
    flat = reshape(xb, (b, c, n))
    agg = matmul(flat, transpose(db, (0, 2, 1)))
    e = mul(agg, gamma) + flat
    e = reshape(e, (b, c, h, w))
    return reshape(e, (c, h, w)) if single else e


@dataclass
class AttentionOutput:
    enhanced: Tensor
    context: Tensor
    mask: SaliencyMask


def saliency_guided_attention(x: Tensor, mask: SaliencyMask, params: AttentionParams) -> AttentionOutput:
    n = x.shape[-2] * x.shape[-1]
    if mask.values.shape[-1] != n:
        raise ShapeError(f"saliency mask covers {mask.values.shape[-1]} positions, features have {n}")
    p = spatial_attention(x, params)
    d = context_attention(p, mask.values)
    return AttentionOutput(enhance(x, d, params.gamma), d, mask)


def sgan_forward(x: Tensor, saliency_map: np.ndarray, t_b: float, params: AttentionParams) -> Tensor:
    """Full module: binarise saliency on the feature grid, attend, enhance. B is a constant."""
    grid = (x.shape[-2], x.shape[-1])
    mask = SaliencyMask.from_map(saliency_map, t_b, grid)
    return saliency_guided_attention(x, mask, params).enhanced
