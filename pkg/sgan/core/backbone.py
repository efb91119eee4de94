from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from sgan.core.config import BackboneConfig
from sgan.core.tensor import (
    ShapeError,
    Tensor,
    conv2d,
    dtype_of,
    gap,
    matmul,
    maxpool2d,
    relu,
    reshape,
    sigmoid,
)

logger = logging.getLogger(__name__)

CamSource = Literal["classifier-branch", "segmentation-branch", "ensemble"]


class Module:
    """Named parameter container; children are nested under ``<child>.``."""

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.children: dict[str, Module] = {}

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for cname, child in self.children.items():
            for pname, p in child.named_parameters().items():
                out[f"{cname}.{pname}"] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        own = self.named_parameters()
        missing = [name for name in own if name not in state]
        if strict and missing:
            raise KeyError(f"state is missing parameters: {', '.join(missing)}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype)
        return missing


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype: np.dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Backbone(Module):
    """Conv(3×3)+ReLU blocks with 2×2 max-pools after the configured blocks."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None, dtype: str = "f32", zero_init: bool = False):
        super().__init__()
        self.cfg = cfg
        dt = dtype_of(dtype)
        k = cfg.kernel_size
        cin = cfg.in_channels
        for i, cout in enumerate(cfg.block_channels):
            shape = (cout, cin, k, k)
            if zero_init or rng is None:
                w = np.zeros(shape, dtype=dt)
            else:
                w = he_normal(rng, shape, cin * k * k, dt)
            self.params[f"conv{i}.weight"] = Tensor(w, requires_grad=True)
            self.params[f"conv{i}.bias"] = Tensor(np.zeros(cout, dtype=dt), requires_grad=True)
            cin = cout

    @property
    def stride(self) -> int:
        return self.cfg.stride

    def __call__(self, image: Tensor) -> Tensor:
        return forward_features(image, self)


def forward_features(image: Tensor, backbone: Backbone) -> Tensor:
    """Image (3×H×W or N×3×H×W) to features X (C×H/s×W/s, batched likewise)."""
    cfg = backbone.cfg
    h, w = image.shape[-2:]
    if h % cfg.stride or w % cfg.stride:
        raise ShapeError(f"forward_features: spatial size {h}x{w} not divisible by stride {cfg.stride}")
    pad = cfg.kernel_size // 2
    pools = set(cfg.pool_after)
    x = image
    for i in range(len(cfg.block_channels)):
        x = relu(conv2d(x, backbone.params[f"conv{i}.weight"], backbone.params[f"conv{i}.bias"], stride=1, pad=pad))
        if i in pools:
            x = maxpool2d(x, kernel=2, stride=2)
    return x


class ClassifierHead(Module):
    """τ = sigmoid(Wᵀ · GAP(features)), W of shape C×M, no bias."""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator | None = None, dtype: str = "f32"):
        super().__init__()
        dt = dtype_of(dtype)
        w = np.zeros((channels, num_classes), dtype=dt) if rng is None else (rng.standard_normal((channels, num_classes)) * 0.01).astype(dt)
        self.params["weight"] = Tensor(w, requires_grad=True)

    @property
    def weight(self) -> Tensor:
        return self.params["weight"]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def logits(self, features: Tensor) -> Tensor:
        pooled = gap(features)
        if pooled.ndim == 1:
            return reshape(matmul(reshape(pooled, (1, pooled.shape[0])), self.weight), (self.num_classes,))
        return matmul(pooled, self.weight)

    def __call__(self, features: Tensor) -> Tensor:
        return sigmoid(self.logits(features))


def classify(features: Tensor, head: ClassifierHead) -> Tensor:
    return head(features)


def normalize_maps(raw: np.ndarray) -> np.ndarray:
    """Clamp at zero and divide every map by its own maximum; all-non-positive maps become zero."""
    clamped = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    peak = clamped.reshape(clamped.shape[0], -1).max(axis=1)
    out = np.zeros_like(clamped)
    nz = peak > 0
    out[nz] = clamped[nz] / peak[nz, None, None]
    return out


@dataclass
class CamStack:
    maps: np.ndarray
    source: CamSource = "classifier-branch"

    @property
    def num_classes(self) -> int:
        return self.maps.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]

    def upsample(self, factor: int) -> CamStack:
        """Nearest-neighbour upsampling by an integer factor."""
        if factor == 1:
            return CamStack(self.maps.copy(), self.source)
        up = np.repeat(np.repeat(self.maps, factor, axis=1), factor, axis=2)
        return CamStack(up, self.source)


def compute_cam(features: Tensor | np.ndarray, head: ClassifierHead, classes: Iterable[int]) -> CamStack:
    """CAM_z(u) = Σ_c W[c, z]·X_c(u), clamped and max-normalised; classes are 1-based."""
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    if feats.ndim != 3:
        raise ShapeError(f"compute_cam: expected C×H×W features, got {feats.shape}")
    weight = head.weight.data.astype(np.float64)
    m = weight.shape[1]
    raw = np.zeros((m, feats.shape[1], feats.shape[2]), dtype=np.float64)
    for z in sorted(set(classes)):
        if not 1 <= z <= m:
            raise ValueError(f"compute_cam: class {z} outside 1..{m}")
        raw[z - 1] = np.tensordot(weight[:, z - 1], feats.astype(np.float64), axes=(0, 0))
    return CamStack(normalize_maps(raw), "classifier-branch")
