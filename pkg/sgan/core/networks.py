"""Trainable models: the classification network in every ablation variant and the segmentation net."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from sgan.core.attention import AttentionParams, SaliencyMask, saliency_guided_attention
from sgan.core.backbone import Backbone, CamStack, ClassifierHead, Module, compute_cam, he_normal, normalize_maps
from sgan.core.config import PipelineConfig
from sgan.core.tensor import Tensor, conv2d, dtype_of, softmax

logger = logging.getLogger(__name__)

WITH_ATTENTION = frozenset({"sgan_sal_seed", "sgan_seed", "sgan_cls", "sgan_seg", "sgan"})
WITH_SEED_BRANCH = frozenset({"sgan_cls", "sgan_seg", "sgan"})

# Independent init streams so that switching a component on or off leaves the others unchanged.
_STREAMS = ("backbone", "head", "attention", "seed_branch", "seg_head")


def init_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(_STREAMS, children)}


def preprocess(images: np.ndarray, dtype: str = "f32") -> Tensor:
    """uint8 RGB in [0, 255] to a tensor centred on zero."""
    arr = np.asarray(images, dtype=np.float64) / 255.0 - 0.5
    return Tensor(arr, dtype=dtype)


class ConvHead(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator | None, dtype: str = "f32"):
        super().__init__()
        dt = dtype_of(dtype)
        shape = (cout, cin, kernel, kernel)
        w = np.zeros(shape, dtype=dt) if rng is None else he_normal(rng, shape, cin * kernel * kernel, dt)
        self.params["weight"] = Tensor(w, requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(cout, dtype=dt), requires_grad=True)
        self.kernel = kernel

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.params["weight"], self.params["bias"], stride=1, pad=self.kernel // 2)


@dataclass
class SganOutput:
    features: Tensor
    enhanced: Tensor
    tau: Tensor
    seed_logits: Tensor | None
    phi: Tensor | None
    mask: SaliencyMask | None


class SganNet(Module):
    """Backbone, optional saliency-guided attention, classifier head, optional seed branch.

    ``baseline`` has neither attention nor seed branch; ``sgan_sal_seed`` attends with an
    all-salient mask; ``sgan_seed`` uses the saliency mask; the remaining variants add the
    seed segmentation branch and differ only in which CAMs feed the final seeds.
    """

    def __init__(self, cfg: PipelineConfig, variant: str | None = None):
        super().__init__()
        self.cfg = cfg
        self.variant = variant or cfg.variant
        dtype = cfg.train.dtype
        rngs = init_rngs(cfg.seed)
        channels = cfg.backbone.feature_channels
        m = cfg.dataset.num_classes

        self.backbone = Backbone(cfg.backbone, rngs["backbone"], dtype)
        self.head = ClassifierHead(channels, m, rngs["head"], dtype)
        self.children["backbone"] = self.backbone
        self.children["head"] = self.head
        self.attention: AttentionParams | None = None
        self.seed_branch: ConvHead | None = None
        if self.variant in WITH_ATTENTION:
            self.attention = AttentionParams(channels, rngs["attention"], dtype, cfg.sgan.projection_noise)
            self.children["attention"] = self.attention
        if self.variant in WITH_SEED_BRANCH:
            self.seed_branch = ConvHead(channels, m, 1, rngs["seed_branch"], dtype)
            self.children["seed_branch"] = self.seed_branch

    @property
    def lam(self) -> float:
        return self.cfg.sgan.lambda_ if self.seed_branch is not None else 0.0

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def saliency_mask(self, saliency: np.ndarray | None, grid: tuple[int, int], batch: int | None) -> SaliencyMask | None:
        if self.attention is None:
            return None
        if self.variant == "sgan_sal_seed" or saliency is None:
            return SaliencyMask.all_salient(grid[0] * grid[1], batch)
        return SaliencyMask.from_map(saliency, self.cfg.sgan.saliency_threshold, grid)

    def forward(self, images: Tensor, saliency: np.ndarray | None = None) -> SganOutput:
        features = self.backbone(images)
        grid = (features.shape[-2], features.shape[-1])
        batch = features.shape[0] if features.ndim == 4 else None
        mask = self.saliency_mask(saliency, grid, batch)
        enhanced = features
        if self.attention is not None:
            enhanced = saliency_guided_attention(features, mask, self.attention).enhanced
        tau = self.head(enhanced)
        seed_logits = phi = None
        if self.seed_branch is not None:
            seed_logits = self.seed_branch(enhanced)
            phi = softmax(seed_logits, axis=-3)
        return SganOutput(features, enhanced, tau, seed_logits, phi, mask)

    __call__ = forward

    def cams(self, out: SganOutput, classes: Iterable[int], index: int | None = None) -> CamStack:
        feats = out.enhanced.data if index is None else out.enhanced.data[index]
        return compute_cam(feats, self.head, classes)

    def seed_branch_cams(self, out: SganOutput, classes: Iterable[int], index: int | None = None) -> CamStack:
        """Class score maps of the seed branch, clamped and max-normalised like a CAM."""
        if out.seed_logits is None:
            raise ValueError(f"variant {self.variant} has no seed segmentation branch")
        logits = out.seed_logits.data if index is None else out.seed_logits.data[index]
        raw = np.zeros(logits.shape, dtype=np.float64)
        for z in set(classes):
            raw[z - 1] = logits[z - 1]
        return CamStack(normalize_maps(raw), "segmentation-branch")


class SegNet(Module):
    """Backbone + 3×3 conv to M+1 channels + softmax; channel 0 is background."""

    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        self.cfg = cfg
        rngs = init_rngs(cfg.seed)
        self.backbone = Backbone(cfg.backbone, rngs["backbone"], cfg.train.dtype)
        self.classifier = ConvHead(cfg.backbone.feature_channels, cfg.dataset.num_classes + 1, 3, rngs["seg_head"], cfg.train.dtype)
        self.children["backbone"] = self.backbone
        self.children["classifier"] = self.classifier

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def forward(self, images: Tensor) -> Tensor:
        return softmax(self.classifier(self.backbone(images)), axis=-3)

    __call__ = forward

    def init_backbone(self, state: dict[str, np.ndarray]) -> None:
        own = {k.split(".", 1)[1]: v for k, v in state.items() if k.startswith("backbone.")}
        self.backbone.load_state_dict(own)
        logger.info("segmentation backbone initialised from %d baseline tensors", len(own))


def predict_labels(phi: np.ndarray) -> np.ndarray:
    """Argmax over the channel axis of an (M+1)×h×w (or batched) distribution."""
    return np.asarray(phi).argmax(axis=-3).astype(np.uint8)
