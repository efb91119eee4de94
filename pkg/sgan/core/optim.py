from __future__ import annotations

import logging
from typing import Mapping

import numpy as np

from sgan.core.config import OptimizerConfig
from sgan.core.tensor import Tensor

logger = logging.getLogger(__name__)


def step_lr(cfg: OptimizerConfig, step: int) -> float:
    """Base rate multiplied by ``lr_decay`` once for every boundary already passed."""
    passed = sum(1 for s in cfg.lr_steps if step >= s)
    return cfg.base_lr * cfg.lr_decay**passed


def decays(name: str) -> bool:
    return name.endswith("weight")


class SGD:
    """Momentum SGD, v ← μ·v + g + wd·θ (weights only), θ ← θ - lr·v."""

    def __init__(self, params: Mapping[str, Tensor], cfg: OptimizerConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.step_count = 0

    @property
    def lr(self) -> float:
        return step_lr(self.cfg, self.step_count)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> float:
        lr = self.lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=True)
            if self.cfg.weight_decay and decays(name):
                g += self.cfg.weight_decay * p.data
            v = self.velocity[name]
            v *= self.cfg.momentum
            v += g
            if lr:
                p.data = (p.data - lr * v).astype(p.data.dtype)
        self.step_count += 1
        return lr
