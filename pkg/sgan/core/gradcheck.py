from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from sgan.core.tensor import Tensor, TensorError, backward, no_grad, trace_kinks

logger = logging.getLogger(__name__)


def _evaluate(f: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, list[bytes]]:
    with no_grad(), trace_kinks() as kinks:
        value = f(Tensor(x)).item()
    if not np.isfinite(value):
        raise TensorError("finite_diff_check: function returned a non-finite value")
    return value, list(kinks)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``x``.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|). A
    coordinate is skipped when the +eps and -eps evaluations take different branches
    of any piecewise primitive (ReLU, clamp, max-pool, clamped normalisation).
    """
    if x.dtype != np.float64:
        raise TensorError("finite_diff_check needs an f64 input")
    if not 1e-6 <= eps <= 1e-4:
        raise TensorError(f"finite_diff_check: eps {eps} outside [1e-6, 1e-4]")

    leaf = Tensor(x.data, requires_grad=True)
    loss = f(leaf)
    if not np.isfinite(loss.item()):
        raise TensorError("finite_diff_check: function returned a non-finite value")
    backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    base = x.data.copy()
    flat = base.reshape(-1)
    worst = 0.0
    skipped = 0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus, kinks_plus = _evaluate(f, base)
        flat[i] = orig - eps
        f_minus, kinks_minus = _evaluate(f, base)
        flat[i] = orig
        if kinks_plus != kinks_minus:
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    if skipped:
        logger.debug("finite_diff_check skipped %d/%d coordinates near a kink", skipped, flat.size)
    return worst
