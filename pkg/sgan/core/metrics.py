from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from sgan.core.seeds import BACKGROUND, UNLABELED, SeedMask

logger = logging.getLogger(__name__)

F_BETA2 = 0.4


class MetricsError(ValueError):
    pass


def _as_list(arrays: np.ndarray | Sequence[np.ndarray]) -> list[np.ndarray]:
    if isinstance(arrays, np.ndarray) and arrays.ndim == 2:
        return [arrays]
    return [np.asarray(a) for a in arrays]


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_labels: int) -> np.ndarray:
    """Rows are GT labels, columns predictions."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricsError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if np.any(pred == UNLABELED):
        raise MetricsError("predictions must not contain the unlabeled value")
    if pred.size and (pred.min() < 0 or pred.max() >= num_labels):
        raise MetricsError(f"prediction labels outside 0..{num_labels - 1}")
    if gt.size and (gt.min() < 0 or gt.max() >= num_labels):
        raise MetricsError(f"ground-truth labels outside 0..{num_labels - 1}")
    idx = gt.astype(np.int64).ravel() * num_labels + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_labels * num_labels).reshape(num_labels, num_labels)


def iou_from_confusion(confusion: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-label IoU (NaN where the label is absent from both) and the mean over defined labels."""
    tp = np.diag(confusion).astype(np.float64)
    denom = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    iou = np.full(tp.shape, np.nan)
    ok = denom > 0
    iou[ok] = tp[ok] / denom[ok]
    miou = float(np.nanmean(iou)) if ok.any() else float("nan")
    return iou, miou


def f_measure(precision: float, recall: float, beta2: float = F_BETA2) -> float:
    """F_β = (1+β²)·P·R / (β²·P + R); 0 when both are 0."""
    denom = beta2 * precision + recall
    if denom == 0:
        return 0.0
    return (1.0 + beta2) * precision * recall / denom


@dataclass
class SeedQuality:
    precision: float
    recall: float
    f_beta: float
    correct: int
    seeds: int
    gt_foreground: int
    no_foreground_seeds: bool = False


@dataclass
class MetricsReport:
    confusion: list[list[int]] = field(default_factory=list)
    per_class_iou: list[float | None] = field(default_factory=list)
    miou: float | None = None
    seed_precision: float | None = None
    seed_recall: float | None = None
    f_beta: float | None = None
    no_foreground_seeds: bool = False
    misspread: float | None = None
    classification_accuracy: float | None = None
    images: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path | str) -> MetricsReport:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _nan_to_none(values: Iterable[float]) -> list[float | None]:
    return [None if math.isnan(v) else float(v) for v in values]


def evaluate_segmentation(
    preds: np.ndarray | Sequence[np.ndarray],
    gts: np.ndarray | Sequence[np.ndarray],
    num_classes: int | None = None,
) -> MetricsReport:
    """Pooled confusion matrix over all images, per-label IoU (background included) and mIoU."""
    pred_list, gt_list = _as_list(preds), _as_list(gts)
    if len(pred_list) != len(gt_list):
        raise MetricsError(f"{len(pred_list)} predictions for {len(gt_list)} ground-truth maps")
    if num_classes is None:
        num_classes = max(int(max(g.max() for g in gt_list)), int(max(p.max() for p in pred_list)), 1) if gt_list else 1
    labels = num_classes + 1
    confusion = np.zeros((labels, labels), dtype=np.int64)
    for p, g in zip(pred_list, gt_list):
        confusion += confusion_matrix(p, g, labels)
    iou, miou = iou_from_confusion(confusion)
    return MetricsReport(
        confusion=confusion.tolist(),
        per_class_iou=_nan_to_none(iou),
        miou=None if math.isnan(miou) else miou,
        images=len(pred_list),
    )


def seed_counts(seeds: SeedMask, gt: np.ndarray) -> tuple[int, int, int]:
    """(correct foreground seeds, foreground seeds, GT foreground pixels) for one image."""
    gt = np.asarray(gt)
    if seeds.shape != gt.shape:
        raise MetricsError(f"seed mask {seeds.shape} and ground truth {gt.shape} differ in shape")
    fg = seeds.foreground
    correct = int(np.sum(fg & (seeds.labels == gt)))
    return correct, int(fg.sum()), int(np.sum(gt != BACKGROUND))


def evaluate_seeds(
    seeds: SeedMask | Sequence[SeedMask],
    gts: np.ndarray | Sequence[np.ndarray],
    beta2: float = F_BETA2,
) -> SeedQuality:
    """Seed precision/recall/F_β from counts pooled over every image."""
    seed_list = [seeds] if isinstance(seeds, SeedMask) else list(seeds)
    gt_list = _as_list(gts)
    if len(seed_list) != len(gt_list):
        raise MetricsError(f"{len(seed_list)} seed masks for {len(gt_list)} ground-truth maps")
    correct = total = gt_fg = 0
    for s, g in zip(seed_list, gt_list):
        c, t, f = seed_counts(s, g)
        correct += c
        total += t
        gt_fg += f
    empty = total == 0
    if empty:
        logger.warning("evaluate_seeds: no foreground seeds over %d images; precision reported as 0", len(seed_list))
    precision = correct / total if total else 0.0
    recall = correct / gt_fg if gt_fg else 0.0
    return SeedQuality(precision, recall, f_measure(precision, recall, beta2), correct, total, gt_fg, empty)


def misspread_fraction(seeds: Sequence[SeedMask], gts: Sequence[np.ndarray], class_id: int) -> float | None:
    """Share of ``class_id`` seed pixels that land on GT background; None when the class has no seeds."""
    on_bg = hits = 0
    for s, g in zip(seeds, gts):
        sel = s.labels == class_id
        hits += int(sel.sum())
        on_bg += int(np.sum(sel & (np.asarray(g) == BACKGROUND)))
    return on_bg / hits if hits else None


def classification_accuracy(tau: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Exact-match rate of thresholded class probabilities against the ±1 label vectors."""
    tau = np.atleast_2d(np.asarray(tau))
    labels = np.atleast_2d(np.asarray(labels))
    if tau.shape != labels.shape:
        raise MetricsError(f"probabilities {tau.shape} vs labels {labels.shape}")
    if not len(tau):
        return 0.0
    hit = np.all((tau > threshold) == (labels > 0), axis=1)
    return float(hit.mean())
