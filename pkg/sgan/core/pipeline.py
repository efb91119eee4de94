from __future__ import annotations

import json
import logging
import math
import time
from contextlib import contextmanager
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence, TypeVar

import numpy as np

from sgan.core.attention import context_attention, spatial_attention
from sgan.core.checkpoint import CheckpointError, checkpoint_exists, load_checkpoint, save_checkpoint
from sgan.core.config import ConfigManager, PipelineConfig
from sgan.core.crf import downsample_image, mean_field
from sgan.core.losses import balanced_seed_loss, boundary_loss, classification_loss, seed_loss, sgan_total
from sgan.core.metrics import (
    MetricsReport,
    SeedQuality,
    classification_accuracy,
    evaluate_seeds,
    evaluate_segmentation,
    misspread_fraction,
)
from sgan.core.networks import SegNet, SganNet, SganOutput, predict_labels, preprocess
from sgan.core.optim import SGD
from sgan.core.seeds import (
    SeedMask,
    ensemble_cams,
    final_seeds,
    initial_seeds,
    match_resolution,
    read_seed_mask,
    semi_substitute,
    write_seed_mask,
)
from sgan.core.tensor import ShapeError, TensorError, backward, no_grad, scale
from sgan.services import netpbm
from sgan.services.synth_data import MANIFEST, Sample, generate_dataset, load_dataset, write_dataset
from sgan.utils.logging import TrainLog

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

STAGE_BASELINE = "baseline"
STAGE_SGAN = "sgan"
STAGE_SEG = "seg"
SEED_STAGES = ("initial", "final")

# Sampling stream ids, combined with the run seed.
_SAMPLING = {STAGE_BASELINE: 1, STAGE_SGAN: 2, STAGE_SEG: 3, "semi": 4}


class PipelineError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, step: int, detail: str = ""):
        self.stage = stage
        self.step = step
        super().__init__(f"{stage} training diverged at step {step}: {detail}".rstrip(": "))


@dataclass
class StageResult:
    stage: str
    steps: int
    seconds: float
    final_loss: float | None = None
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass
class Batch:
    indices: list[int]
    images: np.ndarray
    labels: np.ndarray
    saliency: np.ndarray
    flipped: list[bool]


def weak_seed_quality(masks: Sequence[SeedMask], gts: Sequence[np.ndarray | None], strong: set[int]) -> SeedQuality | None:
    """Seed quality over the weakly labelled images only; None without any weak image or ground truth."""
    weak = [i for i in range(len(masks)) if i not in strong]
    if not weak or any(gts[i] is None for i in weak):
        return None
    return evaluate_seeds([masks[i] for i in weak], [gts[i] for i in weak])


class Pipeline:
    """Runs the four training stages and their seed, evaluation and visualisation steps inside one run directory."""

    def __init__(self, cfg: PipelineConfig, run_dir: Path | str, data_dir: Path | str | None = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.data_dir = Path(data_dir) if data_dir is not None else self.run_dir / "data"
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.train_log = TrainLog(self.run_dir / "train.log")
        self._cache: dict[str, list[Sample]] = {}

    def checkpoint_stem(self, stage: str) -> Path:
        return self.run_dir / "checkpoints" / stage

    def seed_dir(self, stage: str) -> Path:
        return self.run_dir / "seeds" / stage

    @property
    def viz_dir(self) -> Path:
        return self.run_dir / "viz"

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / "metrics.json"

    def save_config(self) -> None:
        ConfigManager(self.run_dir / "config.yaml").save(self.cfg)

    def gen_data(self, force: bool = False) -> Path:
        manifest = self.data_dir / MANIFEST
        if manifest.exists() and not force:
            logger.info("dataset already present at %s", self.data_dir)
            return manifest
        samples = generate_dataset(self.cfg.dataset)
        self._cache.clear()
        return write_dataset(samples, self.data_dir, self.cfg.dataset)

    def samples(self, split: str) -> list[Sample]:
        if split not in self._cache:
            if not (self.data_dir / MANIFEST).exists():
                raise PipelineError(f"no dataset at {self.data_dir}; run gen-data first")
            self._cache[split] = load_dataset(self.data_dir, split)
        return self._cache[split]

    def strong_indices(self) -> set[int]:
        """Training samples treated as strongly annotated: the first ⌈f·n⌉ of a seeded permutation."""
        n = len(self.samples("train"))
        k = math.ceil(self.cfg.semi_fraction * n)
        if k == 0:
            return set()
        perm = np.random.default_rng([self.cfg.seed, _SAMPLING["semi"]]).permutation(n)
        return {int(i) for i in perm[:k]}

    def saliency_for(self, index: int, sample: Sample, strong: set[int]) -> np.ndarray:
        if index in strong:
            return semi_substitute(sample)[0]
        return sample.saliency

    def _map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        if self.cfg.workers <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            return list(pool.map(fn, items))

    def _batches(self, stage: str, samples: list[Sample], strong: set[int], steps: int) -> Iterable[Batch]:
        rng = np.random.default_rng([self.cfg.seed, _SAMPLING[stage]])
        n = len(samples)
        size = min(self.cfg.train.batch_size, n)
        for _ in range(steps):
            idx = [int(i) for i in rng.choice(n, size=size, replace=False)]
            flips = [bool(f) for f in rng.random(size) < 0.5] if self.cfg.train.flip else [False] * size
            images, saliency = [], []
            for i, flip in zip(idx, flips):
                img = samples[i].image
                sal = self.saliency_for(i, samples[i], strong)
                if flip:
                    img, sal = img[:, :, ::-1], sal[:, ::-1]
                images.append(img)
                saliency.append(sal)
            labels = np.stack([samples[i].labels for i in idx]).astype(np.float64)
            yield Batch(idx, np.stack(images), labels, np.stack(saliency), flips)

    def _save(self, stage: str, model: SganNet | SegNet, **meta: Any) -> Path:
        meta = {"stage": stage, "seed": self.cfg.seed, **meta}
        path = save_checkpoint(self.checkpoint_stem(stage), model.state_dict(), meta)
        logger.info("checkpoint %s written to %s", stage, path)
        return path

    def _load(self, stage: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
        stem = self.checkpoint_stem(stage)
        if not checkpoint_exists(stem):
            raise PipelineError(f"checkpoint for stage {stage!r} not found at {stem}; run that stage first")
        try:
            state, meta = load_checkpoint(stem)
        except CheckpointError as exc:
            raise PipelineError(str(exc)) from exc
        if meta.get("stage") != stage:
            raise PipelineError(f"{stem} holds stage {meta.get('stage')!r}, expected {stage!r}")
        return state, meta

    @contextmanager
    def _restoring(self, stage: str) -> Iterator[None]:
        try:
            yield
        except (KeyError, ShapeError) as exc:
            raise PipelineError(
                f"checkpoint {self.checkpoint_stem(stage)} does not fit the configured network: {exc}"
            ) from exc

    def load_classifier(self, stage: str) -> SganNet:
        state, meta = self._load(stage)
        net = SganNet(self.cfg, meta.get("variant", self.cfg.variant))
        with self._restoring(stage):
            net.load_state_dict(state)
        return net

    def classifier_stage(self) -> str:
        return STAGE_BASELINE if self.cfg.variant == "baseline" else STAGE_SGAN

    def train_baseline(self) -> StageResult:
        net = SganNet(self.cfg, "baseline")
        return self._train_classifier(net, STAGE_BASELINE, seeds=None)

    def train_sgan(self) -> StageResult:
        if self.cfg.variant == "baseline":
            logger.info("variant baseline: the stage-0 classifier doubles as the stage-1 network")
            self._load(STAGE_BASELINE)
            return StageResult(STAGE_SGAN, 0, 0.0, extra={"reused": STAGE_BASELINE})
        net = SganNet(self.cfg)
        state, _ = self._load(STAGE_BASELINE)
        with self._restoring(STAGE_BASELINE):
            missing = net.load_state_dict(state, strict=False)
            shared = [name for name in missing if name.startswith(("backbone.", "head."))]
            if shared:
                raise KeyError(f"baseline state is missing shared parameters: {', '.join(shared)}")
        seeds = None
        if net.seed_branch is not None:
            seeds = self.load_seeds("initial", self.samples("train"))
            for i in self.strong_indices():
                seeds[i] = semi_substitute(self.samples("train")[i])[1]
        return self._train_classifier(net, STAGE_SGAN, seeds=seeds)

    def _train_classifier(self, net: SganNet, stage: str, seeds: list[SeedMask] | None) -> StageResult:
        self.save_config()
        cfg = self.cfg
        samples = self.samples("train")
        strong = self.strong_indices()
        opt = SGD(net.named_parameters(), cfg.optimizer)
        steps = cfg.train.iterations
        started = time.monotonic()
        loss_value: float | None = None
        logger.info("stage %s: variant=%s λ=%.3f steps=%d batch=%d", stage, net.variant, net.lam, steps, cfg.train.batch_size)

        for step, batch in enumerate(self._batches(stage, samples, strong, steps)):
            opt.zero_grad()
            try:
                out = net(preprocess(batch.images, cfg.train.dtype), batch.saliency)
                l_cls = classification_loss(out.tau, batch.labels)
                terms = {"L_cls": l_cls.item()}
                total = l_cls
                if seeds is not None and out.phi is not None:
                    grid = [self._grid_seeds(seeds[i], flip) for i, flip in zip(batch.indices, batch.flipped)]
                    l_seed = seed_loss(out.phi, grid)
                    total = sgan_total(l_cls, l_seed.value, net.lam)
                    terms["L_seed"] = l_seed.value.item()
                backward(total)
            except TensorError as exc:
                raise TrainingDiverged(stage, step, str(exc)) from exc
            loss_value = total.item()
            if not math.isfinite(loss_value):
                raise TrainingDiverged(stage, step, "non-finite loss")
            lr = opt.step()
            if step % cfg.train.log_interval == 0 or step == steps - 1:
                record = {"stage": stage, "variant": net.variant, "step": step, "lr": lr, "L_total": loss_value, **terms}
                if net.attention is not None:
                    record["gamma"] = float(net.attention.gamma.data)
                self.train_log.append(record)
                logger.info("%s step %d: loss %.4f", stage, step, loss_value)

        self._save(stage, net, variant=net.variant)
        accuracy = self.classifier_accuracy(net, "train")
        logger.info("stage %s finished: train classification accuracy %.3f", stage, accuracy)
        return StageResult(stage, steps, time.monotonic() - started, loss_value, {"train_accuracy": accuracy})

    def _grid_seeds(self, mask: SeedMask, flip: bool) -> SeedMask:
        if flip:
            mask = mask.flip()
        return mask.sample_grid(self.cfg.backbone.stride)

    def classifier_accuracy(self, net: SganNet, split: str) -> float:
        samples = self.samples(split)
        if not samples:
            return 0.0
        strong = self.strong_indices() if split == "train" else set()

        def run(i: int) -> np.ndarray:
            s = samples[i]
            with no_grad():
                return net(preprocess(s.image, self.cfg.train.dtype), self.saliency_for(i, s, strong)).tau.data

        tau = np.stack(self._map(run, list(range(len(samples)))))
        return classification_accuracy(tau, np.stack([s.labels for s in samples]))

    def make_seeds(self, stage: str) -> Path:
        if stage not in SEED_STAGES:
            raise PipelineError(f"seed stage must be one of {SEED_STAGES}, got {stage!r}")
        samples = self.samples("train")
        strong = self.strong_indices()
        thresholds = self.cfg.thresholds
        if stage == "initial":
            net = self.load_classifier(STAGE_BASELINE)
        else:
            net = self.load_classifier(self.classifier_stage())
        source = self.cfg.resolved_seed_source if net.seed_branch is not None else "cls"
        if stage == "final" and source != self.cfg.resolved_seed_source:
            logger.warning("variant %s has no seed branch; final seeds use classifier CAMs", net.variant)

        def run(i: int) -> tuple[SeedMask, SeedMask | None]:
            s = samples[i]
            if i in strong:
                return semi_substitute(s)[1], None
            classes = s.present_classes()
            saliency = self.saliency_for(i, s, strong)
            with no_grad():
                out = net(preprocess(s.image, self.cfg.train.dtype), saliency)
            cam_cls = net.cams(out, classes)
            if stage == "initial":
                return initial_seeds(match_resolution(cam_cls, s.size), s.labels, thresholds.initial), None
            if source == "cls":
                cams = cam_cls
            elif source == "seg":
                cams = net.seed_branch_cams(out, classes)
            else:
                cams = ensemble_cams(cam_cls, net.seed_branch_cams(out, classes))
            # α-rule seeds before saliency gating, for the mis-spread measurement
            ungated = final_seeds(cams, np.ones(s.size), s.labels, thresholds.alpha, -1.0)
            return final_seeds(cams, saliency, s.labels, thresholds.alpha, thresholds.beta), ungated

        results = self._map(run, list(range(len(samples))))
        out_dir = self.seed_dir(stage)
        for s, (mask, _) in zip(samples, results):
            write_seed_mask(out_dir / f"{s.sample_id}.pgm", mask)
        masks = [m for m, _ in results]
        gts = [s.gt for s in samples]
        stats: dict[str, Any] = {"stage": stage, "source": source, "count": len(masks), "weak_images": len(masks) - len(strong)}
        quality = weak_seed_quality(masks, gts, strong)
        if quality is not None:
            stats.update(precision=quality.precision, recall=quality.recall, f_beta=quality.f_beta)
        if strong and all(g is not None for g in gts):
            pooled = evaluate_seeds(masks, gts)
            stats.update(precision_all=pooled.precision, recall_all=pooled.recall, f_beta_all=pooled.f_beta)
        cls = self._misspread_class()
        if stage == "final" and cls is not None:
            pairs = [(u, s.gt) for s, (_, u) in zip(samples, results) if u is not None and s.gt is not None]
            stats["misspread_class"] = cls
            stats["misspread"] = misspread_fraction([u for u, _ in pairs], [g for _, g in pairs], cls)
        (out_dir / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True), encoding="utf-8")
        logger.info("%s seeds written to %s (%s)", stage, out_dir, stats)
        return out_dir

    def _misspread_class(self) -> int | None:
        if self.cfg.misspread_class is not None:
            return self.cfg.misspread_class
        return self.cfg.dataset.biased_class if self.cfg.dataset.co_occurrence_bias else None

    def load_seeds(self, stage: str, samples: list[Sample]) -> list[SeedMask]:
        folder = self.seed_dir(stage)
        masks = []
        for s in samples:
            path = folder / f"{s.sample_id}.pgm"
            if not path.exists():
                raise PipelineError(f"{stage} seeds missing for {s.sample_id} ({path}); run make-seeds --stage {stage}")
            masks.append(read_seed_mask(path))
        return masks

    def train_seg(self) -> StageResult:
        self.save_config()
        cfg = self.cfg
        samples = self.samples("train")
        strong = self.strong_indices()
        seeds = self.load_seeds("final", samples)
        for i in strong:
            seeds[i] = semi_substitute(samples[i])[1]

        net = SegNet(cfg)
        if cfg.seg.init_from_baseline:
            if checkpoint_exists(self.checkpoint_stem(STAGE_BASELINE)):
                state, _ = self._load(STAGE_BASELINE)
                with self._restoring(STAGE_BASELINE):
                    net.init_backbone(state)
            else:
                logger.warning("no baseline checkpoint; segmentation backbone starts from random init")
        opt = SGD(net.named_parameters(), cfg.optimizer)
        stride = cfg.backbone.stride
        weight = cfg.seg.boundary_weight
        steps = cfg.seg_iterations
        crf_cache: dict[tuple[int, bool], tuple[int, np.ndarray]] = {}
        started = time.monotonic()
        loss_value: float | None = None

        for step, batch in enumerate(self._batches(STAGE_SEG, samples, strong, steps)):
            opt.zero_grad()
            try:
                phi = net(preprocess(batch.images, cfg.train.dtype))
                grid = [self._grid_seeds(seeds[i], flip) for i, flip in zip(batch.indices, batch.flipped)]
                l_seed = balanced_seed_loss(phi, grid)
                terms = {"L_balance_seed": l_seed.item()}
                total = l_seed
                if weight > 0:
                    target = np.stack(
                        [self._crf_target(crf_cache, step, i, flip, img, phi.data[k]) for k, (i, flip, img) in enumerate(zip(batch.indices, batch.flipped, batch.images))]
                    )
                    l_boundary = boundary_loss(phi, target)
                    terms["L_boundary"] = l_boundary.item()
                    total = l_seed + scale(l_boundary, weight)
                backward(total)
            except TensorError as exc:
                raise TrainingDiverged(STAGE_SEG, step, str(exc)) from exc
            loss_value = total.item()
            if not math.isfinite(loss_value):
                raise TrainingDiverged(STAGE_SEG, step, "non-finite loss")
            lr = opt.step()
            if step % cfg.train.log_interval == 0 or step == steps - 1:
                self.train_log.append({"stage": STAGE_SEG, "variant": cfg.variant, "step": step, "lr": lr, "L_total": loss_value, **terms})
                logger.info("seg step %d: loss %.4f", step, loss_value)

        self._save(STAGE_SEG, net, variant=cfg.variant)
        return StageResult(STAGE_SEG, steps, time.monotonic() - started, loss_value)

    def _crf_target(
        self,
        cache: dict[tuple[int, bool], tuple[int, np.ndarray]],
        step: int,
        index: int,
        flip: bool,
        image: np.ndarray,
        phi: np.ndarray,
    ) -> np.ndarray:
        """R(I, Φ) on the feature grid, recomputed once ``refresh_interval`` steps have passed."""
        key = (index, flip)
        hit = cache.get(key)
        if hit is not None and step - hit[0] < self.cfg.crf.refresh_interval:
            return hit[1]
        stride = self.cfg.backbone.stride
        small = downsample_image(image, stride)
        r = mean_field(small, phi.astype(np.float64), self.cfg.crf, pixel_pitch=float(stride))
        cache[key] = (step, r)
        return r

    def predict(self, net: SegNet, sample: Sample) -> np.ndarray:
        with no_grad():
            phi = net(preprocess(sample.image, self.cfg.train.dtype)).data
        labels = predict_labels(phi)
        stride = self.cfg.backbone.stride
        return np.repeat(np.repeat(labels, stride, axis=0), stride, axis=1)

    def evaluate(self) -> MetricsReport:
        state, _ = self._load(STAGE_SEG)
        net = SegNet(self.cfg)
        with self._restoring(STAGE_SEG):
            net.load_state_dict(state)
        val = self.samples("val")
        if any(s.gt is None for s in val):
            raise PipelineError("validation samples need ground truth for evaluation")
        preds = self._map(lambda s: self.predict(net, s), val)
        report = evaluate_segmentation(preds, [s.gt for s in val], self.cfg.dataset.num_classes)

        train = self.samples("train")
        if (self.seed_dir("final") / "stats.json").exists():
            quality = weak_seed_quality(self.load_seeds("final", train), [s.gt for s in train], self.strong_indices())
            if quality is not None:
                report.seed_precision = quality.precision
                report.seed_recall = quality.recall
                report.f_beta = quality.f_beta
                report.no_foreground_seeds = quality.no_foreground_seeds
            stats = json.loads((self.seed_dir("final") / "stats.json").read_text(encoding="utf-8"))
            report.misspread = stats.get("misspread")
        if checkpoint_exists(self.checkpoint_stem(self.classifier_stage())):
            report.classification_accuracy = self.classifier_accuracy(self.load_classifier(self.classifier_stage()), "val")
        report.save(self.metrics_path)
        logger.info("metrics written to %s (mIoU %s, F_beta %s)", self.metrics_path, report.miou, report.f_beta)
        return report

    def viz(self, sample_id: str, what: str = "cam", pixel: tuple[int, int] | None = None) -> list[Path]:
        sample = self._find(sample_id)
        net = self.load_classifier(self.classifier_stage())
        with no_grad():
            out = net(preprocess(sample.image, self.cfg.train.dtype), sample.saliency)
        self.viz_dir.mkdir(parents=True, exist_ok=True)

        if what == "cam":
            cams = match_resolution(net.cams(out, sample.present_classes()), sample.size)
            paths = []
            for z in sample.present_classes():
                path = self.viz_dir / f"{sample_id}_cam{z}.pgm"
                netpbm.write(path, netpbm.to_heatmap(cams.maps[z - 1]))
                paths.append(path)
            return paths
        if what == "attention":
            if net.attention is None:
                raise PipelineError(f"variant {net.variant} has no attention module to visualise")
            if pixel is None:
                raise PipelineError("attention visualisation needs a feature-grid pixel (row, col)")
            return [self.attention_column(net, out, sample_id, pixel)]
        raise PipelineError(f"unknown visualisation {what!r}; expected 'cam' or 'attention'")

    def attention_column(self, net: SganNet, out: SganOutput, sample_id: str, pixel: tuple[int, int]) -> Path:
        h, w = out.features.shape[-2:]
        r, c = pixel
        if not (0 <= r < h and 0 <= c < w):
            raise PipelineError(f"pixel {pixel} is outside the {h}x{w} feature grid")
        with no_grad():
            d = context_attention(spatial_attention(out.features, net.attention), out.mask.values).data
        column = d[:, r * w + c].reshape(h, w)
        path = self.viz_dir / f"{sample_id}_attn_{r}_{c}.pgm"
        netpbm.write(path, netpbm.to_heatmap(column))
        return path

    def _find(self, sample_id: str) -> Sample:
        for split in ("train", "val"):
            for s in self.samples(split):
                if s.sample_id == sample_id:
                    return s
        raise PipelineError(f"sample {sample_id!r} not found in {self.data_dir}")

    def run_all(self) -> MetricsReport:
        self.gen_data()
        self.train_baseline()
        self.make_seeds("initial")
        self.train_sgan()
        self.make_seeds("final")
        self.train_seg()
        return self.evaluate()
