from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import pandas as pd
from pydantic import ValidationError

from sgan.core.checkpoint import CheckpointError
from sgan.core.config import CONFIG_PATH, ConfigError, ConfigManager, PipelineConfig, validate_config
from sgan.core.crf import CrfError
from sgan.core.metrics import MetricsError
from sgan.core.pipeline import Pipeline, PipelineError, TrainingDiverged
from sgan.core.reporting import check_orderings, compare_runs, loss_summary, per_class_iou, sweep_table
from sgan.core.seeds import SeedError
from sgan.core.tensor import GradError, TensorError
from sgan.services.netpbm import NetpbmError
from sgan.services.synth_data import DatasetError
from sgan.utils.logging import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DEFAULT_LAMBDAS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)

RUNTIME_ERRORS = (
    TensorError,
    GradError,
    CheckpointError,
    NetpbmError,
    DatasetError,
    SeedError,
    CrfError,
    MetricsError,
    TrainingDiverged,
    PipelineError,
    FileNotFoundError,
)


def _pixel(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"pixel must look like ROW,COL, got {text!r}") from exc
    return r, c


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgan", description="Saliency-guided weakly supervised segmentation pipeline")
    parser.add_argument("--config", type=Path, default=CONFIG_PATH, help="YAML or JSON configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")
    parser.add_argument("--run-dir", type=Path, default=Path("runs/default"))
    parser.add_argument("--data", type=Path, default=None, help="dataset directory (default: <run-dir>/data)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    gen.add_argument("--force", action="store_true")
    sub.add_parser("train-baseline", help="stage 0: classification baseline")
    seeds = sub.add_parser("make-seeds", help="write initial or final seed masks")
    seeds.add_argument("--stage", choices=("initial", "final"), required=True)
    sub.add_parser("train-sgan", help="stage 1: saliency-guided attention network")
    sub.add_parser("train-seg", help="stage 3: segmentation net on final seeds")
    sub.add_parser("eval", help="evaluate segmentation and seeds, write metrics.json")
    viz = sub.add_parser("viz", help="write CAM or attention-column heatmaps")
    viz.add_argument("--sample", required=True)
    viz.add_argument("--what", choices=("cam", "attention"), default="cam")
    viz.add_argument("--pixel", type=_pixel, default=None, help="feature-grid ROW,COL for attention")
    sub.add_parser("run-all", help="every stage for the configured variant")
    sweep = sub.add_parser("sweep-lambda", help="run the pipeline for several seed-loss weights")
    sweep.add_argument("--values", type=float, nargs="+", default=list(DEFAULT_LAMBDAS))
    report = sub.add_parser("report", help="compare run directories")
    report.add_argument("runs", type=Path, nargs="+")
    report.add_argument("--check", action="store_true", help="fail with exit code 3 unless the expected variant orderings hold")
    return parser


def resolve_config(path: Path, overrides: Sequence[str]) -> PipelineConfig:
    return ConfigManager(path).resolve(overrides)


def run_sweep(cfg: PipelineConfig, run_dir: Path, data_dir: Path | None, values: Sequence[float]) -> pd.DataFrame:
    shared = data_dir or run_dir / "data"
    dirs = []
    for lam in values:
        data = cfg.dump()
        data["sgan"]["lambda"] = lam
        sub_dir = run_dir / f"lambda_{lam:g}"
        Pipeline(validate_config(data), sub_dir, shared).run_all()
        dirs.append(sub_dir)
    return sweep_table(compare_runs(dirs))


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "report":
        table = compare_runs(args.runs)
        with pd.option_context("display.width", 160, "display.max_columns", 20):
            print(table.to_string(index=False))
            print(per_class_iou(args.runs).to_string())
            for run in args.runs:
                summary = loss_summary(run)
                if not summary.empty:
                    print(f"\n[{Path(run).name}]")
                    print(summary.to_string(index=False))
        if args.check:
            failed = 0
            for check in check_orderings(table):
                print(f"{'PASS' if check.passed else 'FAIL'}  {check.name}  ({check.detail})")
                failed += not check.passed
            return EXIT_RUNTIME if failed else EXIT_OK
        return EXIT_OK

    cfg = resolve_config(args.config, args.overrides)
    pipeline = Pipeline(cfg, args.run_dir, args.data)
    if args.command == "gen-data":
        pipeline.gen_data(force=args.force)
    elif args.command == "train-baseline":
        pipeline.train_baseline()
    elif args.command == "make-seeds":
        pipeline.make_seeds(args.stage)
    elif args.command == "train-sgan":
        pipeline.train_sgan()
    elif args.command == "train-seg":
        pipeline.train_seg()
    elif args.command == "eval":
        report = pipeline.evaluate()
        logger.info("mIoU=%s F_beta=%s", report.miou, report.f_beta)
    elif args.command == "viz":
        for path in pipeline.viz(args.sample, args.what, args.pixel):
            print(path)
    elif args.command == "run-all":
        pipeline.run_all()
    elif args.command == "sweep-lambda":
        print(run_sweep(cfg, args.run_dir, args.data, args.values).to_string(index=False))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.run_dir / "pipeline.log")
    try:
        return dispatch(args)
    except (ConfigError, ValidationError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except RUNTIME_ERRORS:
        logger.exception("%s failed", args.command)
        return EXIT_RUNTIME


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
