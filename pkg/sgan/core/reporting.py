from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import pandas as pd
import yaml

from sgan.utils.logging import TrainLog

SCORE_COLUMNS = ["seed_precision", "seed_recall", "f_beta", "miou", "misspread", "classification_accuracy"]


@dataclass
class OrderingCheck:
    name: str
    passed: bool
    detail: str


def load_run(run_dir: Path | str) -> dict:
    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.json"
    if not metrics_path.exists():
        raise FileNotFoundError(f"{metrics_path} not found; run eval for this run first")
    metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
    cfg_path = run_dir / "config.yaml"
    cfg = yaml.safe_load(cfg_path.read_text(encoding="utf-8")) if cfg_path.exists() else {}
    dataset = cfg.get("dataset", {})
    return {
        "run": run_dir.name,
        "variant": cfg.get("variant"),
        "semi_fraction": cfg.get("semi_fraction", 0.0),
        "lambda": cfg.get("sgan", {}).get("lambda"),
        "co_occurrence_bias": dataset.get("co_occurrence_bias", False),
        **{k: metrics.get(k) for k in SCORE_COLUMNS},
        "per_class_iou": metrics.get("per_class_iou", []),
    }


def compare_runs(run_dirs: Iterable[Path | str]) -> pd.DataFrame:
    rows = [load_run(d) for d in run_dirs]
    if not rows:
        return pd.DataFrame()
    df = pd.DataFrame(rows).drop(columns=["per_class_iou"])
    for col in SCORE_COLUMNS:
        df[col] = (pd.to_numeric(df[col], errors="coerce") * 100).round(2)
    return df


def per_class_iou(run_dirs: Iterable[Path | str]) -> pd.DataFrame:
    rows = [load_run(d) for d in run_dirs]
    if not rows:
        return pd.DataFrame()
    table = pd.DataFrame(
        {r["run"]: pd.Series(r["per_class_iou"], dtype="float64") * 100 for r in rows}
    ).T
    table.columns = ["background" if i == 0 else f"class{i}" for i in table.columns]
    return table.round(2)


def loss_summary(run_dir: Path | str) -> pd.DataFrame:
    records = TrainLog(Path(run_dir) / "train.log").read()
    if not records:
        return pd.DataFrame()
    df = pd.DataFrame(records).sort_values(["stage", "step"])
    out = df.groupby("stage").agg(
        steps=("step", "max"),
        first_loss=("L_total", "first"),
        last_loss=("L_total", "last"),
        min_loss=("L_total", "min"),
    ).reset_index()
    if "gamma" in df:
        gamma = df.dropna(subset=["gamma"]).groupby("stage")["gamma"].last()
        out["final_gamma"] = out["stage"].map(gamma)
    return out


def sweep_table(df: pd.DataFrame) -> pd.DataFrame:
    if df.empty:
        return df
    return df.sort_values("lambda")[["lambda", "f_beta", "miou"]].reset_index(drop=True)


def _best(df: pd.DataFrame, column: str, **where) -> float | None:
    sel = df
    if column not in sel or any(key not in sel for key in where):
        return None
    for key, value in where.items():
        sel = sel[sel[key] == value]
    values = sel[column].dropna()
    return float(values.iloc[0]) if not values.empty else None


def _gt(name: str, a: float | None, b: float | None, margin: float, label: str) -> OrderingCheck:
    if a is None or b is None:
        return OrderingCheck(name, False, f"missing runs for {label}")
    return OrderingCheck(name, a - b >= margin, f"{label}: {a:.2f} vs {b:.2f} (margin {margin})")


def check_orderings(df: pd.DataFrame) -> list[OrderingCheck]:
    """Expected variant orderings over a comparison table (scores in points)."""
    weak = df[(df["semi_fraction"] == 0) & (~df["co_occurrence_bias"].astype(bool))] if not df.empty else df
    checks = [
        _gt("seed F: sgan > sgan_seed", _best(weak, "f_beta", variant="sgan"), _best(weak, "f_beta", variant="sgan_seed"), 2.0, "f_beta"),
        _gt("seed F: sgan_seed > baseline", _best(weak, "f_beta", variant="sgan_seed"), _best(weak, "f_beta", variant="baseline"), 2.0, "f_beta"),
        _gt("seed F: baseline > sgan_sal_seed", _best(weak, "f_beta", variant="baseline"), _best(weak, "f_beta", variant="sgan_sal_seed"), 2.0, "f_beta"),
    ]
    biased = df[df["co_occurrence_bias"].astype(bool)] if not df.empty else df
    checks.append(
        _gt(
            "mis-spread: sgan_sal_seed - sgan_seed",
            _best(biased, "misspread", variant="sgan_sal_seed"),
            _best(biased, "misspread", variant="sgan_seed"),
            10.0,
            "misspread",
        )
    )
    checks.append(_gt("mIoU: sgan > baseline", _best(weak, "miou", variant="sgan"), _best(weak, "miou", variant="baseline"), 3.0, "miou"))
    semi = df[(df["semi_fraction"] > 0) & (df["variant"] == "sgan")] if not df.empty else df
    for column in ("f_beta", "miou"):
        checks.append(
            _gt(f"semi >= weak ({column})", _best(semi, column), _best(weak, column, variant="sgan"), 0.0, column)
        )
    return checks
