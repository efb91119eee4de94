"""Checkpoint files: one little-endian f32 blob plus a JSON sidecar.

Layout for a checkpoint stem ``ckpt``::

    ckpt.bin    concatenation of every tensor, row-major, '<f4', no header or padding
    ckpt.json   {"format": "sgan-f32le", "version": 1, "meta": {...},
                 "tensors": [{"name": str, "shape": [int, ...], "dtype": "f32",
                              "offset": int, "nbytes": int}, ...]}

``offset`` is the byte offset of the tensor inside ``ckpt.bin``; tensors are stored in
sidecar order with no gaps, so ``offset + nbytes`` of one entry is the next offset.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Mapping

import numpy as np

logger = logging.getLogger(__name__)

FORMAT = "sgan-f32le"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _paths(stem: Path) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in {".bin", ".json"}:
        stem = stem.with_suffix("")
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def save_checkpoint(stem: Path, tensors: Mapping[str, np.ndarray], meta: dict[str, Any] | None = None) -> Path:
    bin_path, json_path = _paths(stem)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with bin_path.open("wb") as f:
        for name, arr in tensors.items():
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            f.write(blob)
            entries.append(
                {"name": name, "shape": list(np.shape(arr)), "dtype": "f32", "offset": offset, "nbytes": len(blob)}
            )
            offset += len(blob)
    sidecar = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "tensors": entries}
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Checkpoint saved: %s (%d tensors, %d bytes)", bin_path, len(entries), offset)
    return bin_path


def load_checkpoint(stem: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    bin_path, json_path = _paths(stem)
    if not bin_path.exists() or not json_path.exists():
        raise CheckpointError(f"checkpoint not found: {bin_path.with_suffix('')}")
    try:
        sidecar = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{json_path}: invalid sidecar JSON: {exc}") from exc
    if sidecar.get("format") != FORMAT:
        raise CheckpointError(f"{json_path}: unknown format {sidecar.get('format')!r}")

    blob = bin_path.read_bytes()
    out: dict[str, np.ndarray] = {}
    for entry in sidecar["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != 4 * count or start + nbytes > len(blob):
            raise CheckpointError(f"{bin_path}: tensor {entry['name']!r} out of bounds or size mismatch")
        out[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape).copy()
    return out, sidecar.get("meta", {})


def checkpoint_exists(stem: Path) -> bool:
    bin_path, json_path = _paths(stem)
    return bin_path.exists() and json_path.exists()
