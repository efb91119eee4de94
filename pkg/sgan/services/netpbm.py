"""Binary netpbm codec: P6 (RGB) and P5 (grey), maxval <= 255.

Images are returned channel-first (3×H×W) for P6 and H×W for P5, dtype uint8.
Every parse error names the file and the byte offset where parsing stopped.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

_WHITESPACE = b" \t\r\n\v\f"


class NetpbmError(ValueError):
    pass


def _read_token(buf: bytes, pos: int, path: Path) -> tuple[bytes, int]:
    while pos < len(buf):
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos : pos + 1] not in _WHITESPACE and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise NetpbmError(f"{path}: unexpected end of header at byte offset {pos}")
    return buf[start:pos], pos


def _read_int(buf: bytes, pos: int, path: Path, what: str) -> tuple[int, int]:
    start = pos
    token, pos = _read_token(buf, pos, path)
    if not token.isdigit():
        raise NetpbmError(f"{path}: invalid {what} {token!r} at byte offset {start}")
    return int(token), pos


def decode(buf: bytes, path: Path | str = "<memory>") -> np.ndarray:
    path = Path(path)
    magic, pos = _read_token(buf, 0, path)
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: unsupported magic {magic!r} at byte offset 0")
    width, pos = _read_int(buf, pos, path, "width")
    height, pos = _read_int(buf, pos, path, "height")
    maxval, pos = _read_int(buf, pos, path, "maxval")
    if width <= 0 or height <= 0:
        raise NetpbmError(f"{path}: non-positive size {width}x{height} before byte offset {pos}")
    if not 0 < maxval <= 255:
        raise NetpbmError(f"{path}: unsupported maxval {maxval} before byte offset {pos}")
    if pos >= len(buf) or buf[pos : pos + 1] not in _WHITESPACE:
        raise NetpbmError(f"{path}: missing whitespace after header at byte offset {pos}")
    pos += 1

    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    raster = buf[pos : pos + expected]
    if len(raster) != expected:
        raise NetpbmError(
            f"{path}: truncated raster at byte offset {pos + len(raster)} (expected {expected} bytes, got {len(raster)})"
        )
    arr = np.frombuffer(raster, dtype=np.uint8)
    if np.any(arr > maxval):
        raise NetpbmError(f"{path}: sample above maxval {maxval} in raster starting at byte offset {pos}")
    if channels == 3:
        return arr.reshape(height, width, 3).transpose(2, 0, 1).copy()
    return arr.reshape(height, width).copy()


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise NetpbmError(f"netpbm encode expects uint8 data, got {arr.dtype}")
    if arr.ndim == 2:
        h, w = arr.shape
        return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()
    if arr.ndim == 3 and arr.shape[0] == 3:
        _, h, w = arr.shape
        return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.transpose(1, 2, 0).tobytes()
    raise NetpbmError(f"netpbm encode expects H×W or 3×H×W data, got {arr.shape}")


def read(path: Path | str) -> np.ndarray:
    path = Path(path)
    return decode(path.read_bytes(), path)


def write(path: Path | str, arr: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(arr))
    return path


def to_heatmap(values: np.ndarray) -> np.ndarray:
    """Min-max scale a real map to 0..255 bytes; constant maps become all zero."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
