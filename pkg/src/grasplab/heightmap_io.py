"""Shared binary heightmap container and graymap export.

Layout: one plain-text header line of exactly eight whitespace-separated
fields ::

    magic width height pitch_mm depth_scale sentinel seed version

followed by ``width*height`` little-endian uint16 values, row major.  The
sentinel count (0xFFFF) marks missing data.  Two magics share the container:

* ``GLD1`` — metric depth images, value_mm = count * depth_scale
* ``GLW1`` — normalized network windows, value = count * depth_scale - 1.0
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import Union

import numpy as np

MAGIC_DEPTH = "GLD1"
MAGIC_WINDOW = "GLW1"
SENTINEL = 0xFFFF
VERSION = 1

DEPTH_SCALE = 0.01          # mm per count: 0..655.34 mm range
WINDOW_SCALE = 2.0 / 65000  # [-1, 1] mapped onto counts 0..65000


def encode_depth(values_mm: np.ndarray, missing: np.ndarray | None,
                 pitch_mm: float, seed: int = 0) -> bytes:
    """Serialize a metric heightmap (mm above floor) to the container."""
    values_mm = np.asarray(values_mm, dtype=np.float64)
    counts = np.round(values_mm / DEPTH_SCALE).astype(np.int64)
    if counts.min() < 0 or counts.max() >= SENTINEL:
        raise ValueError("depth out of encodable range")
    counts = counts.astype(np.uint16)
    if missing is not None:
        counts[np.asarray(missing, dtype=bool)] = SENTINEL
    return _encode(MAGIC_DEPTH, counts, pitch_mm, DEPTH_SCALE, seed)


def encode_window(values: np.ndarray, pitch_mm: float, seed: int = 0) -> bytes:
    """Serialize a normalized window (values in [-1, 1])."""
    values = np.asarray(values, dtype=np.float64)
    counts = np.round((values + 1.0) / WINDOW_SCALE).astype(np.int64)
    if counts.min() < 0 or counts.max() >= SENTINEL:
        raise ValueError("window values outside [-1, 1]")
    return _encode(MAGIC_WINDOW, counts.astype(np.uint16), pitch_mm,
                   WINDOW_SCALE, seed)


def _encode(magic: str, counts: np.ndarray, pitch_mm: float,
            scale: float, seed: int) -> bytes:
    h, w = counts.shape
    header = f"{magic} {w} {h} {pitch_mm!r} {scale!r} {SENTINEL} {seed} {VERSION}\n"
    return header.encode("ascii") + counts.astype("<u2").tobytes()


def decode(blob: bytes):
    """Parse a container; returns (magic, values, missing, pitch_mm, seed).

    ``values`` is float64 in the magic's native unit (mm for GLD1, [-1, 1]
    for GLW1); missing entries hold 0.0 with the mask set.
    """
    nl = blob.index(b"\n")
    fields = blob[:nl].decode("ascii").split()
    if len(fields) != 8:
        raise ValueError("malformed heightmap header")
    magic, w, h, pitch, scale, sentinel, seed, version = fields
    if magic not in (MAGIC_DEPTH, MAGIC_WINDOW):
        raise ValueError(f"unknown heightmap magic {magic!r}")
    if int(version) != VERSION:
        raise ValueError(f"unsupported heightmap version {version}")
    w, h, sentinel, seed = int(w), int(h), int(sentinel), int(seed)
    counts = np.frombuffer(blob, dtype="<u2", offset=nl + 1, count=w * h)
    counts = counts.reshape(h, w)
    missing = counts == sentinel
    values = counts.astype(np.float64) * float(scale)
    if magic == MAGIC_WINDOW:
        values -= 1.0
    values[missing] = 0.0
    return magic, values, missing, float(pitch), seed


def read_file(path: Union[str, Path]):
    return decode(Path(path).read_bytes())


def write_pgm(path: Union[str, Path], values: np.ndarray,
              lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary PGM dump of a 2-D array, for human inspection."""
    a = np.asarray(values, dtype=np.float64)
    lo = float(a.min()) if lo is None else lo
    hi = float(a.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    gray = np.clip(np.round((a - lo) / span * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with io.BytesIO() as buf:
        buf.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        buf.write(gray.tobytes())
        Path(path).write_bytes(buf.getvalue())
