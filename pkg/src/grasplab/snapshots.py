"""Versioned, immutable network snapshots.

File layout: one JSON header line (magic, format version, parameter version,
layer/tensor table) terminated by a newline, followed by the raw tensors as
little-endian float32 in declaration order.  Saving the result of a load
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .net import ARCHITECTURE, LayerParams, NetworkParams

MAGIC = "GLSNAP"
FORMAT_VERSION = 1
_TENSOR_ORDER = ("w", "b", "gamma", "beta", "run_mean", "run_var")


def params_to_bytes(params: NetworkParams) -> bytes:
    layers = []
    blobs = []
    for lp in params.layers:
        table = {}
        for name in _TENSOR_ORDER:
            t = getattr(lp, name)
            if t is None:
                continue
            table[name] = list(t.shape)
            blobs.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
        layers.append(table)
    header = json.dumps({"magic": MAGIC, "format": FORMAT_VERSION,
                         "param_version": params.version, "layers": layers},
                        sort_keys=True, separators=(",", ":"))
    return header.encode("ascii") + b"\n" + b"".join(blobs)


def params_from_bytes(blob: bytes) -> NetworkParams:
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode("ascii"))
    if header.get("magic") != MAGIC:
        raise ValueError("not a snapshot file")
    if header.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported snapshot format {header.get('format')}")
    if len(header["layers"]) != len(ARCHITECTURE):
        raise ValueError("snapshot layer table does not match the architecture")
    offset = nl + 1
    layers = []
    for table in header["layers"]:
        fields = {}
        for name in _TENSOR_ORDER:
            if name not in table:
                continue
            shape = tuple(table[name])
            n = int(np.prod(shape))
            t = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
            fields[name] = t.reshape(shape).copy()
            offset += 4 * n
        layers.append(LayerParams(**fields))
    return NetworkParams(layers, version=header.get("param_version", 0))


def save_params(params: NetworkParams, path: Union[str, Path]) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path: Union[str, Path]) -> NetworkParams:
    return params_from_bytes(Path(path).read_bytes())


class SnapshotStore:
    """Monotone-id snapshot directory: snap-000000.bin, snap-000001.bin, ..."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, snapshot_id: str) -> Path:
        return self.root / f"{snapshot_id}.bin"

    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("snap-*.bin"))

    def latest(self) -> str | None:
        ids = self.ids()
        return ids[-1] if ids else None

    def save(self, params: NetworkParams) -> str:
        ids = self.ids()
        next_no = int(ids[-1].split("-")[1]) + 1 if ids else 0
        snapshot_id = f"snap-{next_no:06d}"
        tmp = self._path(snapshot_id).with_suffix(".tmp")
        tmp.write_bytes(params_to_bytes(params))
        tmp.replace(self._path(snapshot_id))        # atomic publish
        return snapshot_id

    def load(self, snapshot_id: str) -> NetworkParams:
        path = self._path(snapshot_id)
        if not path.exists():
            raise KeyError(f"unknown snapshot id {snapshot_id!r}")
        return params_from_bytes(path.read_bytes())
