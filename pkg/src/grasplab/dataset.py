"""Grasp-attempt log, timestamp-hash split, and training weights.

The log is an append-only text file, one attempt per line with a crc32
trailer; window images live next to it in a content-addressed directory
using the shared 16-bit heightmap container.  Train/test membership is a
pure function of the attempt timestamp, so it never changes as the dataset
grows and records can never migrate between the two sets.
"""

from __future__ import annotations

import hashlib
import threading
import zlib
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from . import heightmap_io
from .hashing import fnv1a_64, unit_hash

TEST_FRACTION = 0.2


class LogCorrupt(ValueError):
    pass


@dataclass(frozen=True)
class GraspAttempt:
    timestamp: str                  # unique, monotonically assigned token
    window_hash: str                # content address of the stored window
    k_rot: int
    i: int
    j: int
    k_d: int
    reward: int
    psi_pred: float                 # prediction at attempt time (stored window)
    method: str                     # selector token
    scene_id: str
    snapshot_id: str

    def fields(self) -> list[str]:
        return [self.timestamp, self.window_hash, str(self.k_rot),
                str(self.i), str(self.j), str(self.k_d), str(self.reward),
                str(int(round(self.psi_pred * 1e6))), self.method,
                self.scene_id, self.snapshot_id]


def _crc(fields: list[str]) -> str:
    joined = "\t".join(fields)
    return f"{zlib.crc32(joined.encode()) & 0xFFFFFFFF:08x}"


def format_line(attempt: GraspAttempt) -> str:
    fields = attempt.fields()
    return "\t".join(fields + [_crc(fields)])


def parse_line(line: str) -> GraspAttempt:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 12:
        raise LogCorrupt(f"expected 12 fields, got {len(parts)}")
    if _crc(parts[:-1]) != parts[-1]:
        raise LogCorrupt(f"bad checksum for attempt {parts[0]!r}")
    (ts, whash, k_rot, i, j, k_d, reward, psi_int, method,
     scene_id, snapshot_id) = parts[:-1]
    return GraspAttempt(ts, whash, int(k_rot), int(i), int(j), int(k_d),
                        int(reward), int(psi_int) / 1e6, method, scene_id,
                        snapshot_id)


class LogicalClock:
    """Deterministic ISO-8601 timestamps: fixed epoch + 10 s per attempt.

    The epoch is salted by a run tag so logs from different runs can be merged
    without timestamp collisions; a monotonic counter suffix guarantees
    uniqueness even at sub-step granularity.
    """

    BASE = datetime(2020, 1, 1, 0, 0, 0)

    def __init__(self, tag: str = "run", step_s: float = 10.0, counter: int = 0):
        self.tag = tag
        self.step_s = step_s
        self.counter = counter
        salt_s = fnv1a_64(tag.encode()) % (3650 * 24 * 3600)
        self._epoch = self.BASE + timedelta(seconds=salt_s)

    def next(self) -> str:
        t = self._epoch + timedelta(seconds=self.step_s * self.counter)
        token = f"{t.isoformat()}#{self.counter:06d}"
        self.counter += 1
        return token


def assign_split(timestamp: str, test_fraction: float = TEST_FRACTION) -> str:
    """'train' or 'test', a pure function of the timestamp alone."""
    if not timestamp:
        raise ValueError("empty timestamp")
    return "test" if unit_hash(timestamp.encode()) < test_fraction else "train"


class AttemptLog:
    """Append-only attempt log with content-addressed window storage.

    Single writer, any number of readers: a reader parsing the file sees the
    consistent prefix of fully written lines.  Appends are flushed per record.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "windows").mkdir(exist_ok=True)
        self.path = self.root / "attempts.log"
        self._lock = threading.Lock()
        self._attempts: list[GraspAttempt] = []
        self._timestamps: set[str] = set()
        if self.path.exists():
            self._attempts = self._parse(self.path.read_text())
            self._timestamps = {a.timestamp for a in self._attempts}
        self._fh = open(self.path, "a")

    @staticmethod
    def _parse(text: str) -> list[GraspAttempt]:
        attempts = []
        seen = set()
        for line in text.splitlines():
            if not line.strip():
                continue
            a = parse_line(line)
            if a.timestamp in seen:
                raise LogCorrupt(f"duplicate timestamp {a.timestamp!r}")
            seen.add(a.timestamp)
            attempts.append(a)
        return attempts

    def __len__(self) -> int:
        with self._lock:
            return len(self._attempts)

    def window_path(self, window_hash: str) -> Path:
        return self.root / "windows" / f"{window_hash}.hm"

    def store_window(self, blob: bytes) -> str:
        """Content-address a serialized window; returns its hash token."""
        whash = hashlib.sha256(blob).hexdigest()[:20]
        path = self.window_path(whash)
        if not path.exists():
            path.write_bytes(blob)
        return whash

    def load_window(self, window_hash: str) -> np.ndarray:
        blob = self.window_path(window_hash).read_bytes()
        magic, values, _, _, _ = heightmap_io.decode(blob)
        if magic != heightmap_io.MAGIC_WINDOW:
            raise LogCorrupt(f"window {window_hash} has wrong magic")
        return values.astype(np.float32)

    def append(self, attempt: GraspAttempt,
               window_blob: bytes | None = None) -> GraspAttempt:
        if window_blob is not None:
            attempt = replace(attempt,
                              window_hash=self.store_window(window_blob))
        with self._lock:
            if attempt.timestamp in self._timestamps:
                raise ValueError(f"duplicate timestamp {attempt.timestamp!r}")
            self._fh.write(format_line(attempt) + "\n")
            self._fh.flush()
            self._timestamps.add(attempt.timestamp)
            self._attempts.append(attempt)
        return attempt

    def load_all(self) -> list[GraspAttempt]:
        with self._lock:
            return list(self._attempts)

    def close(self):
        self._fh.close()


def load_attempts(root: Union[str, Path]) -> list[GraspAttempt]:
    """Read a log directory without opening it for append."""
    path = Path(root) / "attempts.log"
    if not path.exists():
        return []
    return AttemptLog._parse(path.read_text())


def load_training_arrays(roots: Iterable[Union[str, Path]]):
    """Materialize (attempts, windows) from one or more log directories."""
    attempts: list[GraspAttempt] = []
    windows: list[np.ndarray] = []
    for root in roots:
        log_attempts = load_attempts(root)
        root = Path(root)
        for a in log_attempts:
            blob = (root / "windows" / f"{a.window_hash}.hm").read_bytes()
            magic, values, _, _, _ = heightmap_io.decode(blob)
            if magic != heightmap_io.MAGIC_WINDOW:
                raise LogCorrupt(f"window {a.window_hash} has wrong magic")
            windows.append(values.astype(np.float32))
        attempts.extend(log_attempts)
    seen = set()
    for a in attempts:
        if a.timestamp in seen:
            raise LogCorrupt(f"duplicate timestamp {a.timestamp!r} in merge")
        seen.add(a.timestamp)
    stack = (np.stack(windows) if windows
             else np.zeros((0, 32, 32), np.float32))
    return attempts, stack


# -- training weights ---------------------------------------------------------

class SingleClassError(ValueError):
    """Weights need both successful and failed attempts."""


def balance_weights(rewards: np.ndarray) -> np.ndarray:
    """Per-class weights making the weighted mean reward exactly 0.5.

    c+ * n+ = c- * n- with mean weight 1: c+ = n/(2 n+), c- = n/(2 n-).
    """
    r = np.asarray(rewards)
    n_pos = int((r == 1).sum())
    n_neg = int((r == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("both reward classes are required")
    n = r.size
    w = np.where(r == 1, n / (2.0 * n_pos), n / (2.0 * n_neg))
    return w


def asymmetry_weights(rewards: np.ndarray, kappa: float = 2.0) -> np.ndarray:
    """Upweight failed attempts by kappa (predicted-success-on-failure is the
    costly error), renormalized to mean 1.  Composes multiplicatively with
    balance weights: final = balance * asymmetry."""
    if kappa < 1.0:
        raise ValueError("kappa must be >= 1")
    r = np.asarray(rewards)
    raw = np.where(r == 0, kappa, 1.0)
    return raw / raw.mean()


def retrain_weights(rewards: np.ndarray, predictions: np.ndarray) -> np.ndarray:
    """Agreement-normalized weights: w_i = N (1 - |r_i - psi_i|) / sum_j (...).

    Attempts the model already agrees with end up above 1, contradicted ones
    below 1; the mean is exactly 1 by construction.
    """
    r = np.asarray(rewards, dtype=np.float64)
    psi = np.asarray(predictions, dtype=np.float64)
    agreement = 1.0 - np.abs(r - psi)
    total = agreement.sum()
    if total <= 0.0:
        raise ValueError("all predictions maximally wrong; weights undefined")
    return agreement * (r.size / total)
