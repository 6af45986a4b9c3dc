"""Value-map construction and the four action-selection rules.

The policy is a value function composed with a selection function: the
network scores every discrete grasp cell (20 rotations x 40x40 positions x 3
jaw openings = 96000 cells), then one of Random / Maximum(N) / Probabilistic /
Uncertain picks the cell to execute.  All selectors are pure given an injected
rng; deterministic selectors break ties toward the lowest flat index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import image as img_mod
from . import net as net_mod
from .config import ImageConfig, NetConfig
from .grid import GraspIndex, GridSpec, index_to_pose, pose_to_index  # noqa: F401
from .sim import GraspPose


@dataclass
class ValueMap:
    probs: np.ndarray               # (rotations, grid, grid, openings) in (0,1)
    spec: GridSpec
    snapshot_id: str = ""
    scene_id: str = ""

    def __post_init__(self):
        expected = (self.spec.rotations, self.spec.grid_size,
                    self.spec.grid_size, self.spec.n_openings)
        if self.probs.shape != expected:
            raise ValueError(f"value map shape {self.probs.shape}, "
                             f"expected {expected}")

    def flat(self) -> np.ndarray:
        return self.probs.reshape(-1)

    def at(self, idx: GraspIndex) -> float:
        return float(self.probs[idx.k_rot, idx.i, idx.j, idx.k_d])


def normalized_input(depth: img_mod.DepthImage,
                     image_cfg: ImageConfig) -> np.ndarray:
    """Scale a metric heightmap to the network's input range.

    Windows are normalized per window by subtracting a local reference depth;
    here the reference is the floor (0).  The two agree through the network
    because the first-layer kernels are zero-sum (see net module).
    """
    return np.clip(depth.data / image_cfg.normalize_clamp_mm, -1.0,
                   1.0).astype(np.float32)


def evaluate(depth: img_mod.DepthImage, params: net_mod.NetworkParams, *,
             image_cfg: ImageConfig | None = None,
             net_cfg: NetConfig | None = None,
             engine: net_mod.InferenceEngine | None = None,
             snapshot_id: str = "", scene_id: str = "") -> ValueMap:
    """Full discrete value map: rotate, pad, run the net per rotation slice.

    Cell (k, i, j, d) scores the pose whose closing axis is rotated by a_k
    and whose center is the (i, j) action cell of the k-rotated image.
    """
    image_cfg = image_cfg or ImageConfig()
    net_cfg = net_cfg or NetConfig()
    if engine is None or engine.version != params.version:
        engine = net_mod.InferenceEngine(params, net_cfg)
    padded = img_mod.pad_for_inference(depth, image_cfg.size_px)
    stack = img_mod.rotate_stack(padded, image_cfg.rotations)
    slices = [engine.full(normalized_input(rot, image_cfg)) for rot in stack]
    probs = np.stack(slices).astype(np.float32)
    spec = GridSpec(image_cfg.rotations, image_cfg.grid_size,
                    image_cfg.pitch_mm * 2.0, probs.shape[-1])
    return ValueMap(probs, spec, snapshot_id, scene_id)


# -- selection functions ------------------------------------------------------

def select_random(rng: np.random.Generator, spec: GridSpec,
                  size: int | None = None):
    """Uniform over all cells; the only selector spanning the whole space."""
    flats = rng.integers(spec.n_cells, size=1 if size is None else size)
    if size is None:
        return GraspIndex.from_flat(int(flats[0]), spec)
    return flats


def _top_candidates(flat: np.ndarray, n: int,
                    exclude: set[int] | None = None) -> np.ndarray:
    """Flat indices of the n largest entries, ties toward lower index."""
    if exclude:
        flat = flat.copy()
        flat[list(exclude)] = -np.inf
    n = min(n, flat.size - (len(exclude) if exclude else 0))
    if n <= 0:
        raise ValueError("no cells left to select from")
    threshold = np.partition(flat, flat.size - n)[flat.size - n]
    above = np.flatnonzero(flat > threshold)
    ties = np.flatnonzero(flat == threshold)
    take = n - above.size
    return np.sort(np.concatenate([above, ties[:take]]))


def select_maximum(vmap: ValueMap, n: int, rng: np.random.Generator,
                   exclude: set[int] | None = None,
                   size: int | None = None):
    """Uniformly one of the n highest-valued cells (n=1: greedy argmax)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    candidates = _top_candidates(vmap.flat().astype(np.float64), n, exclude)
    picks = candidates[rng.integers(candidates.size,
                                    size=1 if size is None else size)]
    if size is None:
        return GraspIndex.from_flat(int(picks[0]), vmap.spec)
    return picks


def select_probabilistic(vmap: ValueMap, rng: np.random.Generator,
                         size: int | None = None):
    """Draw a cell with probability proportional to its value."""
    weights = vmap.flat().astype(np.float64)
    total = weights.sum()
    if not np.isfinite(total) or total <= 0.0:
        return select_random(rng, vmap.spec, size)   # degenerate normalization
    p = weights / total
    flats = rng.choice(weights.size, size=1 if size is None else size, p=p)
    if size is None:
        return GraspIndex.from_flat(int(flats[0]), vmap.spec)
    return flats


def select_uncertain(vmap: ValueMap) -> GraspIndex:
    """Deterministic: the cell whose value is nearest 0.5."""
    flat = np.abs(vmap.flat().astype(np.float64) - 0.5)
    return GraspIndex.from_flat(int(np.argmin(flat)), vmap.spec)


@dataclass(frozen=True)
class GraspPlan:
    """Exploitation plan: greedy choice, then one fallback from the next best."""

    primary: GraspIndex
    fallback: GraspIndex

    def __iter__(self):
        yield self.primary
        yield self.fallback


def exploit_with_retry(vmap: ValueMap, rng: np.random.Generator,
                       retry_n: int = 5) -> GraspPlan:
    """Argmax first; if that grasp fails, one draw from the top retry_n
    remaining cells (the failed cell excluded)."""
    primary = select_maximum(vmap, 1, rng)
    fallback = select_maximum(vmap, retry_n, rng,
                              exclude={primary.flat(vmap.spec)})
    return GraspPlan(primary, fallback)


def to_pose(idx: GraspIndex, spec: GridSpec) -> GraspPose:
    x, y, a = index_to_pose(idx, spec)
    return GraspPose(x, y, a, idx.k_d)


# -- selector tokens (CLI / config) -------------------------------------------

def parse_selector(token: str):
    """'random' | 'maxN:<N>' | 'prob' | 'uncertain' -> callable(vmap, rng)."""
    if token == "random":
        return lambda vmap, rng: select_random(rng, vmap.spec)
    if token == "prob":
        return lambda vmap, rng: select_probabilistic(vmap, rng)
    if token == "uncertain":
        return lambda vmap, rng: select_uncertain(vmap)
    if token.startswith("maxN:"):
        n = int(token.split(":", 1)[1])
        return lambda vmap, rng: select_maximum(vmap, n, rng)
    raise ValueError(f"unknown selector token {token!r}")
