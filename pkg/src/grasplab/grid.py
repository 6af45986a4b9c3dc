"""Discrete grasp space: (rotation, row, col, jaw-opening) cells <-> poses.

The grasp space is rotations x grid^2 x openings cells (20*40*40*3 = 96000 by
default).  Cell (k, i, j, d) denotes the pose whose closing axis is rotated by
a_k = k*pi/rotations and whose (x, y) is the (i, j) grid-cell center *in the
rotated frame*, mapped back to the task frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class GridSpec:
    rotations: int = 20
    grid_size: int = 40
    cell_mm: float = 4.0
    n_openings: int = 3

    @property
    def n_cells(self) -> int:
        return self.rotations * self.grid_size * self.grid_size * self.n_openings

    def angle(self, k_rot: int) -> float:
        return k_rot * math.pi / self.rotations


@dataclass(frozen=True)
class GraspIndex:
    k_rot: int
    i: int
    j: int
    k_d: int

    def flat(self, spec: GridSpec) -> int:
        g, nd = spec.grid_size, spec.n_openings
        return ((self.k_rot * g + self.i) * g + self.j) * nd + self.k_d

    @classmethod
    def from_flat(cls, flat: int, spec: GridSpec) -> "GraspIndex":
        g, nd = spec.grid_size, spec.n_openings
        flat, k_d = divmod(flat, nd)
        flat, j = divmod(flat, g)
        k_rot, i = divmod(flat, g)
        return cls(k_rot, i, j, k_d)


def index_to_pose(idx: GraspIndex, spec: GridSpec):
    """(x, y, a) of a cell center; jaw opening stays an index."""
    half = (spec.grid_size - 1) / 2.0
    xr = (idx.j - half) * spec.cell_mm
    yr = (idx.i - half) * spec.cell_mm
    a = spec.angle(idx.k_rot)
    ca, sa = math.cos(a), math.sin(a)
    return xr * ca - yr * sa, xr * sa + yr * ca, a


def pose_to_index(x: float, y: float, a: float, k_d: int,
                  spec: GridSpec) -> GraspIndex:
    """Nearest cell for a pose; raises when (x, y) falls outside the grid."""
    k = int(round((a % math.pi) / (math.pi / spec.rotations))) % spec.rotations
    ak = spec.angle(k)
    ca, sa = math.cos(ak), math.sin(ak)
    xr = x * ca + y * sa
    yr = -x * sa + y * ca
    half = (spec.grid_size - 1) / 2.0
    i = int(round(yr / spec.cell_mm + half))
    j = int(round(xr / spec.cell_mm + half))
    if not (0 <= i < spec.grid_size and 0 <= j < spec.grid_size):
        raise ValueError(f"pose ({x:.1f}, {y:.1f}, {a:.3f}) outside the grid")
    if not 0 <= k_d < spec.n_openings:
        raise ValueError(f"jaw-opening index {k_d} out of range")
    return GraspIndex(k, i, j, k_d)
