"""Planar footprint geometry for the 2.5-D world.

Object footprints are disks or oriented rectangles.  Everything here is exact
closed-form scalar math (no tolerance-tuned iterative solvers), because the
simulator's grasp adjudication doubles as the ground-truth oracle in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Disk:
    cx: float
    cy: float
    r: float


@dataclass(frozen=True)
class Rect:
    """Oriented rectangle: center, half extents along local axes, yaw (rad)."""

    cx: float
    cy: float
    hx: float
    hy: float
    yaw: float

    def axes(self):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return (c, s), (-s, c)

    def corners(self):
        (ex, ey), (fx, fy) = self.axes()
        cx, cy, hx, hy = self.cx, self.cy, self.hx, self.hy
        return [
            (cx + sx * hx * ex + sy * hy * fx, cy + sx * hx * ey + sy * hy * fy)
            for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1))
        ]


Footprint = Disk | Rect


def circumradius(fp: Footprint) -> float:
    if isinstance(fp, Disk):
        return fp.r
    return math.hypot(fp.hx, fp.hy)


def _point_in_rect(px: float, py: float, rect: Rect) -> bool:
    (ex, ey), (fx, fy) = rect.axes()
    dx, dy = px - rect.cx, py - rect.cy
    return (abs(dx * ex + dy * ey) <= rect.hx + 1e-12
            and abs(dx * fx + dy * fy) <= rect.hy + 1e-12)


def _point_rect_distance(px: float, py: float, rect: Rect) -> float:
    (ex, ey), (fx, fy) = rect.axes()
    dx, dy = px - rect.cx, py - rect.cy
    u = abs(dx * ex + dy * ey) - rect.hx
    v = abs(dx * fx + dy * fy) - rect.hy
    return math.hypot(max(u, 0.0), max(v, 0.0))


def _point_segment_distance(px, py, ax, ay, bx, by) -> float:
    vx, vy = bx - ax, by - ay
    L2 = vx * vx + vy * vy
    if L2 == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * vx + (py - ay) * vy) / L2
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * vx), py - (ay + t * vy))


def _rects_overlap(a: Rect, b: Rect) -> bool:
    # separating-axis test over both rects' edge normals
    ca, cb = a.corners(), b.corners()
    for rect in (a, b):
        for axis in rect.axes():
            ax, ay = axis
            pa = [x * ax + y * ay for x, y in ca]
            pb = [x * ax + y * ay for x, y in cb]
            if max(pa) < min(pb) or max(pb) < min(pa):
                return False
    return True


def _rect_rect_distance(a: Rect, b: Rect) -> float:
    if _rects_overlap(a, b):
        return 0.0
    ca, cb = a.corners(), b.corners()
    best = math.inf
    for i in range(4):
        ax, ay = ca[i]
        bx, by = ca[(i + 1) % 4]
        for px, py in cb:
            best = min(best, _point_segment_distance(px, py, ax, ay, bx, by))
    for i in range(4):
        ax, ay = cb[i]
        bx, by = cb[(i + 1) % 4]
        for px, py in ca:
            best = min(best, _point_segment_distance(px, py, ax, ay, bx, by))
    return best


def distance(a: Footprint, b: Footprint) -> float:
    """Exact separation distance between footprints (0 when they touch/overlap)."""
    if isinstance(a, Disk) and isinstance(b, Disk):
        return max(0.0, math.hypot(a.cx - b.cx, a.cy - b.cy) - a.r - b.r)
    if isinstance(a, Disk):
        return max(0.0, _point_rect_distance(a.cx, a.cy, b) - a.r)
    if isinstance(b, Disk):
        return max(0.0, _point_rect_distance(b.cx, b.cy, a) - b.r)
    return _rect_rect_distance(a, b)


def overlaps(a: Footprint, b: Footprint) -> bool:
    if isinstance(a, Disk) and isinstance(b, Disk):
        return math.hypot(a.cx - b.cx, a.cy - b.cy) <= a.r + b.r
    if isinstance(a, Disk):
        return _point_rect_distance(a.cx, a.cy, b) <= a.r
    if isinstance(b, Disk):
        return _point_rect_distance(b.cx, b.cy, a) <= b.r
    return _rects_overlap(a, b)


def contains_point(fp: Footprint, px: float, py: float) -> bool:
    if isinstance(fp, Disk):
        return math.hypot(px - fp.cx, py - fp.cy) <= fp.r
    return _point_in_rect(px, py, fp)


def within_square(fp: Footprint, half: float) -> bool:
    """Footprint fully inside the axis-aligned square [-half, half]^2."""
    if isinstance(fp, Disk):
        return abs(fp.cx) + fp.r <= half and abs(fp.cy) + fp.r <= half
    return all(abs(x) <= half and abs(y) <= half for x, y in fp.corners())


def _clip_polygon(poly, nx, ny, offset):
    """Keep the part of ``poly`` with nx*x + ny*y <= offset (Sutherland-Hodgman)."""
    out = []
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        da = nx * ax + ny * ay - offset
        db = nx * bx + ny * by - offset
        if da <= 0.0:
            out.append((ax, ay))
            if db > 0.0:
                t = da / (da - db)
                out.append((ax + t * (bx - ax), ay + t * (by - ay)))
        elif db <= 0.0:
            t = da / (da - db)
            out.append((ax + t * (bx - ax), ay + t * (by - ay)))
    return out


def strip_extent(fp: Footprint, ox: float, oy: float,
                 ux: float, uy: float, half_width: float):
    """Extent of a footprint along direction u, restricted to a strip.

    The strip is centered on the line through (ox, oy) with direction (ux, uy)
    (unit) and has the given half width.  Returns (t_lo, t_hi) in the line
    coordinate, or None when the footprint misses the strip.  This is the
    contact interval a closing jaw pair of that width sees.
    """
    vx, vy = -uy, ux
    if isinstance(fp, Disk):
        dx, dy = fp.cx - ox, fp.cy - oy
        p = dx * vx + dy * vy
        if abs(p) > fp.r + half_width:
            return None
        tc = dx * ux + dy * uy
        q = max(0.0, abs(p) - half_width)
        s = math.sqrt(max(0.0, fp.r * fp.r - q * q))
        return (tc - s, tc + s)
    poly = fp.corners()
    # clip by  v <= half_width  and  -v <= half_width
    poly = _clip_polygon(poly, vx, vy, ox * vx + oy * vy + half_width)
    if not poly:
        return None
    poly = _clip_polygon(poly, -vx, -vy, -(ox * vx + oy * vy) + half_width)
    if not poly:
        return None
    ts = [(x - ox) * ux + (y - oy) * uy for x, y in poly]
    return (min(ts), max(ts))


def line_point_distance(ox: float, oy: float, ux: float, uy: float,
                        px: float, py: float) -> float:
    """Distance from point p to the infinite line through o with direction u."""
    return abs((px - ox) * -uy + (py - oy) * ux)
