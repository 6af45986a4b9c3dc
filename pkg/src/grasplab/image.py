"""Depth-image geometry: windows, rotation stack, grasp-height lookup.

The task frame is aligned with the image: column index j increases with x,
row index i with y, and the frame origin sits at the image center pixel.
All window extraction is rotate-about-target + crop with bilinear sampling;
sample positions that land on the pixel grid (quarter-turn rotations, and
axis-aligned crops at grid centers) are snapped and gathered exactly, so
those paths are lossless permutations of the source values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import heightmap_io


class WindowOutOfBounds(ValueError):
    """A requested window reaches beyond the (padded) image."""


class AllMissing(ValueError):
    """A depth probe found no valid pixel."""


_SNAP = 1e-6  # px; sampling positions this close to the grid are gathered exactly


@dataclass
class DepthImage:
    """Top-down orthographic heightmap. ``data`` is mm above the bin floor."""

    data: np.ndarray            # (H, W) float32
    missing: np.ndarray         # (H, W) bool
    pitch_mm: float
    seed: int = 0

    def __post_init__(self):
        if self.pitch_mm <= 0:
            raise ValueError("pitch must be positive")
        self.data = np.asarray(self.data, dtype=np.float32)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.data.shape != self.missing.shape:
            raise ValueError("data/missing shape mismatch")

    @property
    def shape(self):
        return self.data.shape

    def center_px(self):
        h, w = self.data.shape
        return (h - 1) / 2.0, (w - 1) / 2.0

    def px_of(self, x: float, y: float):
        """Continuous pixel coordinates (row, col) of a task-frame point."""
        ci, cj = self.center_px()
        return ci + y / self.pitch_mm, cj + x / self.pitch_mm

    def xy_of(self, i: float, j: float):
        ci, cj = self.center_px()
        return (j - cj) * self.pitch_mm, (i - ci) * self.pitch_mm

    def to_bytes(self) -> bytes:
        return heightmap_io.encode_depth(self.data, self.missing,
                                         self.pitch_mm, self.seed)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DepthImage":
        magic, values, missing, pitch, seed = heightmap_io.decode(blob)
        if magic != heightmap_io.MAGIC_DEPTH:
            raise ValueError("not a depth-image container")
        return cls(values.astype(np.float32), missing, pitch, seed)


@dataclass
class WindowImage:
    """Normalized square depth window centered on a grasp pose."""

    values: np.ndarray          # (win, win) float32 in [-1, 1]
    x: float
    y: float
    a: float
    center_ref_mm: float        # depth value subtracted during normalization

    def to_bytes(self, pitch_mm: float = 0.0) -> bytes:
        return heightmap_io.encode_window(self.values, pitch_mm)

    @classmethod
    def from_bytes(cls, blob: bytes, x=0.0, y=0.0, a=0.0) -> "WindowImage":
        magic, values, _missing, _pitch, _seed = heightmap_io.decode(blob)
        if magic != heightmap_io.MAGIC_WINDOW:
            raise ValueError("not a window container")
        return cls(values.astype(np.float32), x, y, a, 0.0)


def _bilinear(data: np.ndarray, missing: np.ndarray, si: np.ndarray,
              sj: np.ndarray, oob: str):
    """Sample (si, sj) positions; returns (values f64, missing-mask).

    oob='error' raises WindowOutOfBounds for samples beyond the image;
    oob='missing' fills them with 0 and marks them missing.
    """
    h, w = data.shape
    si = np.where(np.abs(si - np.rint(si)) < _SNAP, np.rint(si), si)
    sj = np.where(np.abs(sj - np.rint(sj)) < _SNAP, np.rint(sj), sj)
    out = (si < 0) | (si > h - 1) | (sj < 0) | (sj > w - 1)
    if oob == "error" and out.any():
        raise WindowOutOfBounds("sample positions reach beyond the image")
    i0 = np.clip(np.floor(si), 0, h - 1).astype(np.intp)
    j0 = np.clip(np.floor(sj), 0, w - 1).astype(np.intp)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    fi = np.clip(si, 0, h - 1) - i0
    fj = np.clip(sj, 0, w - 1) - j0
    d = data.astype(np.float64, copy=False)
    w00 = (1 - fi) * (1 - fj)
    w01 = (1 - fi) * fj
    w10 = fi * (1 - fj)
    w11 = fi * fj
    values = (w00 * d[i0, j0] + w01 * d[i0, j1]
              + w10 * d[i1, j0] + w11 * d[i1, j1])
    eps = 1e-12
    miss = ((w00 > eps) & missing[i0, j0]) | ((w01 > eps) & missing[i0, j1]) \
        | ((w10 > eps) & missing[i1, j0]) | ((w11 > eps) & missing[i1, j1])
    miss |= out
    values = np.where(out, 0.0, values)
    return values, miss


def _window_offsets(win: int):
    half = (win - 1) / 2.0
    dv, du = np.meshgrid(np.arange(win) - half, np.arange(win) - half,
                         indexing="ij")
    return du, dv  # du: column offsets, dv: row offsets


def extract_window(image: DepthImage, x: float, y: float, a: float,
                   *, window_px: int = 32,
                   clamp_mm: float = 100.0) -> WindowImage:
    """Rotate-about-(x, y) by ``a``, crop ``window_px`` square, normalize.

    The window's horizontal axis is the gripper closing axis.  Missing pixels
    propagate through the resampling and are filled with the smallest valid
    value in the window; the result is centered on the mean of the four
    central pixels, clamped to +-clamp_mm and scaled to [-1, 1].
    """
    du, dv = _window_offsets(window_px)
    ca, sa = math.cos(a), math.sin(a)
    pi0, pj0 = image.px_of(x, y)
    sj = pj0 + du * ca - dv * sa
    si = pi0 + du * sa + dv * ca
    values, miss = _bilinear(image.data, image.missing, si, sj, oob="error")
    if miss.all():
        values = np.zeros_like(values)
    elif miss.any():
        values = np.where(miss, values[~miss].min(), values)
    c = window_px // 2
    center_ref = float(values[c - 1:c + 1, c - 1:c + 1].mean())
    norm = np.clip(values - center_ref, -clamp_mm, clamp_mm) / clamp_mm
    return WindowImage(norm.astype(np.float32), x, y, a, center_ref)


def _quarter_turns(a: float):
    """k such that a == k*pi/2 within float noise, else None."""
    k = round(a / (math.pi / 2))
    if abs(a - k * math.pi / 2) < 1e-12:
        return k % 4
    return None


_ROTATION_GRIDS: dict = {}


def _rotation_grid(shape: tuple[int, int], a: float):
    """Cached bilinear gather indices/weights for a center rotation."""
    key = (shape, round(a, 12))
    grid = _ROTATION_GRIDS.get(key)
    if grid is None:
        h, w = shape
        ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
        jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        dx = jj - cj
        dy = ii - ci
        ca, sa = math.cos(a), math.sin(a)
        sj = cj + dx * ca - dy * sa
        si = ci + dx * sa + dy * ca
        si = np.where(np.abs(si - np.rint(si)) < _SNAP, np.rint(si), si)
        sj = np.where(np.abs(sj - np.rint(sj)) < _SNAP, np.rint(sj), sj)
        out = (si < 0) | (si > h - 1) | (sj < 0) | (sj > w - 1)
        i0 = np.clip(np.floor(si), 0, h - 1).astype(np.intp)
        j0 = np.clip(np.floor(sj), 0, w - 1).astype(np.intp)
        i1 = np.minimum(i0 + 1, h - 1)
        j1 = np.minimum(j0 + 1, w - 1)
        fi = (np.clip(si, 0, h - 1) - i0)
        fj = (np.clip(sj, 0, w - 1) - j0)
        flat = [(i0 * w + j0).ravel(), (i0 * w + j1).ravel(),
                (i1 * w + j0).ravel(), (i1 * w + j1).ravel()]
        weights = [((1 - fi) * (1 - fj)).ravel(), ((1 - fi) * fj).ravel(),
                   (fi * (1 - fj)).ravel(), (fi * fj).ravel()]
        grid = (flat, [w_.astype(np.float32) for w_ in weights], out)
        _ROTATION_GRIDS[key] = grid
    return grid


def rotate_image(image: DepthImage, a: float) -> DepthImage:
    """Rotate about the image center; borders fill with 0 and become missing.

    The rotated image at position q (task frame, origin at center) holds the
    source value at R(a) q, so windows extracted axis-aligned from the result
    match windows extracted at angle ``a`` from the source.
    """
    q = _quarter_turns(a)
    if q is not None and image.data.shape[0] == image.data.shape[1]:
        # lossless permutation path; rot90(m)[i, j] == m[j, n-1-i] matches
        # the sampling map derived from R(a) for square, center-anchored data
        return DepthImage(np.rot90(image.data, k=q).copy(),
                          np.rot90(image.missing, k=q).copy(),
                          image.pitch_mm, image.seed)
    h, w = image.data.shape
    flat, weights, out = _rotation_grid((h, w), a)
    src = image.data.ravel()
    values = (weights[0] * src[flat[0]] + weights[1] * src[flat[1]]
              + weights[2] * src[flat[2]] + weights[3] * src[flat[3]])
    values = values.reshape(h, w)
    values[out] = 0.0
    if image.missing.any():
        msrc = image.missing.ravel()
        eps = 1e-12
        miss = ((weights[0] > eps) & msrc[flat[0]]) \
            | ((weights[1] > eps) & msrc[flat[1]]) \
            | ((weights[2] > eps) & msrc[flat[2]]) \
            | ((weights[3] > eps) & msrc[flat[3]])
        miss = miss.reshape(h, w) | out
    else:
        miss = out.copy()
    return DepthImage(values.astype(np.float32), miss, image.pitch_mm,
                      image.seed)


def rotate_stack(image: DepthImage, rotations: int = 20) -> list[DepthImage]:
    """Pre-rotated copies at a_k = k*pi/rotations, k = 0..rotations-1."""
    return [rotate_image(image, k * math.pi / rotations)
            for k in range(rotations)]


def z_from_depth(image: DepthImage, x: float, y: float, *,
                 probe_diameter_mm: float = 16.0,
                 offset_mm: float = 10.0) -> float:
    """Grasp height: local top surface in a probe disk, minus a descent offset."""
    r_px = probe_diameter_mm / 2.0 / image.pitch_mm
    pi0, pj0 = image.px_of(x, y)
    h, w = image.data.shape
    i_lo = max(0, int(math.floor(pi0 - r_px)))
    i_hi = min(h - 1, int(math.ceil(pi0 + r_px)))
    j_lo = max(0, int(math.floor(pj0 - r_px)))
    j_hi = min(w - 1, int(math.ceil(pj0 + r_px)))
    if i_lo > i_hi or j_lo > j_hi:
        raise AllMissing("probe disk lies outside the image")
    patch = image.data[i_lo:i_hi + 1, j_lo:j_hi + 1]
    miss = image.missing[i_lo:i_hi + 1, j_lo:j_hi + 1]
    di2 = (np.arange(i_lo, i_hi + 1, dtype=np.float64) - pi0) ** 2
    dj2 = (np.arange(j_lo, j_hi + 1, dtype=np.float64) - pj0) ** 2
    inside = (di2[:, None] + dj2[None, :] <= r_px * r_px) & ~miss
    if not inside.any():
        raise AllMissing("no valid depth in probe disk")
    top = float(patch[inside].max())
    return max(0.0, top - offset_mm)


def pad_to(image: DepthImage, size_px: int) -> DepthImage:
    """Symmetric zero-pad to ``size_px`` square; padding is marked missing.

    The center pixel stays anchored (the task-frame origin is the image
    center), so a dimension whose parity differs from the target gets one
    extra pixel of padding.
    """
    h, w = image.data.shape
    if h >= size_px and w >= size_px:
        return image
    th = size_px + (size_px - h) % 2 if h < size_px else h
    tw = size_px + (size_px - w) % 2 if w < size_px else w
    pt, pl = (th - h) // 2, (tw - w) // 2
    data = np.pad(image.data, ((pt, th - h - pt), (pl, tw - w - pl)))
    missing = np.pad(image.missing, ((pt, th - h - pt), (pl, tw - w - pl)),
                     constant_values=True)
    return DepthImage(data, missing, image.pitch_mm, image.seed)


def pad_for_inference(image: DepthImage, size_px: int = 110) -> DepthImage:
    """Pad so every action cell's receptive field is in bounds (no-op at 110)."""
    return pad_to(image, size_px)


def window_safe_size(size_px: int = 110, window_px: int = 32,
                     grid_size: int = 40) -> int:
    """Image side length for which windows at *any* rotated grid cell fit."""
    # farthest rotated cell center from the image center, plus the rotated
    # window's half diagonal, plus one pixel of bilinear support
    cell_r = (grid_size - 1) / 2.0 * 2.0 * math.sqrt(2.0)   # px, 4 mm grid = 2 px
    win_r = (window_px - 1) / 2.0 * math.sqrt(2.0)
    half = cell_r + win_r + 1.5
    needed = 2 * int(math.ceil(half)) + 1
    return max(size_px, needed)
