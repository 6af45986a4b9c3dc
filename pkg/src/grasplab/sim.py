"""Deterministic 2.5-D bin-picking world.

Objects are extruded footprints (disks and oriented rectangles) resting on the
bin floor in one of two poses.  A grasp attempt is adjudicated by closed-form
geometry: descend to a height read from the rendered depth image, retract once
on collision, then close the jaws along the rotated axis and test the clamp.
Because the physics is exact and seeded, replaying an attempt reproduces its
outcome bit for bit, which makes the simulator its own ground-truth oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import geometry, image as img_mod
from .config import GraspConfig, ImageConfig, SimConfig
from .geometry import Disk, Rect
from .grid import GraspIndex, GridSpec, index_to_pose
from .hashing import fnv1a_64, unit_hash


class PlacementError(RuntimeError):
    """Rejection sampling could not fit the requested objects into the bin."""


FAILURE_CAUSES = ("none", "finger_collision", "empty_close",
                  "unstable_clamp", "bin_collision")


@dataclass(frozen=True)
class ObjectSpec:
    kind: str                       # 'cylinder' | 'cube'
    dims_mm: tuple[float, ...]      # cylinder: (diameter, height); cube: (edge,)
    edge_profile: str = "rounded"   # descriptive only

    def __post_init__(self):
        if self.kind not in ("cylinder", "cube"):
            raise ValueError(f"unknown object kind {self.kind!r}")
        if any(d <= 0 for d in self.dims_mm):
            raise ValueError("object dimensions must be positive")
        n = 2 if self.kind == "cylinder" else 1
        if len(self.dims_mm) != n:
            raise ValueError(f"{self.kind} takes {n} dimension(s)")


def cylinder_spec(cfg: SimConfig) -> ObjectSpec:
    return ObjectSpec("cylinder", (cfg.cylinder_diameter_mm,
                                   cfg.cylinder_height_mm), "rounded")


def cube_spec(cfg: SimConfig) -> ObjectSpec:
    return ObjectSpec("cube", (cfg.cube_edge_mm,), "sharp")


@dataclass(frozen=True)
class SceneObject:
    spec: ObjectSpec
    x: float
    y: float
    yaw: float
    pose: str                       # 'upright' | 'lying'

    def footprint(self) -> geometry.Footprint:
        if self.spec.kind == "cylinder":
            dia, height = self.spec.dims_mm
            if self.pose == "upright":
                return Disk(self.x, self.y, dia / 2.0)
            return Rect(self.x, self.y, height / 2.0, dia / 2.0, self.yaw)
        edge, = self.spec.dims_mm
        return Rect(self.x, self.y, edge / 2.0, edge / 2.0, self.yaw)

    def height(self) -> float:
        if self.spec.kind == "cylinder":
            dia, height = self.spec.dims_mm
            return height if self.pose == "upright" else dia
        return self.spec.dims_mm[0]


@dataclass(eq=False)
class Scene:
    """Immutable-by-convention world state; attempts return a new Scene."""

    bin_size_mm: float
    wall_height_mm: float
    wall_thickness_mm: float
    objects: tuple[SceneObject, ...]
    seed: int
    step: int = 0
    _caches: dict = field(default_factory=dict, repr=False)

    @property
    def half(self) -> float:
        return self.bin_size_mm / 2.0

    def digest(self) -> str:
        """Content token for the object layout (ignores step)."""
        h = fnv1a_64(repr([(o.spec.kind, o.spec.dims_mm, round(o.x, 6),
                            round(o.y, 6), round(o.yaw, 9), o.pose)
                           for o in self.objects]).encode())
        return f"scene-{self.seed}-{h:016x}"

    def bumped(self, objects: Optional[tuple] = None) -> "Scene":
        return Scene(self.bin_size_mm, self.wall_height_mm,
                     self.wall_thickness_mm,
                     self.objects if objects is None else objects,
                     self.seed, self.step + 1)

    def wall_rects(self) -> list[Rect]:
        h, t = self.half, self.wall_thickness_mm
        mid, half_len = h + t / 2.0, h + t
        return [
            Rect(0.0, -mid, half_len, t / 2.0, 0.0),
            Rect(0.0, mid, half_len, t / 2.0, 0.0),
            Rect(-mid, 0.0, t / 2.0, half_len, 0.0),
            Rect(mid, 0.0, t / 2.0, half_len, 0.0),
        ]


@dataclass(frozen=True)
class GraspPose:
    x: float
    y: float
    a: float
    d_index: int

    def __post_init__(self):
        object.__setattr__(self, "a", self.a % math.pi)


@dataclass(frozen=True)
class GraspOutcome:
    reward: int
    failure_cause: str
    z_mm: float = 0.0
    object_index: int = -1

    def __post_init__(self):
        if self.failure_cause not in FAILURE_CAUSES:
            raise ValueError(f"unknown failure cause {self.failure_cause!r}")
        if (self.reward == 1) != (self.failure_cause == "none"):
            raise ValueError("reward and failure cause disagree")


def _unit_hash(*parts) -> float:
    """Deterministic u in [0, 1) from a tuple of hashable parts."""
    return unit_hash(":".join(str(p) for p in parts).encode())


class Simulator:
    """Bundles sim/grasp/image configuration with the world operations."""

    def __init__(self, sim_cfg: SimConfig | None = None,
                 grasp_cfg: GraspConfig | None = None,
                 image_cfg: ImageConfig | None = None):
        self.sim = sim_cfg or SimConfig()
        self.grasp = grasp_cfg or GraspConfig()
        self.image = image_cfg or ImageConfig()

    # -- scene generation ---------------------------------------------------

    def spawn_scene(self, m: int, spec: ObjectSpec | None = None,
                    seed: int = 0) -> Scene:
        """Place m non-overlapping objects uniformly at random."""
        if m < 0:
            raise ValueError("object count must be >= 0")
        spec = spec or cylinder_spec(self.sim)
        rng = np.random.default_rng(seed)
        half = self.sim.bin_size_mm / 2.0
        placed: list[SceneObject] = []
        footprints: list[geometry.Footprint] = []
        for _ in range(m):
            for attempt in range(self.sim.spawn_max_tries):
                pose = ("upright" if rng.random() < self.sim.p_upright
                        else "lying")
                x = rng.uniform(-half, half)
                y = rng.uniform(-half, half)
                yaw = rng.uniform(0.0, math.pi)
                cand = SceneObject(spec, x, y, yaw, pose)
                fp = cand.footprint()
                if not geometry.within_square(fp, half):
                    continue
                if all(geometry.distance(fp, other)
                       >= self.sim.contact_clearance_mm
                       for other in footprints):
                    placed.append(cand)
                    footprints.append(fp)
                    break
            else:
                raise PlacementError(
                    f"could not place object {len(placed) + 1} of {m}")
        return Scene(self.sim.bin_size_mm, self.sim.wall_height_mm,
                     self.sim.wall_thickness_mm, tuple(placed), seed)

    # -- rendering ----------------------------------------------------------

    def render_depth(self, scene: Scene) -> img_mod.DepthImage:
        """Orthographic top-down heightmap of the scene (cached per Scene)."""
        key = ("render", self.image.size_px, self.image.pitch_mm,
               self.sim.p_missing)
        cached = scene._caches.get(key)
        if cached is not None:
            return cached
        n = self.image.size_px
        pitch = self.image.pitch_mm
        c = (n - 1) / 2.0
        data = np.zeros((n, n), dtype=np.float32)
        xs = (np.arange(n) - c) * pitch
        ys = (np.arange(n) - c) * pitch
        half, t = scene.half, scene.wall_thickness_mm
        gx, gy = np.meshgrid(xs, ys)
        band = np.maximum(np.abs(gx), np.abs(gy))
        data[(band > half) & (band <= half + t)] = scene.wall_height_mm
        for obj in scene.objects:
            fp = obj.footprint()
            h = obj.height()
            r = geometry.circumradius(fp)
            j_lo = max(0, int(math.floor((fp.cx - r) / pitch + c)))
            j_hi = min(n - 1, int(math.ceil((fp.cx + r) / pitch + c)))
            i_lo = max(0, int(math.floor((fp.cy - r) / pitch + c)))
            i_hi = min(n - 1, int(math.ceil((fp.cy + r) / pitch + c)))
            if j_lo > j_hi or i_lo > i_hi:
                continue
            px = xs[j_lo:j_hi + 1][None, :]
            py = ys[i_lo:i_hi + 1][:, None]
            if isinstance(fp, Disk):
                mask = (px - fp.cx) ** 2 + (py - fp.cy) ** 2 <= fp.r ** 2
            else:
                (ex, ey), (fx, fy) = fp.axes()
                dx, dy = px - fp.cx, py - fp.cy
                mask = ((np.abs(dx * ex + dy * ey) <= fp.hx)
                        & (np.abs(dx * fx + dy * fy) <= fp.hy))
            region = data[i_lo:i_hi + 1, j_lo:j_hi + 1]
            np.maximum(region, np.where(mask, np.float32(h), 0.0), out=region)
        missing = np.zeros((n, n), dtype=bool)
        if self.sim.p_missing > 0.0:
            rng = np.random.default_rng((scene.seed, scene.step, 0x5eed))
            missing = rng.random((n, n)) < self.sim.p_missing
        depth = img_mod.DepthImage(data, missing, pitch, scene.seed)
        scene._caches[key] = depth
        return depth

    # -- grasping -----------------------------------------------------------

    def _scene_geometry(self, scene: Scene):
        """Cached (footprint, height, circumradius) per object."""
        geom = scene._caches.get("geom")
        if geom is None:
            geom = [(o.footprint(), o.height(),
                     geometry.circumradius(o.footprint()))
                    for o in scene.objects]
            scene._caches["geom"] = geom
        return geom

    def attempt_grasp(self, scene: Scene, pose: GraspPose,
                      grasp_cfg: GraspConfig | None = None):
        """Adjudicate one grasp; returns (GraspOutcome, next Scene)."""
        cfg = grasp_cfg or self.grasp
        d = cfg.jaw_openings_mm[pose.d_index]
        half = scene.half
        if abs(pose.x) > half or abs(pose.y) > half:
            return GraspOutcome(0, "bin_collision"), self._after_failure(
                scene, pose)
        depth = self.render_depth(scene)
        try:
            z = img_mod.z_from_depth(
                depth, pose.x, pose.y,
                probe_diameter_mm=self.image.z_probe_diameter_mm,
                offset_mm=self.image.z_offset_mm)
        except img_mod.AllMissing:
            return GraspOutcome(0, "bin_collision"), self._after_failure(
                scene, pose)

        ux, uy = math.cos(pose.a), math.sin(pose.a)
        t_fing = cfg.finger_thickness_mm
        w_fing = cfg.finger_width_mm
        reach = d / 2.0 + t_fing / 2.0
        fingers = [Rect(pose.x + s * reach * ux, pose.y + s * reach * uy,
                        t_fing / 2.0, w_fing / 2.0, pose.a)
                   for s in (1.0, -1.0)]
        finger_r = math.hypot(t_fing, w_fing) / 2.0
        walls = scene.wall_rects()
        geom = self._scene_geometry(scene)

        def blockers(z_level):
            wall_hit = obj_hit = False
            for f in fingers:
                if (scene.wall_height_mm > z_level
                        and max(abs(f.cx), abs(f.cy)) + finger_r > half
                        and any(geometry.overlaps(f, wr) for wr in walls)):
                    wall_hit = True
                for fp, height, circ_r in geom:
                    if (height > z_level
                            and math.hypot(f.cx - fp.cx, f.cy - fp.cy)
                            <= circ_r + finger_r
                            and geometry.overlaps(f, fp)):
                        obj_hit = True
            return wall_hit, obj_hit

        wall_hit, obj_hit = blockers(z)
        if wall_hit or obj_hit:
            z += cfg.approach_retract_mm          # single retract, then commit
            wall_hit, obj_hit = blockers(z)
            if wall_hit:
                return GraspOutcome(0, "bin_collision", z), \
                    self._after_failure(scene, pose)
            if obj_hit:
                return GraspOutcome(0, "finger_collision", z), \
                    self._after_failure(scene, pose)

        # closing sweep: first contact of each jaw along the rotated axis
        half_w = w_fing / 2.0
        jaw = d / 2.0
        intervals = []          # (t_lo, t_hi, owner) owner: index or 'wall'
        for k, (fp, height, circ_r) in enumerate(geom):
            if (height <= z or math.hypot(fp.cx - pose.x, fp.cy - pose.y)
                    > circ_r + jaw + half_w):
                continue
            ext = geometry.strip_extent(fp, pose.x, pose.y, ux, uy, half_w)
            if ext is None or ext[0] > jaw or ext[1] < -jaw:
                continue
            intervals.append((max(ext[0], -jaw), min(ext[1], jaw), k))
        if (scene.wall_height_mm > z
                and max(abs(pose.x), abs(pose.y)) + jaw + half_w > half):
            for wr in walls:
                ext = geometry.strip_extent(wr, pose.x, pose.y, ux, uy, half_w)
                if ext is None or ext[0] > jaw or ext[1] < -jaw:
                    continue
                intervals.append((max(ext[0], -jaw), min(ext[1], jaw), "wall"))
        if not intervals:
            return GraspOutcome(0, "empty_close", z), \
                self._after_failure(scene, pose)

        eps = 1e-9
        hi = max(iv[1] for iv in intervals)
        lo = min(iv[0] for iv in intervals)
        owners_hi = {iv[2] for iv in intervals if iv[1] >= hi - eps}
        owners_lo = {iv[2] for iv in intervals if iv[0] <= lo + eps}
        if "wall" in owners_hi or "wall" in owners_lo:
            return GraspOutcome(0, "bin_collision", z), \
                self._after_failure(scene, pose)
        common = owners_hi & owners_lo
        if len(owners_hi) != 1 or len(owners_lo) != 1 or not common:
            return GraspOutcome(0, "finger_collision", z), \
                self._after_failure(scene, pose)

        k = common.pop()
        width = hi - lo
        if width < cfg.min_clamp_width_mm or width >= d - eps:
            return GraspOutcome(0, "unstable_clamp", z), \
                self._after_failure(scene, pose)
        target = scene.objects[k]
        if cfg.clamp_mode == "training_reduced":
            # reduced clamp force: the closing line must pass near the centroid
            r_stab = cfg.stability_radius_frac * geom[k][2]
            if geometry.line_point_distance(pose.x, pose.y, ux, uy,
                                            target.x, target.y) > r_stab:
                return GraspOutcome(0, "unstable_clamp", z), \
                    self._after_failure(scene, pose)
        if self.sim.p_flip > 0.0 and _unit_hash(
                scene.seed, scene.step, f"{pose.x:.3f}", f"{pose.y:.3f}",
                f"{pose.a:.6f}", pose.d_index) < self.sim.p_flip:
            return GraspOutcome(0, "unstable_clamp", z), \
                self._after_failure(scene, pose)

        remaining = tuple(o for idx, o in enumerate(scene.objects) if idx != k)
        return GraspOutcome(1, "none", z, k), scene.bumped(remaining)

    def _after_failure(self, scene: Scene, pose: GraspPose) -> Scene:
        if not self.sim.displace_on_failure or not scene.objects:
            return scene.bumped()
        rng = np.random.default_rng(
            (scene.seed, scene.step, fnv1a_64(b"displace") & 0xFFFF))
        half = scene.half
        new_objects = list(scene.objects)
        for k, o in enumerate(scene.objects):
            if math.hypot(o.x - pose.x, o.y - pose.y) > 60.0:
                continue
            dx, dy = rng.uniform(-self.sim.displacement_mm,
                                 self.sim.displacement_mm, size=2)
            dyaw = rng.uniform(-0.3, 0.3)
            cand = replace(o, x=o.x + dx, y=o.y + dy,
                           yaw=(o.yaw + dyaw) % math.pi)
            fp = cand.footprint()
            ok = geometry.within_square(fp, half) and all(
                geometry.distance(fp, other.footprint())
                >= self.sim.contact_clearance_mm
                for m, other in enumerate(new_objects) if m != k)
            if ok:
                new_objects[k] = cand
        return scene.bumped(tuple(new_objects))

    # -- ground-truth oracle -------------------------------------------------

    def grid_spec(self) -> GridSpec:
        return GridSpec(self.image.rotations, self.image.grid_size,
                        self.sim.bin_size_mm / self.image.grid_size,
                        len(self.grasp.jaw_openings_mm))

    def enumerate_feasible(self, scene: Scene,
                           grasp_cfg: GraspConfig | None = None) -> set[int]:
        """Brute force attempt_grasp over every cell; returns reward-1 flats."""
        spec = self.grid_spec()
        feasible = set()
        for flat in range(spec.n_cells):
            idx = GraspIndex.from_flat(flat, spec)
            x, y, a = index_to_pose(idx, spec)
            outcome, _ = self.attempt_grasp(
                scene, GraspPose(x, y, a, idx.k_d), grasp_cfg)
            if outcome.reward == 1:
                feasible.add(flat)
        return feasible


# -- serialization ----------------------------------------------------------

def save_scene(scene: Scene) -> str:
    lines = [
        "# grasplab scene v1",
        f"bin {scene.bin_size_mm!r} {scene.wall_height_mm!r} "
        f"{scene.wall_thickness_mm!r} {scene.seed} {scene.step}",
    ]
    for o in scene.objects:
        dims = ",".join(repr(v) for v in o.spec.dims_mm)
        lines.append(f"{o.spec.kind} {dims} {o.x!r} {o.y!r} {o.yaw!r} {o.pose}")
    return "\n".join(lines) + "\n"


def load_scene(text: str) -> Scene:
    lines = [ln for ln in text.splitlines()
             if ln.strip() and not ln.startswith("#")]
    if not lines or not lines[0].startswith("bin "):
        raise ValueError("scene text missing bin header")
    _, size, wall_h, wall_t, seed, step = lines[0].split()
    objects = []
    for ln in lines[1:]:
        kind, dims, x, y, yaw, pose = ln.split()
        spec = ObjectSpec(kind, tuple(float(v) for v in dims.split(",")),
                          "rounded" if kind == "cylinder" else "sharp")
        objects.append(SceneObject(spec, float(x), float(y), float(yaw), pose))
    return Scene(float(size), float(wall_h), float(wall_t), tuple(objects),
                 int(seed), int(step))
