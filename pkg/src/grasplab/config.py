"""Configuration for the grasp-learning laboratory.

Every tunable that the simulator, image pipeline, network, and trainer expose
lives here as a dataclass field, so a run is fully described by one
``LabConfig``.  Configs round-trip through a plain-text ``section.key = value``
file (see `load_config` / `save_config`).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union


@dataclass
class SimConfig:
    """Bin, object library, and scene generation."""

    bin_size_mm: float = 160.0          # inner square side; 40x40 action cells at 4 mm
    wall_height_mm: float = 60.0
    wall_thickness_mm: float = 8.0
    cylinder_diameter_mm: float = 15.0
    cylinder_height_mm: float = 60.0
    cube_edge_mm: float = 25.0
    p_upright: float = 0.6              # probability a spawned object rests upright
    contact_clearance_mm: float = 1.0   # min footprint separation between objects
    spawn_max_tries: int = 2000         # rejection-sampling budget per object
    p_flip: float = 0.0                 # chance a successful clamp is downgraded
    displace_on_failure: bool = False   # jitter nearby objects after a failed grasp
    displacement_mm: float = 5.0
    p_missing: float = 0.0              # depth-speckle dropout probability per pixel


@dataclass
class GraspConfig:
    """Gripper geometry and the clamp test."""

    jaw_openings_mm: tuple[float, ...] = (30.0, 50.0, 70.0)
    min_clamp_width_mm: float = 4.0
    approach_retract_mm: float = 12.0   # single vertical retract after a descent hit
    finger_width_mm: float = 12.0       # lateral extent, perpendicular to closing axis
    finger_thickness_mm: float = 6.0    # extent along the closing axis
    stability_radius_frac: float = 0.25  # of object circumradius; training_reduced only
    clamp_mode: str = "training_reduced"  # or "application"

    def __post_init__(self):
        self.jaw_openings_mm = tuple(float(v) for v in self.jaw_openings_mm)
        if self.clamp_mode not in ("training_reduced", "application"):
            raise ValueError(f"unknown clamp_mode {self.clamp_mode!r}")


@dataclass
class ImageConfig:
    """Depth-image geometry and window extraction."""

    pitch_mm: float = 2.0
    size_px: int = 110                  # overview image side; square
    window_px: int = 32
    rotations: int = 20                 # angles a_k = k*pi/rotations
    grid_size: int = 40                 # action cells per axis
    z_offset_mm: float = 10.0           # finger descent below the local top surface
    z_probe_diameter_mm: float = 16.0   # disk over which the local top is taken
    normalize_clamp_mm: float = 100.0   # window depth clamp before scaling to [-1, 1]


@dataclass
class NetConfig:
    """Numerics of the value network (architecture is fixed in net.ARCHITECTURE)."""

    bn_eps: float = 1e-5
    bn_momentum: float = 0.99           # running = m*running + (1-m)*batch
    output_clip: float = 1e-6           # keeps sigmoid outputs strictly inside (0, 1)
    init_seed: int = 0


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    max_epochs: int = 40
    patience: int = 5                   # epochs without a new best test loss
    kappa: float = 2.0                  # asymmetric upweighting of failed grasps
    reg_mode: str = "sum"               # 'sum' | 'fan_in' | 'mean' kernel L2 scaling
    retrain_warm_start: bool = True
    retrain_epochs: int = 10

    def __post_init__(self):
        if self.reg_mode not in ("sum", "fan_in", "mean"):
            raise ValueError(f"unknown reg_mode {self.reg_mode!r}")


@dataclass
class ScheduleConfig:
    """Exploration schedule: a pure-random warm-up, then a fixed method mixture."""

    random_phase: int = 1000
    mix_random: float = 1440.0
    mix_probabilistic: float = 8830.0
    mix_uncertain: float = 1300.0
    mix_maximum: float = 9430.0
    maximum_n: int = 5


@dataclass
class EvalConfig:
    failure_budget: int = 2             # consecutive full-plan failures ending a trial
    nominal_attempt_s: float = 10.0     # used only for the nominal PPH figure


@dataclass
class PipelineConfig:
    total_attempts: int = 5000
    objects: int = 10
    object_kind: str = "cylinder"       # 'cylinder' | 'cube'
    train_every: int = 250
    epochs_per_round: int = 4
    initial_epochs: int = 30            # first training pass, end of random phase
    final_epochs: int = 40
    threaded: bool = False              # parallel collect/train; interleaved otherwise


@dataclass
class LabConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    grasp: GraspConfig = field(default_factory=GraspConfig)
    image: ImageConfig = field(default_factory=ImageConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def replace(self, **sections) -> "LabConfig":
        return dataclasses.replace(self, **sections)


def _parse_value(raw: str, typ) -> object:
    raw = raw.strip()
    if typ is bool or typ == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    # remaining case: tuple of floats, e.g. jaw openings "30,50,70"
    return tuple(float(v) for v in raw.split(","))


def load_config(path: Union[str, Path], base: LabConfig | None = None) -> LabConfig:
    """Read a ``section.key = value`` file on top of defaults (or ``base``)."""
    cfg = base if base is not None else LabConfig()
    sections = {f.name: dataclasses.replace(getattr(cfg, f.name))
                for f in dataclasses.fields(cfg)}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'section.key = value'")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if "." not in key:
            raise ValueError(f"{path}:{lineno}: key {key!r} missing section prefix")
        section, name = key.split(".", 1)
        if section not in sections:
            raise ValueError(f"{path}:{lineno}: unknown section {section!r}")
        target = sections[section]
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        current = getattr(target, name)
        typ = type(current) if current is not None else str
        if isinstance(current, tuple):
            typ = tuple
        setattr(target, name, _parse_value(raw, typ))
    for section, obj in sections.items():
        if hasattr(obj, "__post_init__"):
            obj.__post_init__()
    return LabConfig(**sections)


def save_config(cfg: LabConfig, path: Union[str, Path]) -> None:
    lines = []
    for f in dataclasses.fields(cfg):
        section = getattr(cfg, f.name)
        for sf in dataclasses.fields(section):
            value = getattr(section, sf.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{f.name}.{sf.name} = {value}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
