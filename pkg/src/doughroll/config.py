"""Configuration dataclasses and the plain-text (key = value) config file.

All experiment knobs live in one ``ExperimentConfig`` composed of per-module
sections. A config file is standard INI: section headers match the field
names below, keys match dataclass fields. Every CLI command takes
``--config <path>`` plus flag overrides; flags win over file values, file
values win over the built-in defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field, fields

from .errors import ConfigurationError


@dataclass(frozen=True)
class SimConfig:
    """World/material parameters for the 2-D elastoplastic simulator."""

    grid_resolution: int = 64          # cells per axis
    cell_size: float = 1.0 / 64.0      # m
    dt_substep: float = 2e-4           # s
    substeps_per_control: int = 20
    gravity: float = 9.8               # m/s^2, acts along -y
    youngs_modulus: float = 1e5        # Pa
    poisson_ratio: float = 0.3
    yield_stress: float = 2000.0       # Pa
    friction_coeff: float = 0.9
    density: float = 1000.0            # kg/m^2 (2-D sheet density)
    velocity_damping: float = 2e-3     # per-substep viscous bleed, in [0, 1)
    particle_count: int = 384
    domain: tuple = (0.0, 0.0, 1.0, 1.0)   # (x0, y0, x1, y1) in m
    precision_mode: str = "f64"        # {f32, f64}
    # per-control-step action clamp box
    dy_clamp: float = 0.01             # m
    dl_clamp: float = 0.01             # m
    domega_clamp: float = 0.2          # rad
    boundary_cells: int = 3            # grid rows/cols reserved for walls/floor

    def __post_init__(self):
        if self.grid_resolution < 8:
            raise ConfigurationError(f"grid_resolution must be >= 8, got {self.grid_resolution}")
        if not (0.0 < self.poisson_ratio < 0.5):
            raise ConfigurationError(f"poisson_ratio must lie in (0, 0.5), got {self.poisson_ratio}")
        if self.yield_stress <= 0:
            raise ConfigurationError(f"yield_stress must be > 0, got {self.yield_stress}")
        if self.substeps_per_control < 1:
            raise ConfigurationError("substeps_per_control must be >= 1")
        if self.particle_count < 1:
            raise ConfigurationError("particle_count must be >= 1")
        if self.precision_mode not in ("f32", "f64"):
            raise ConfigurationError(f"precision_mode must be f32 or f64, got {self.precision_mode!r}")
        if not (0.0 <= self.velocity_damping < 1.0):
            raise ConfigurationError("velocity_damping must lie in [0, 1)")
        x0, y0, x1, y1 = self.domain
        extent = self.grid_resolution * self.cell_size
        if abs((x1 - x0) - extent) > 1e-9 or abs((y1 - y0) - extent) > 1e-9:
            raise ConfigurationError(
                f"domain extent {(x1 - x0, y1 - y0)} must equal grid_resolution*cell_size = {extent}"
            )
        cfl = self.cell_size / self.wave_speed
        if self.dt_substep > cfl:
            raise ConfigurationError(
                f"dt_substep {self.dt_substep} violates CFL bound dx/wave_speed = {cfl:.3e}"
            )

    @property
    def wave_speed(self) -> float:
        return math.sqrt(self.youngs_modulus / self.density)

    @property
    def mu_lame(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lambda_lame(self) -> float:
        e, nu = self.youngs_modulus, self.poisson_ratio
        return e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def yield_hencky(self) -> float:
        """Deviatoric Hencky-strain norm at yield."""
        return self.yield_stress / (2.0 * self.mu_lame)

    @property
    def floor_height(self) -> float:
        """y of the effective floor surface (top of the clamped boundary band)."""
        return self.domain[1] + self.boundary_cells * self.cell_size

    @property
    def dt_control(self) -> float:
        return self.dt_substep * self.substeps_per_control

    @property
    def clamp_box(self) -> tuple:
        """Per-component action clamp (dy, dl, domega_int, domega_global)."""
        return (self.dy_clamp, self.dl_clamp, self.domega_clamp, 0.0)

    def dtype(self):
        import numpy as np

        return np.float64 if self.precision_mode == "f64" else np.float32


@dataclass(frozen=True)
class SceneSampleRanges:
    """Sampling box for scene generation.

    ``target_distance`` is the signed horizontal offset of the target
    rectangle's center from the dough center.
    """

    dough_radius_min: float = 0.06
    dough_radius_max: float = 0.09
    target_distance_min: float = -0.10
    target_distance_max: float = 0.10
    target_radius_min: float = 0.13
    target_radius_max: float = 0.19
    dough_x: float = 0.5
    tool_radius: float = 0.04
    tool_clearance: float = 0.02

    def __post_init__(self):
        for lo, hi, name in (
            (self.dough_radius_min, self.dough_radius_max, "dough_radius"),
            (self.target_distance_min, self.target_distance_max, "target_distance"),
            (self.target_radius_min, self.target_radius_max, "target_radius"),
        ):
            if lo > hi:
                raise ConfigurationError(f"{name} range is empty: [{lo}, {hi}]")
        if self.dough_radius_min <= 0 or self.target_radius_min <= 0:
            raise ConfigurationError("radii must be positive")
        if self.tool_radius <= 0:
            raise ConfigurationError("tool_radius must be positive")


@dataclass(frozen=True)
class TrajLossSpec:
    """Weights and modes of the trajectory objective."""

    lambda_contact: float = 10.0
    emd_mode: str = "entropic"         # {exact, entropic}
    entropic_epsilon: float = 1e-3
    sinkhorn_iters: int = 100
    n_loss_points: int = 128
    loss_timestep_stride: int = 5
    softmin_beta: float = 200.0        # 1/m

    def __post_init__(self):
        if self.lambda_contact < 0:
            raise ConfigurationError("lambda_contact must be >= 0")
        if self.sinkhorn_iters < 1:
            raise ConfigurationError("sinkhorn_iters must be >= 1")
        if self.n_loss_points < 4:
            raise ConfigurationError("n_loss_points must be >= 4")
        if self.loss_timestep_stride < 1:
            raise ConfigurationError("loss_timestep_stride must be >= 1")
        if self.emd_mode not in ("exact", "entropic"):
            raise ConfigurationError(f"emd_mode must be exact or entropic, got {self.emd_mode!r}")
        if self.entropic_epsilon <= 0:
            raise ConfigurationError("entropic_epsilon must be > 0")


@dataclass(frozen=True)
class TrajOptConfig:
    """Gradient-based trajectory optimizer defaults."""

    horizon: int = 100
    n_reset: int = 1
    iterations: int = 1000
    learning_rate: float = 0.005
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    reset_refresh_every: int = 100     # regenerate reset poses every R iterations
    learn_reset_weight: float = 1.0
    init_action_scale: float = 0.02    # initial actions ~ scale * clamp * N(0,1)

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.reset_refresh_every < 1:
            raise ConfigurationError("reset_refresh_every must be >= 1")


@dataclass(frozen=True)
class CemConfig:
    population: int = 100
    elites: int = 10
    max_iter: int = 10
    plan_horizon: int = 10
    # initial sampling std per action component (dy, dl, domega_int, domega_global)
    initial_std: tuple = (0.005, 0.005, 0.1, 0.0)
    min_std: float = 1e-5

    def __post_init__(self):
        if self.elites > self.population:
            raise ConfigurationError("elites must be <= population")
        if self.population < 1 or self.max_iter < 0 or self.plan_horizon < 1:
            raise ConfigurationError("population/max_iter/plan_horizon out of range")


@dataclass(frozen=True)
class HeuristicConfig:
    """Grid-search rolling primitive baseline."""

    depth_grid: tuple = (0.055, 0.065, 0.075, 0.085)   # tool center height above floor
    length_grid: tuple = (-0.20, -0.12, 0.12, 0.20)    # signed roll length
    n_stages: int = 2


@dataclass(frozen=True)
class DatasetConfig:
    n_obs: int = 128
    n_tool: int = 32
    n_goal: int = 128
    noise_sigma: float = 0.01
    quality_gate: float = 0.2
    demo_count: int = 150
    scene_count: int = 125
    scene_seed: int = 0

    def __post_init__(self):
        if min(self.n_obs, self.n_tool, self.n_goal) < 1:
            raise ConfigurationError("observation cloud sizes must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class PolicyConfig:
    """Set-abstraction encoder + MLP head architecture."""

    # (sample_ratio, grouping_radius, mlp widths) per set-abstraction level
    sa_levels: tuple = ((0.5, 0.05, (64, 64, 128)), (0.25, 0.1, (128, 128, 256)))
    global_mlp_widths: tuple = (256, 512, 1024)
    head_widths: tuple = (1024, 512, 256)
    action_dim: int = 4
    width_scale: float = 0.25
    group_size: int = 32               # max neighbors per grouping ball
    open_loop_horizon: int = 0         # > 0 => head emits horizon*action_dim outputs

    def __post_init__(self):
        for ratio, radius, _ in self.sa_levels:
            if not (0.0 < ratio <= 1.0):
                raise ConfigurationError(f"sample ratio must be in (0,1], got {ratio}")
            if radius <= 0:
                raise ConfigurationError(f"grouping radius must be > 0, got {radius}")
        if self.width_scale <= 0:
            raise ConfigurationError("width_scale must be > 0")

    def scaled(self, widths) -> tuple:
        return tuple(max(4, int(round(w * self.width_scale))) for w in widths)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    val_fraction: float = 0.1
    relabel_fraction: float = 0.5
    noise_sigma: float = 0.01
    open_loop: bool = False

    def __post_init__(self):
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigurationError("val_fraction must be in [0, 1)")
        if not (0.0 <= self.relabel_fraction <= 1.0):
            raise ConfigurationError("relabel_fraction must be in [0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    n_heldout: int = 10
    heldout_seed: int = 777
    frame_width: int = 320
    frame_height: int = 320


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    scene: SceneSampleRanges = field(default_factory=SceneSampleRanges)
    loss: TrajLossSpec = field(default_factory=TrajLossSpec)
    trajopt: TrajOptConfig = field(default_factory=TrajOptConfig)
    cem: CemConfig = field(default_factory=CemConfig)
    heuristic: HeuristicConfig = field(default_factory=HeuristicConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "sim": SimConfig,
    "scene": SceneSampleRanges,
    "loss": TrajLossSpec,
    "trajopt": TrajOptConfig,
    "cem": CemConfig,
    "heuristic": HeuristicConfig,
    "dataset": DatasetConfig,
    "policy": PolicyConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _parse_value(raw: str, current):
    """Parse an INI value against the type of the dataclass default."""
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        if current and isinstance(current[0], tuple):
            # nested tuples: levels separated by '|', fields by ':', widths by ','
            levels = []
            for part in raw.split("|"):
                ratio, radius, widths = part.strip().split(":")
                levels.append(
                    (float(ratio), float(radius), tuple(int(w) for w in widths.split(",")))
                )
            return tuple(levels)
        elem = float if (not current or isinstance(current[0], float)) else int
        return tuple(elem(tok) for tok in raw.replace(",", " ").split())
    return raw


def _format_value(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return " | ".join(
                f"{r}:{rad}:{','.join(str(w) for w in widths)}" for r, rad, widths in value
            )
        return " ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from defaults, an optional INI file, and overrides.

    ``overrides`` maps "section.key" to already-typed or string values.
    """
    values: dict = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(path)
        if not read:
            raise ConfigurationError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigurationError(f"unknown config section [{section}]")
            cls = _SECTIONS[section]
            defaults = cls()
            known = {f.name for f in fields(cls)}
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
                values[section][key] = _parse_value(raw, getattr(defaults, key))
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r} in override")
        cls = _SECTIONS[section]
        if key not in {f.name for f in fields(cls)}:
            raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
        if isinstance(value, str):
            value = _parse_value(value, getattr(cls(), key))
        values[section][key] = value
    return ExperimentConfig(**{name: cls(**values[name]) for name, cls in _SECTIONS.items()})


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text of a config (stable ordering; used for hashing)."""
    out = io.StringIO()
    for name in _SECTIONS:
        section = getattr(cfg, name)
        out.write(f"[{name}]\n")
        for f in fields(section):
            out.write(f"{f.name} = {_format_value(getattr(section, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def replace_section(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    return dataclasses.replace(cfg, **sections)
