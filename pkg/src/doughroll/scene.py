"""Scene generation: dough/target configurations and goal point clouds.

A scene is a dough disk resting on the floor plus a flattened-rectangle
target region. The target rectangle conserves the dough's 2-D area: its
height is ``dough_area / (2 * target_radius)``, so goals are physically
attainable by redistributing material.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import SceneSampleRanges, SimConfig
from .errors import ConfigurationError
from .sim.types import ToolPose

_CLEARANCE = 1e-3  # minimum gap between dough/target extents and the walls


@dataclass(frozen=True)
class SceneSample:
    dough_center: tuple      # (x, y) m
    dough_radius: float      # m
    target_center: tuple     # (x, y) m; y is the rectangle's base (floor)
    target_radius: float     # half-width of the target rectangle, m
    initial_tool_pose: ToolPose
    seed: int

    @property
    def target_height(self) -> float:
        """Rectangle height implied by conserving the dough's area."""
        return math.pi * self.dough_radius**2 / (2.0 * self.target_radius)

    def target_bounds(self) -> tuple:
        """(x_lo, y_lo, x_hi, y_hi) of the target rectangle."""
        cx, base = self.target_center
        return (cx - self.target_radius, base, cx + self.target_radius, base + self.target_height)


@dataclass(frozen=True)
class GoalSpec:
    cloud: np.ndarray        # (n, 2) points filling the target rectangle
    target_center: tuple
    target_radius: float


def _validate_scene(sample: SceneSample, config: SimConfig) -> None:
    x0, y0, x1, y1 = config.domain
    floor = config.floor_height
    cx, cy = sample.dough_center
    r = sample.dough_radius
    if not (x0 + _CLEARANCE < cx - r and cx + r < x1 - _CLEARANCE):
        raise ConfigurationError(
            f"dough [{cx - r:.4f}, {cx + r:.4f}] leaves no x-clearance in domain [{x0}, {x1}]"
        )
    if cy + r > y1 - _CLEARANCE:
        raise ConfigurationError(f"dough top {cy + r:.4f} exceeds domain height {y1}")
    tx0, _, tx1, ty1 = sample.target_bounds()
    if not (x0 + _CLEARANCE < tx0 and tx1 < x1 - _CLEARANCE):
        raise ConfigurationError(
            f"target rectangle [{tx0:.4f}, {tx1:.4f}] leaves no x-clearance in domain [{x0}, {x1}]"
        )
    if ty1 > y1 - _CLEARANCE:
        raise ConfigurationError(f"target rectangle top {ty1:.4f} exceeds domain height {y1}")
    if floor + 2 * r > y1:
        raise ConfigurationError("dough does not fit above the floor band")


def _build_sample(
    dough_radius: float,
    target_distance: float,
    target_radius: float,
    ranges: SceneSampleRanges,
    config: SimConfig,
    seed: int,
) -> SceneSample:
    floor = config.floor_height
    dough_center = (ranges.dough_x, floor + dough_radius)
    target_center = (ranges.dough_x + target_distance, floor)
    tool_y = floor + 2.0 * dough_radius + ranges.tool_radius + ranges.tool_clearance
    pose = ToolPose(
        center=np.array([ranges.dough_x, tool_y]),
        heading=0.0,
        spin=0.0,
        radius=ranges.tool_radius,
    )
    sample = SceneSample(
        dough_center=dough_center,
        dough_radius=float(dough_radius),
        target_center=target_center,
        target_radius=float(target_radius),
        initial_tool_pose=pose,
        seed=int(seed),
    )
    _validate_scene(sample, config)
    return sample


def sample_scene_grid(
    num_configs: int,
    seed: int,
    ranges: SceneSampleRanges,
    config: SimConfig | None = None,
) -> list:
    """Sample ``num_configs`` scene configurations over the given ranges.

    When ``num_configs`` is a perfect cube the three varying quantities
    (dough radius, target distance, target radius) are laid out on a uniform
    lattice; otherwise they are drawn uniformly at random. Deterministic
    given ``seed`` either way.
    """
    if num_configs < 1:
        raise ConfigurationError("num_configs must be >= 1")
    config = config or SimConfig()
    axes = [
        (ranges.dough_radius_min, ranges.dough_radius_max),
        (ranges.target_distance_min, ranges.target_distance_max),
        (ranges.target_radius_min, ranges.target_radius_max),
    ]
    k = round(num_configs ** (1.0 / 3.0))
    samples = []
    if k**3 == num_configs:
        grids = []
        for lo, hi in axes:
            grids.append(np.full(k, 0.5 * (lo + hi)) if k == 1 else np.linspace(lo, hi, k))
        idx = 0
        for r in grids[0]:
            for d in grids[1]:
                for rt in grids[2]:
                    samples.append(_build_sample(r, d, rt, ranges, config, seed=seed + idx))
                    idx += 1
    else:
        rng = np.random.Generator(np.random.PCG64(seed))
        draws = rng.uniform(
            low=[lo for lo, _ in axes], high=[hi for _, hi in axes], size=(num_configs, 3)
        )
        for idx, (r, d, rt) in enumerate(draws):
            samples.append(_build_sample(r, d, rt, ranges, config, seed=seed + idx))
    return samples


def make_goal_cloud(
    sample: SceneSample, n_points: int, config: SimConfig | None = None
) -> GoalSpec:
    """Fill the flattened target rectangle with a deterministic point lattice.

    The lattice is a centered nx-by-ny grid with nx*ny == n_points, choosing
    the factor pair whose point spacing is closest to isotropic; points are
    emitted bottom-to-top in row-major order.
    """
    if n_points < 4:
        raise ConfigurationError("n_points must be >= 4")
    config = config or SimConfig()
    x_lo, y_lo, x_hi, y_hi = sample.target_bounds()
    width, height = x_hi - x_lo, y_hi - y_lo
    x0, _, x1, _ = config.domain
    if width > (x1 - x0):
        raise ConfigurationError(f"target width {width:.4f} exceeds domain width {x1 - x0}")

    best = None
    for nx in range(1, n_points + 1):
        if n_points % nx:
            continue
        ny = n_points // nx
        skew = abs(math.log((width / nx) / (height / ny)))
        if best is None or skew < best[0]:
            best = (skew, nx, ny)
    _, nx, ny = best
    xs = x_lo + (np.arange(nx) + 0.5) * (width / nx)
    ys = y_lo + (np.arange(ny) + 0.5) * (height / ny)
    gx, gy = np.meshgrid(xs, ys)
    cloud = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return GoalSpec(cloud=cloud, target_center=sample.target_center, target_radius=sample.target_radius)
