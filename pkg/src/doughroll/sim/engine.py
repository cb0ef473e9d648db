"""Public simulator operations (eager, numpy in/out).

These wrappers own input validation, dtype handling, error raising, and the
conversion between the value types in ``types.py`` and the array tuples the
JIT kernels consume. All operations are pure: states are values and repeated
calls with identical inputs produce bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from ..config import SimConfig
from ..errors import (
    ConfigurationError,
    GradientOverflowError,
    ResetCollisionError,
    ScheduleError,
    SimulationDivergedError,
)
from . import kernels
from .types import ActionCommand, ParticleState, SimState, ToolPose, actions_to_array

_GOLDEN = 0.6180339887498949


@dataclass(frozen=True)
class ResetSchedule:
    """Timesteps at which the tool teleports instead of acting.

    ``reset_poses`` may be empty, in which case each reset pose is
    regenerated at execution time as a hover pose above the current dough
    (this is the deployment convention); when poses are supplied they are
    used verbatim and treated as constants under differentiation.
    """

    reset_timesteps: tuple = ()
    reset_poses: tuple = ()
    clearance: float = 0.02

    def __post_init__(self):
        ts = tuple(self.reset_timesteps)
        if any(t2 <= t1 for t1, t2 in zip(ts, ts[1:])):
            raise ScheduleError(f"reset timesteps must be strictly increasing: {ts}")
        if self.reset_poses and len(self.reset_poses) != len(ts):
            raise ScheduleError("reset_poses must be empty or match reset_timesteps")

    def validate_horizon(self, horizon: int) -> None:
        for t in self.reset_timesteps:
            if not (1 <= t <= horizon - 1):
                raise ScheduleError(
                    f"reset timestep {t} outside [1, {horizon - 1}] for horizon {horizon}"
                )


# ---------------------------------------------------------------------------
# conversions
# ---------------------------------------------------------------------------


def particles_to_tuple(p: ParticleState, dtype):
    return tuple(jnp.asarray(np.asarray(f), dtype=dtype) for f in p)


def tool_to_tuple(t: ToolPose, dtype):
    return (
        jnp.asarray(np.asarray(t.center), dtype=dtype),
        jnp.asarray(float(t.heading), dtype=dtype),
        jnp.asarray(float(t.spin), dtype=dtype),
        jnp.asarray(float(t.radius), dtype=dtype),
    )


def tuple_to_particles(p) -> ParticleState:
    return ParticleState(*(np.asarray(f) for f in p))


def tuple_to_tool(t) -> ToolPose:
    return ToolPose(
        center=np.asarray(t[0]),
        heading=float(t[1]),
        spin=float(t[2]),
        radius=float(t[3]),
    )


def _schedule_arrays(schedule: ResetSchedule, horizon: int, dtype):
    is_reset = np.zeros(horizon, dtype=bool)
    poses = np.zeros((horizon, 3), dtype=dtype)
    use_sched = np.zeros(horizon, dtype=bool)
    for i, t in enumerate(schedule.reset_timesteps):
        is_reset[t - 1] = True
        if schedule.reset_poses:
            pose = schedule.reset_poses[i]
            poses[t - 1] = [pose.center[0], pose.center[1], pose.spin]
            use_sched[t - 1] = True
    return jnp.asarray(is_reset), jnp.asarray(poses), jnp.asarray(use_sched)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def init_state(config: SimConfig, sample) -> SimState:
    """Seeded jittered-lattice disk of exactly ``config.particle_count`` particles.

    The lattice pitch targets the disk area; if the jittered draw lands short
    the pitch shrinks slightly and the draw repeats, then the particles
    closest to the disk center are kept. Per-particle mass/volume are set so
    the totals match the analytic disk exactly.
    """
    n = config.particle_count
    r = sample.dough_radius
    center = np.asarray(sample.dough_center, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(sample.seed))

    h = r * math.sqrt(math.pi / n)
    pts = None
    for _ in range(64):
        k = int(math.ceil(2.0 * r / h)) + 2
        ax = center[0] - r + (np.arange(k) + 0.5) * h
        ay = center[1] - r + (np.arange(k) + 0.5) * h
        gx, gy = np.meshgrid(ax, ay)
        lattice = np.stack([gx.ravel(), gy.ravel()], axis=1)
        jitter = rng.uniform(-0.4 * h, 0.4 * h, size=lattice.shape)
        cand = lattice + jitter
        inside = np.linalg.norm(cand - center, axis=1) <= r
        if inside.sum() >= n:
            pts = cand[inside]
            break
        h *= 0.96
    if pts is None:
        raise ConfigurationError("could not seed the requested particle count inside the dough disk")
    dist = np.linalg.norm(pts - center, axis=1)
    keep = np.argsort(dist, kind="stable")[:n]
    x = pts[keep]

    area = math.pi * r * r
    dtype = config.dtype()
    particles = ParticleState(
        x=x.astype(dtype),
        v=np.zeros((n, 2), dtype=dtype),
        F=np.broadcast_to(np.eye(2, dtype=dtype), (n, 2, 2)).copy(),
        C=np.zeros((n, 2, 2), dtype=dtype),
        mass=np.full(n, config.density * area / n, dtype=dtype),
        volume=np.full(n, area / n, dtype=dtype),
    )
    return SimState(particles=particles, tool=sample.initial_tool_pose, step_index=0)


def clamp_action_command(action: ActionCommand, config: SimConfig):
    """Project an action into the clamp box; returns (clamped, was_clamped)."""
    box = np.asarray(config.clamp_box)
    raw = action.as_array()
    clamped = np.clip(raw, -box, box)
    return ActionCommand.from_array(clamped), bool(np.any(clamped != raw))


def apply_action_kinematics(tool: ToolPose, action: ActionCommand, config: SimConfig | None = None):
    """Incremental rigid tool motion; returns (new pose, clamp flag)."""
    config = config or SimConfig()
    act, clamped = clamp_action_command(action, config)
    center = np.asarray(tool.center, dtype=np.float64)
    new_center = center + np.array([act.dl * math.cos(float(tool.heading)), act.dy])
    pose = ToolPose(
        center=new_center,
        heading=float(tool.heading),
        spin=float(tool.spin) + act.domega_int,
        radius=float(tool.radius),
    )
    return pose, clamped


@partial(jax.jit, static_argnames=("consts_key",))
def _control_jit(p, tool, action, consts_key):
    return kernels.control_step_core(p, tool, action, dict(consts_key))


def control_step(state: SimState, action: ActionCommand, config: SimConfig) -> SimState:
    """One control step: tool kinematics once, then the MPM substeps."""
    dtype = config.dtype()
    p = particles_to_tuple(state.particles, dtype)
    tool = tool_to_tuple(state.tool, dtype)
    act = jnp.asarray(action.as_array(dtype))
    new_p, new_tool = _control_jit(p, tool, act, kernels.sim_consts(config))
    particles = tuple_to_particles(new_p)
    if not all(np.all(np.isfinite(f)) for f in (particles.x, particles.v, particles.F, particles.C)):
        raise SimulationDivergedError(state.step_index + 1)
    return SimState(
        particles=particles, tool=tuple_to_tool(new_tool), step_index=state.step_index + 1
    )


def tool_signed_distance(tool: ToolPose, point) -> float:
    """Signed distance to the roller surface; negative inside."""
    return float(np.linalg.norm(np.asarray(point, dtype=np.float64) - np.asarray(tool.center)) - tool.radius)


def reset_tool(state: SimState, pose: ToolPose) -> SimState:
    """Teleport the tool; particle fields pass through untouched."""
    if pose.radius <= 0:
        raise ScheduleError("reset pose radius must be positive")
    d = np.linalg.norm(np.asarray(state.particles.x) - np.asarray(pose.center), axis=1) - pose.radius
    if np.any(d < 0):
        raise ResetCollisionError(
            f"reset pose intersects dough: min signed distance {d.min():.5f}"
        )
    return SimState(particles=state.particles, tool=pose, step_index=state.step_index)


def _check_reset_collisions(schedule: ResetSchedule, states: list) -> None:
    if not schedule.reset_poses:
        return
    for i, t in enumerate(schedule.reset_timesteps):
        pose = schedule.reset_poses[i]
        x = np.asarray(states[t - 1].particles.x)
        d = np.linalg.norm(x - np.asarray(pose.center), axis=1) - pose.radius
        if np.any(d < 0):
            raise ResetCollisionError(f"scheduled reset pose at t={t} intersects dough")


def rollout(state0: SimState, actions, schedule: ResetSchedule, config: SimConfig) -> list:
    """Execute T control steps with scheduled tool resets; returns T+1 states."""
    acts = actions_to_array(actions, config.dtype())
    horizon = acts.shape[0]
    if horizon == 0:
        return [state0]
    schedule.validate_horizon(horizon)
    dtype = config.dtype()
    p0 = particles_to_tuple(state0.particles, dtype)
    tool0 = tool_to_tuple(state0.tool, dtype)
    is_reset, poses, use_sched = _schedule_arrays(schedule, horizon, dtype)
    _, outs = kernels.rollout_arrays(
        p0, tool0, jnp.asarray(acts), is_reset, poses, use_sched,
        dtype(schedule.clearance), kernels.sim_consts(config)
    )
    xs, vs, Fs, Cs, centers, spins, _, finite, *_ = [np.asarray(o) for o in outs]
    bad = np.nonzero(~finite)[0]
    if bad.size:
        raise SimulationDivergedError(state0.step_index + int(bad[0]) + 1)

    states = [state0]
    mass, volume = np.asarray(state0.particles.mass), np.asarray(state0.particles.volume)
    heading, radius = float(state0.tool.heading), float(state0.tool.radius)
    for t in range(horizon):
        states.append(
            SimState(
                particles=ParticleState(xs[t], vs[t], Fs[t], Cs[t], mass, volume),
                tool=ToolPose(centers[t], heading, float(spins[t]), radius),
                step_index=state0.step_index + t + 1,
            )
        )
    _check_reset_collisions(schedule, states)
    return states


def loss_timesteps(horizon: int, stride: int) -> tuple:
    """1-based timesteps entering the trajectory objective (always includes T)."""
    ts = list(range(stride, horizon + 1, stride))
    if not ts or ts[-1] != horizon:
        ts.append(horizon)
    return tuple(ts)


def rollout_loss_and_grad(state0: SimState, actions, schedule: ResetSchedule,
                          loss_spec, config: SimConfig, goal_cloud,
                          pose_penalty_steps=(), pose_penalty_targets=None,
                          pose_penalty_weight: float = 0.0):
    """Trajectory objective and its per-action gradients.

    Reverse-mode differentiation with per-control-step checkpointing; the
    scheduled reset poses are constants (their gradient is identically zero)
    and the action slots at reset timesteps receive exact-zero gradients.
    The optional pose penalty adds the learn-reset distance term toward
    target poses (k, 3) = (cx, cy, spin) at the given timesteps.
    """
    acts = actions_to_array(actions, config.dtype())
    horizon = acts.shape[0]
    if horizon == 0:
        raise ScheduleError("loss gradient requires horizon >= 1")
    schedule.validate_horizon(horizon)
    dtype = config.dtype()
    p0 = particles_to_tuple(state0.particles, dtype)
    tool0 = tool_to_tuple(state0.tool, dtype)
    is_reset, poses, use_sched = _schedule_arrays(schedule, horizon, dtype)
    steps = loss_timesteps(horizon, loss_spec.loss_timestep_stride)
    contact_steps = tuple(t for t in steps if t not in set(schedule.reset_timesteps))
    targets = None
    if pose_penalty_steps:
        targets = jnp.asarray(np.asarray(pose_penalty_targets), dtype=dtype)
    loss, grad, finite = kernels.loss_and_grad_arrays(
        p0, tool0, jnp.asarray(acts), is_reset, poses, use_sched,
        dtype(schedule.clearance), jnp.asarray(goal_cloud, dtype=dtype),
        kernels.loss_consts(loss_spec), steps, contact_steps, kernels.sim_consts(config),
        pen_steps=tuple(pose_penalty_steps), pen_targets=targets,
        pen_weight=float(pose_penalty_weight),
    )
    finite = np.asarray(finite)
    bad = np.nonzero(~finite)[0]
    if bad.size:
        raise SimulationDivergedError(state0.step_index + int(bad[0]) + 1)
    grad = np.asarray(grad)
    if not np.all(np.isfinite(grad)):
        raise GradientOverflowError(int(np.nonzero(~np.isfinite(grad).all(axis=1))[0][0]) + 1)
    return float(loss), grad


def sample_tool_surface(tool: ToolPose, n: int, seed: int = 0) -> np.ndarray:
    """n points on the roller circumference, uniform angular lattice.

    The lattice is rotated by the roller spin plus a seed-derived offset, so
    repeated calls are deterministic and spacing is exactly 2*pi/n.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    offset = 2.0 * math.pi * ((seed * _GOLDEN) % 1.0)
    angles = float(tool.spin) + offset + 2.0 * math.pi * np.arange(n) / n
    return np.asarray(tool.center) + tool.radius * np.stack(
        [np.cos(angles), np.sin(angles)], axis=1
    )


def generate_reset_pose(state: SimState, stage_index: int = 0, clearance: float = 0.02,
                        config: SimConfig | None = None) -> ToolPose:
    """Collision-free hover pose above the dough for the next rolling stage.

    Centered on the dough centroid, raised above the highest particle by the
    roller radius plus ``clearance``; spin is preserved. ``stage_index`` is
    accepted for bookkeeping but does not change the pose.
    """
    del stage_index
    config = config or SimConfig()
    x = np.asarray(state.particles.x)
    cx = float(np.mean(x[:, 0]))
    cy = float(np.max(x[:, 1])) + float(state.tool.radius) + clearance
    x0, y0, x1, y1 = config.domain
    if not (x0 <= cx <= x1):
        raise ScheduleError(f"dough centroid x={cx:.4f} outside domain [{x0}, {x1}]")
    return ToolPose(
        center=np.array([cx, cy]),
        heading=float(state.tool.heading),
        spin=float(state.tool.spin),
        radius=float(state.tool.radius),
    )


@partial(jax.jit, static_argnames=("consts_key",))
def _substep_jit(p, center, radius, tool_v, tool_omega, consts_key):
    return kernels.mpm_substep(p, center, radius, tool_v, tool_omega, dict(consts_key))


def substep_probe(state: SimState, config: SimConfig, tool_velocity=(0.0, 0.0), tool_omega=0.0):
    """One raw MPM substep at the current tool pose (for invariant tests)."""
    dtype = config.dtype()
    p = particles_to_tuple(state.particles, dtype)
    new_p = _substep_jit(
        p,
        jnp.asarray(np.asarray(state.tool.center), dtype=dtype),
        jnp.asarray(float(state.tool.radius), dtype=dtype),
        jnp.asarray(np.asarray(tool_velocity), dtype=dtype),
        jnp.asarray(float(tool_omega), dtype=dtype),
        kernels.sim_consts(config),
    )
    return SimState(tuple_to_particles(new_p), state.tool, state.step_index)
