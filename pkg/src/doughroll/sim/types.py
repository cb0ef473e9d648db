"""Value types for the simulator.

Everything is a NamedTuple of arrays so states pass directly through
jax.jit/scan as pytrees; eager helpers normalize python scalars to numpy.
"""

from __future__ import annotations

from typing import Any, NamedTuple

import numpy as np


class ToolPose(NamedTuple):
    """Rigid roller pose: disk cross-section in the 2-D slice."""

    center: Any          # (2,) m
    heading: Any = 0.0   # rad; rolling direction, fixed +-x in 2-D
    spin: Any = 0.0      # rad; internal roller rotation
    radius: Any = 0.04   # m

    def with_(self, **kw) -> "ToolPose":
        return self._replace(**kw)


class ActionCommand(NamedTuple):
    """Per-control-step incremental tool motion."""

    dy: Any = 0.0             # m, vertical displacement
    dl: Any = 0.0             # m, displacement along rolling direction
    domega_int: Any = 0.0     # rad, internal roller rotation
    domega_global: Any = 0.0  # rad, rotation about the vertical axis; must be 0 in 2-D

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.array([self.dy, self.dl, self.domega_int, self.domega_global], dtype=dtype)

    @staticmethod
    def from_array(a) -> "ActionCommand":
        return ActionCommand(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


class ParticleState(NamedTuple):
    x: Any        # (n, 2) positions, m
    v: Any        # (n, 2) velocities, m/s
    F: Any        # (n, 2, 2) deformation gradients
    C: Any        # (n, 2, 2) affine velocity fields, 1/s
    mass: Any     # (n,) kg
    volume: Any   # (n,) m^2


class SimState(NamedTuple):
    particles: ParticleState
    tool: ToolPose
    step_index: int = 0


def make_tool_pose(center, heading=0.0, spin=0.0, radius=0.04, dtype=np.float64) -> ToolPose:
    return ToolPose(
        center=np.asarray(center, dtype=dtype),
        heading=dtype(heading),
        spin=dtype(spin),
        radius=dtype(radius),
    )


def actions_to_array(actions, dtype=np.float64) -> np.ndarray:
    """(T, 4) array from a list of ActionCommand (or an array passthrough)."""
    if isinstance(actions, np.ndarray):
        return actions.astype(dtype)
    return np.array([a.as_array(dtype) for a in actions], dtype=dtype).reshape(-1, 4)


def array_to_actions(arr) -> list:
    return [ActionCommand.from_array(row) for row in np.asarray(arr)]
