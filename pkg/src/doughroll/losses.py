"""Point-cloud objectives: exact and entropic EMD, Chamfer, contact, metrics.

``emd_exact`` is the evaluation-grade transport distance (assignment solver);
``emd_entropic`` is the differentiable surrogate used inside optimization.
The normalized improvement metric compares initial/final/goal clouds with the
exact solver.
"""

from __future__ import annotations

import warnings
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import TrajLossSpec
from .errors import CardinalityError, DegenerateGoalError
from .sim import kernels
from .sim.types import ToolPose

MARGINAL_TOL = 1e-3


def _as_cloud(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != 2:
        raise CardinalityError(f"expected an (n, 2) point cloud, got shape {A.shape}")
    return A


def emd_exact(A, B) -> float:
    """Mean matched Euclidean distance under the optimal assignment."""
    A, B = _as_cloud(A), _as_cloud(B)
    if A.shape[0] != B.shape[0]:
        raise CardinalityError(f"cloud sizes differ: {A.shape[0]} vs {B.shape[0]}")
    if not (np.isfinite(A).all() and np.isfinite(B).all()):
        raise CardinalityError("clouds must be finite")
    cost = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


class EntropicResult(NamedTuple):
    value: float
    plan: np.ndarray
    marginal_error: float
    converged: bool


_ENTROPIC_CACHE: dict = {}


def _entropic_eval(A, B, eps, iters):
    # jit cache keyed on the (static) iteration count
    fn = _ENTROPIC_CACHE.get(iters)
    if fn is None:
        fn = jax.jit(lambda A, B, eps, it=iters: kernels.sinkhorn_cost(A, B, eps, it))
        _ENTROPIC_CACHE[iters] = fn
    return fn(A, B, eps)


def emd_entropic(A, B, spec: TrajLossSpec) -> EntropicResult:
    """Entropic-regularized transport cost and plan (log-domain Sinkhorn).

    The returned value is the transport cost of the converged plan (always
    >= 0). Consumers differentiating the cost hold the plan fixed (envelope
    gradient). A marginal violation above ``MARGINAL_TOL`` flags
    ``converged=False`` (with a warning); the value is still returned.
    """
    A, B = _as_cloud(A), _as_cloud(B)
    if A.shape[0] != B.shape[0]:
        raise CardinalityError(f"cloud sizes differ: {A.shape[0]} vs {B.shape[0]}")
    cost, _, plan, viol = _entropic_eval(
        jnp.asarray(A), jnp.asarray(B), float(spec.entropic_epsilon), int(spec.sinkhorn_iters)
    )
    viol = float(viol)
    converged = viol <= MARGINAL_TOL
    if not converged:
        warnings.warn(f"sinkhorn marginal violation {viol:.2e} exceeds {MARGINAL_TOL}")
    return EntropicResult(float(cost), np.asarray(plan), viol, converged)


def chamfer(A, B) -> float:
    """Symmetric mean nearest-neighbor distance (first power)."""
    A, B = _as_cloud(A), _as_cloud(B)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise CardinalityError("chamfer requires nonempty clouds")
    D = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=-1)
    return float(D.min(axis=1).mean() + D.min(axis=0).mean())


def contact_loss(tool: ToolPose, positions, beta: float = 200.0) -> float:
    """Smooth minimum tool-to-particle clearance; 0 on touch/penetration."""
    pts = _as_cloud(positions)
    if pts.shape[0] < 1:
        raise CardinalityError("contact_loss requires at least one particle")
    d = np.maximum(np.linalg.norm(pts - np.asarray(tool.center), axis=1) - tool.radius, 0.0)
    m = d.min()
    soft = m - np.log(np.exp(-beta * (d - m)).sum()) / beta
    return float(max(soft, 0.0))


def downsample_cloud(A, n: int) -> np.ndarray:
    """Deterministic farthest point sampling to exactly n points.

    Seeded at the lexicographically smallest point; ties in the max-min
    distance go to the lexicographically smaller candidate.
    """
    A = _as_cloud(A)
    if not (1 <= n <= A.shape[0]):
        raise CardinalityError(f"cannot sample {n} points from a cloud of {A.shape[0]}")
    order = np.lexsort((A[:, 1], A[:, 0]))
    P = A[order]
    sel = np.empty(n, dtype=np.int64)
    sel[0] = 0
    d = np.sum((P - P[0]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d))
        sel[i] = nxt
        d = np.minimum(d, np.sum((P - P[nxt]) ** 2, axis=1))
    return P[sel]


def normalized_performance(P0, PT, Pg) -> float:
    """Fraction of the initial goal distance eliminated (1 = goal reached)."""
    d0 = emd_exact(P0, Pg)
    if d0 <= 0.0:
        raise DegenerateGoalError("initial cloud already coincides with the goal")
    dT = emd_exact(PT, Pg)
    return (d0 - dT) / d0


def traj_loss(states, goal, spec: TrajLossSpec, reset_timesteps=(), mode: str = "optimization") -> float:
    """Trajectory objective over a completed rollout.

    Sums, at the configured stride (final state always included), the roll
    term between the FPS-downsampled dough cloud and the goal plus the
    weighted contact term; reset timesteps are excluded from the contact
    term. ``optimization`` mode uses the same regularized transport value as
    the differentiable rollout path; ``evaluation`` mode uses ``emd_exact``.
    """
    goal_cloud = np.asarray(getattr(goal, "cloud", goal), dtype=np.float64)
    if goal_cloud.shape[0] != spec.n_loss_points:
        raise CardinalityError(
            f"goal cloud size {goal_cloud.shape[0]} != n_loss_points {spec.n_loss_points}"
        )
    horizon = len(states) - 1
    if horizon < 1:
        raise CardinalityError("traj_loss requires at least one control step")
    from .sim.engine import loss_timesteps

    resets = set(reset_timesteps)
    total = 0.0
    for t in loss_timesteps(horizon, spec.loss_timestep_stride):
        state = states[t]
        x = np.asarray(state.particles.x)
        pts = downsample_cloud(x, spec.n_loss_points) if x.shape[0] > spec.n_loss_points else x
        if mode == "evaluation":
            total += emd_exact(pts, goal_cloud)
        else:
            _, dual, _, _ = _entropic_eval(
                jnp.asarray(pts), jnp.asarray(goal_cloud),
                float(spec.entropic_epsilon), int(spec.sinkhorn_iters)
            )
            total += float(dual)
        if t not in resets:
            total += spec.lambda_contact * contact_loss(state.tool, x, spec.softmin_beta)
    return float(total)
